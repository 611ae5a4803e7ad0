fn main() {
    std::process::exit(povss::cli::dispatch(std::env::args_os()));
}
