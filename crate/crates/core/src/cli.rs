//! Command-line front end. Exit codes: 0 success, 1 invalid arguments,
//! 2 runtime or numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::grad::gradcheck;
use crate::losses::LossWeights;
use crate::metrics::{evaluate, Aggregation, Decoder};
use crate::personalize::{load_state, run_personalization, save_state, write_trace, TrainConfig};
use crate::snapshot::Dataset;
use crate::synthbench::{
    ablation_tsv, concat_evaluate, generate, run_ablation, run_kshot, train_samples, SynthConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "povss", version, about = "Personalized open-vocabulary segmentation head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Synth(SynthArgs),
    /// Train the personal entry on a dataset's training split.
    Personalize(PersonalizeArgs),
    /// Evaluate a state (or the frozen model) on the test split.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Run the five-row module ablation.
    Ablate(AblateArgs),
    /// Train and evaluate at several shot counts.
    Kshot(KshotArgs),
    /// Evaluate on side-by-side positive/negative test pairs.
    ConcatEval(ConcatEvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    proposals: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    feat_height: Option<usize>,
    #[arg(long)]
    feat_width: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    name_offset: Option<f64>,
    #[arg(long)]
    context_leak: Option<f64>,
    #[arg(long)]
    edge_sharpness: Option<f64>,
    #[arg(long)]
    distractor_rate: Option<f64>,
    #[arg(long)]
    logit_scale: Option<f64>,
    #[arg(long)]
    k_train: Option<usize>,
    #[arg(long)]
    n_test_pos: Option<usize>,
    #[arg(long)]
    n_test_neg: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_dice: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_bce: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_cls: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_negz: f64,
    #[arg(long, default_value_t = 500.0)]
    lambda_negm: f64,
    /// Disable visual embedding injection.
    #[arg(long)]
    no_inject: bool,
    /// Disable the negative mask proposal.
    #[arg(long)]
    no_neg: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PersonalizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use only the first K training entries.
    #[arg(long)]
    k: Option<usize>,
    /// Write the per-step loss trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    /// Decode with the frozen vocabulary only.
    #[arg(long, conflicts_with = "state")]
    frozen_only: bool,
    /// Average ratios per image instead of over summed counts.
    #[arg(long)]
    per_image: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct KshotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    k: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct ConcatEvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(flag: &str, constraint: &str) -> Failure {
    Failure::Usage(format!("{flag} {constraint}"))
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        if self.iters == 0 {
            return Err(usage("--iters", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(usage("--lr", "must be a positive finite number"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(usage("--alpha", "must lie in [0, 1]"));
        }
        for (flag, v) in [
            ("--lambda-dice", self.lambda_dice),
            ("--lambda-bce", self.lambda_bce),
            ("--lambda-cls", self.lambda_cls),
            ("--lambda-negz", self.lambda_negz),
            ("--lambda-negm", self.lambda_negm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(usage(flag, "must be a nonnegative finite number"));
            }
        }
        Ok(TrainConfig {
            learning_rate: self.lr,
            iterations: self.iters,
            alpha: self.alpha,
            weights: LossWeights {
                dice: self.lambda_dice,
                bce: self.lambda_bce,
                cls: self.lambda_cls,
                neg_z: self.lambda_negz,
                neg_m: self.lambda_negm,
            },
            seed: self.seed,
            injection_enabled: !self.no_inject,
            negative_enabled: !self.no_neg,
        })
    }
}

fn print_train_config(c: &TrainConfig) {
    let w = &c.weights;
    println!(
        "  lr={:?} iters={} alpha={:?} inject={} neg={} seed={}",
        c.learning_rate, c.iterations, c.alpha, c.injection_enabled, c.negative_enabled, c.seed
    );
    println!(
        "  lambda dice={:?} bce={:?} cls={:?} negz={:?} negm={:?}",
        w.dice, w.bce, w.cls, w.neg_z, w.neg_m
    );
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

fn run_synth(a: &SynthArgs) -> Result<(), Failure> {
    let d = SynthConfig::default();
    let config = SynthConfig {
        vocab: a.vocab.unwrap_or(d.vocab),
        dim: a.dim.unwrap_or(d.dim),
        proposals: a.proposals.unwrap_or(d.proposals),
        height: a.height.unwrap_or(d.height),
        width: a.width.unwrap_or(d.width),
        feat_height: a.feat_height.unwrap_or(d.feat_height),
        feat_width: a.feat_width.unwrap_or(d.feat_width),
        instances_per_class: a.instances.unwrap_or(d.instances_per_class),
        personal_offset: a.delta.unwrap_or(d.personal_offset),
        noise: a.sigma.unwrap_or(d.noise),
        name_offset: a.name_offset.unwrap_or(d.name_offset),
        context_leak: a.context_leak.unwrap_or(d.context_leak),
        edge_sharpness: a.edge_sharpness.unwrap_or(d.edge_sharpness),
        extra_distractor_rate: a.distractor_rate.unwrap_or(d.extra_distractor_rate),
        logit_scale: a.logit_scale.unwrap_or(d.logit_scale),
        k_train: a.k_train.unwrap_or(d.k_train),
        n_test_pos: a.n_test_pos.unwrap_or(d.n_test_pos),
        n_test_neg: a.n_test_neg.unwrap_or(d.n_test_neg),
        seed: a.seed.unwrap_or(d.seed),
    };
    println!("synth out={}", a.out.display());
    println!("  {config:?}");
    if let Err(e) = config.validate() {
        return Err(match e {
            Error::Infeasible(_) => Failure::Runtime(e),
            other => Failure::Usage(other.to_string()),
        });
    }
    generate(&config, &a.out)?;
    Ok(())
}

fn run_personalize(a: &PersonalizeArgs) -> Result<(), Failure> {
    let config = a.train.resolve()?;
    if a.k == Some(0) {
        return Err(usage("--k", "must be at least 1"));
    }
    println!("personalize data={} out={} k={:?}", a.data.display(), a.out.display(), a.k);
    print_train_config(&config);
    let dataset = Dataset::open(&a.data)?;
    let k = a.k.unwrap_or(dataset.train().len());
    let samples = train_samples(&dataset, k)?;
    let outcome = run_personalization(&samples, &dataset.init_vector()?, &config)?;
    save_state(&outcome.state, &a.out)?;
    if let Some(trace) = &a.trace {
        write_trace(&outcome.trace, trace)?;
    }
    let totals = outcome.totals();
    println!(
        "loss first={:.6} last={:.6} steps={}",
        totals.first().copied().unwrap_or(f64::NAN),
        totals.last().copied().unwrap_or(f64::NAN),
        totals.len()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<(), Failure> {
    if a.state.is_none() && !a.frozen_only {
        return Err(usage("--state", "is required unless --frozen-only is given"));
    }
    let aggregation = if a.per_image {
        Aggregation::PerImage
    } else {
        Aggregation::Dataset
    };
    println!(
        "eval data={} state={} report={} frozen_only={} aggregation={aggregation:?}",
        a.data.display(),
        a.state.as_ref().map_or_else(|| "-".into(), |p| p.display().to_string()),
        a.report.display(),
        a.frozen_only
    );
    let dataset = Dataset::open(&a.data)?;
    let state = a.state.as_ref().map(load_state).transpose()?;
    let decoder = match &state {
        Some(s) => Decoder::Personal(s),
        None => Decoder::FrozenOnly,
    };
    let report = evaluate(&dataset.test(), decoder, &dataset.manifest.personal_class_name, aggregation)?;
    report.write(&a.report)?;
    println!(
        "iou_per={:.4} miou={:.4} precision_per={:.4} recall_per={:.4}",
        report.iou_per, report.miou, report.precision_per, report.recall_per
    );
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    if !(a.eps.is_finite() && a.eps > 0.0) {
        return Err(usage("--eps", "must be a positive finite number"));
    }
    if a.tol.is_nan() || a.tol < 0.0 {
        return Err(usage("--tol", "must be nonnegative"));
    }
    if a.seeds == 0 {
        return Err(usage("--seeds", "must be at least 1"));
    }
    let mut failed = 0;
    for seed in a.seed..a.seed + a.seeds {
        let report = gradcheck(seed, a.eps, a.tol)?;
        println!("{report}");
        if !report.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(Error::Infeasible(format!(
            "{failed} gradient check(s) exceeded tolerance {:e}",
            a.tol
        ))));
    }
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<(), Failure> {
    let config = a.train.resolve()?;
    println!("ablate data={} out={}", a.data.display(), a.out.display());
    print_train_config(&config);
    let dataset = Dataset::open(&a.data)?;
    let rows = run_ablation(&dataset, &config)?;
    let table = ablation_tsv(&rows);
    write_text(&a.out, &table)?;
    print!("{table}");
    Ok(())
}

fn run_kshot_cmd(a: &KshotArgs) -> Result<(), Failure> {
    let config = a.train.resolve()?;
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(usage("--k", "must list positive shot counts"));
    }
    println!("kshot data={} k={:?} out={}", a.data.display(), a.k, a.out.display());
    print_train_config(&config);
    let dataset = Dataset::open(&a.data)?;
    let table = run_kshot(&dataset, &a.k, &config)?;
    let text = table.to_tsv();
    write_text(&a.out, &text)?;
    print!("{text}");
    Ok(())
}

fn run_concat_eval(a: &ConcatEvalArgs) -> Result<(), Failure> {
    println!(
        "concat-eval data={} state={} report={}",
        a.data.display(),
        a.state.display(),
        a.report.display()
    );
    let dataset = Dataset::open(&a.data)?;
    let state = load_state(&a.state)?;
    let report = concat_evaluate(&dataset, &state)?;
    report.write(&a.report)?;
    println!(
        "iou_per={:.4} miou={:.4} precision_per={:.4} recall_per={:.4}",
        report.iou_per, report.miou, report.precision_per, report.recall_per
    );
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Personalize(a) => run_personalize(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Kshot(a) => run_kshot_cmd(a),
        Command::ConcatEval(a) => run_concat_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
