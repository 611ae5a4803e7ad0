//! Seeded synthetic benchmark: a snapshot generator whose same-class
//! distractors share the personal instance's class centroid, plus the
//! ablation, K-shot and concat harnesses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::head::PersonalState;
use crate::metrics::{evaluate, Aggregation, Decoder, MetricsReport};
use crate::personalize::{init_state, run_personalization, TrainConfig, TrainSample};
use crate::snapshot::{
    save_mask, save_snapshot, save_vector, BinaryMask, Dataset, FeatureMap, FrozenSnapshot, Polarity, Sample,
    Split, MANIFEST_FILE, PROMPT_FILE,
};
use crate::tensor::{norm, sigmoid, Matrix};

pub const META_FILE: &str = "meta.tsv";
pub const DIRECTIONS_FILE: &str = "directions.tsv";

const CLASS_NAMES: [&str; 8] = ["bird", "sky", "grass", "water", "tree", "rock", "sand", "snow"];
const STUFF_SHARPNESS: f64 = 0.6;
const CLUTTER_AMPLITUDE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Open-vocabulary size; class 0 is the personal instance's class, the rest are stuff.
    pub vocab: usize,
    pub dim: usize,
    pub proposals: usize,
    pub height: usize,
    pub width: usize,
    pub feat_height: usize,
    pub feat_width: usize,
    /// The personal instance plus same-class distractors.
    pub instances_per_class: usize,
    /// Weight of the instance direction in object embeddings.
    pub personal_offset: f64,
    pub noise: f64,
    /// Weight of the personal direction in the exported name embedding.
    pub name_offset: f64,
    /// Upper bound of the per-object share of surrounding stuff mixed into
    /// object embeddings.
    pub context_leak: f64,
    /// Steepness of the logistic falloff at object proposal edges.
    pub edge_sharpness: f64,
    /// Probability that an image also shows a second, distractor instance.
    pub extra_distractor_rate: f64,
    pub logit_scale: f64,
    pub k_train: usize,
    pub n_test_pos: usize,
    pub n_test_neg: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The bundled benchmark.
    fn default() -> Self {
        Self {
            vocab: 4,
            dim: 16,
            proposals: 12,
            height: 32,
            width: 32,
            feat_height: 8,
            feat_width: 8,
            instances_per_class: 3,
            personal_offset: 0.6,
            noise: 0.05,
            name_offset: 0.5,
            context_leak: 0.2,
            edge_sharpness: 8.0,
            extra_distractor_rate: 1.0,
            logit_scale: 4.0,
            k_train: 5,
            n_test_pos: 20,
            n_test_neg: 20,
            seed: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab < 2 {
            return bad(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.instances_per_class < 2 {
            return bad("instances_per_class must be at least 2 (personal plus a distractor)".into());
        }
        if self.dim < self.vocab + self.instances_per_class {
            return bad(format!(
                "dim {} cannot hold {} orthogonal class and instance directions",
                self.dim,
                self.vocab + self.instances_per_class
            ));
        }
        if self.height == 0 || self.width == 0 || self.feat_height == 0 || self.feat_width == 0 {
            return bad("image and feature extents must be positive".into());
        }
        if self.feat_height > self.height || self.feat_width > self.width {
            return bad("feature grid cannot be finer than the image".into());
        }
        for (name, v) in [
            ("personal_offset", self.personal_offset),
            ("noise", self.noise),
            ("name_offset", self.name_offset),
            ("edge_sharpness", self.edge_sharpness),
            ("context_leak", self.context_leak),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.extra_distractor_rate) {
            return bad(format!(
                "extra_distractor_rate must lie in [0, 1], got {}",
                self.extra_distractor_rate
            ));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::InvalidLogitScale(self.logit_scale));
        }
        if self.k_train == 0 {
            return bad("k_train must be at least 1".into());
        }
        if self.n_test_pos + self.n_test_neg == 0 {
            return bad("test split is empty".into());
        }
        let needed = self.instances_per_class + self.vocab - 1;
        if self.proposals < needed {
            return Err(Error::Infeasible(format!(
                "{} proposals cannot hold {} instance slots and {} stuff slots",
                self.proposals,
                self.instances_per_class,
                self.vocab - 1
            )));
        }
        Ok(())
    }

    fn stuff_slot(&self, class: usize) -> usize {
        self.instances_per_class + class - 1
    }
}

/// Global draws shared by every image.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub classes: Matrix,
    /// Row 0 is the personal instance's direction.
    pub instance_dirs: Matrix,
    pub prompt: Vec<f64>,
    pub names: Vec<String>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `count` orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if norm(&v) > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| (*s).to_owned())
}

pub fn personal_name() -> String {
    format!("my {}", class_name(0))
}

pub fn build_world(config: &SynthConfig) -> Result<SynthWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let basis = orthonormal(&mut rng, config.vocab + config.instances_per_class, config.dim);
    let classes = Matrix::from_rows(&basis[..config.vocab])?;
    let instance_dirs = Matrix::from_rows(&basis[config.vocab..])?;
    let mut prompt: Vec<f64> = classes
        .row(0)
        .iter()
        .zip(instance_dirs.row(0))
        .map(|(c, d)| c + config.name_offset * d)
        .collect();
    normalize(&mut prompt);
    Ok(SynthWorld {
        classes,
        instance_dirs,
        prompt,
        names: (0..config.vocab).map(class_name).collect(),
    })
}

/// Which object instance an image shows, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub index: usize,
    pub split: Split,
    pub polarity: Polarity,
}

/// One rendered image with its generator metadata.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub snapshot: FrozenSnapshot,
    pub gt: BinaryMask,
    /// Proposal slot holding the personal instance.
    pub personal_proposal: Option<usize>,
    /// Object instances shown, in proposal order; instance 0 is personal.
    pub instances: Vec<usize>,
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (h, w) = (h as f64, w as f64);
        Self {
            cy: rng.random_range(0.35..0.65) * h,
            cx: rng.random_range(0.35..0.65) * w,
            ry: rng.random_range(0.18..0.3) * h,
            rx: rng.random_range(0.18..0.3) * w,
        }
    }

    /// Non-overlapping placements: one large central blob, or two smaller
    /// blobs on either side of a random axis.
    fn place(rng: &mut ChaCha8Rng, count: usize, h: usize, w: usize) -> Vec<Blob> {
        if count == 1 {
            return vec![Blob::random(rng, h, w)];
        }
        let (hf, wf) = (h as f64, w as f64);
        let vertical = rng.random_bool(0.5);
        (0..count)
            .map(|i| {
                let along = (i as f64 + 0.5) / count as f64 + rng.random_range(-0.03..0.03);
                let across = rng.random_range(0.4..0.6);
                let (fy, fx) = if vertical { (along, across) } else { (across, along) };
                let r = 0.4 / count as f64;
                Blob {
                    cy: fy * hf,
                    cx: fx * wf,
                    ry: rng.random_range(0.7 * r..r) * hf,
                    rx: rng.random_range(0.7 * r..r) * wf,
                }
            })
            .collect()
    }

    fn radius(&self, y: usize, x: usize) -> f64 {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        (dy * dy + dx * dx).sqrt()
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn render_image(config: &SynthConfig, world: &SynthWorld, spec: ImageSpec) -> Result<SynthImage> {
    let mut rng = image_rng(config.seed, spec.index);
    let (h, w, n, d) = (config.height, config.width, config.proposals, config.dim);
    let pixels = h * w;
    let noise_scale = config.noise / (d as f64).sqrt();
    let noisy = |base: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        base.iter().map(|b| b + noise_scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let distractors: Vec<usize> = (1..config.instances_per_class).collect();
    let mut objects = match spec.polarity {
        Polarity::Positive => vec![0],
        Polarity::Negative => vec![distractors[rng.random_range(0..distractors.len())]],
    };
    if rng.random_bool(config.extra_distractor_rate) {
        let free: Vec<usize> = distractors.iter().copied().filter(|i| !objects.contains(i)).collect();
        if !free.is_empty() {
            objects.push(free[rng.random_range(0..free.len())]);
        }
    }
    let blobs = Blob::place(&mut rng, objects.len(), h, w);
    let stuff: Vec<usize> = if config.vocab > 2 {
        sample_indices(&mut rng, config.vocab - 1, 2).into_iter().map(|c| c + 1).collect()
    } else {
        vec![1]
    };

    let mut masks = Matrix::zeros(pixels, n);
    let mut embed = Matrix::zeros(n, d);
    for slot in 0..n {
        let z = noisy(&vec![0.0; d], &mut rng);
        embed.row_mut(slot).copy_from_slice(&z);
    }
    let mut soft = vec![0.0; pixels];
    for (&instance, blob) in objects.iter().zip(&blobs) {
        // Object embeddings absorb a random share of one surrounding stuff class.
        let context = world.classes.row(stuff[rng.random_range(0..stuff.len())]);
        let leak = rng.random_range(0.0..=config.context_leak);
        let object: Vec<f64> = world
            .classes
            .row(0)
            .iter()
            .zip(world.instance_dirs.row(instance))
            .zip(context)
            .map(|((c, u), s)| c + config.personal_offset * u + leak * s)
            .collect();
        let z = noisy(&object, &mut rng);
        embed.row_mut(instance).copy_from_slice(&z);
        for (p, s) in soft.iter_mut().enumerate() {
            let b = sigmoid(config.edge_sharpness * (1.0 - blob.radius(p / w, p % w)));
            masks.set(p, instance, b);
            *s = (*s + b).min(1.0);
        }
    }
    let gt = if objects[0] == 0 {
        BinaryMask::from_fn(h, w, |y, x| blobs[0].radius(y, x) <= 1.0)
    } else {
        BinaryMask::zeros(h, w)
    };

    // Two stuff regions split by a soft random line.
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (oy, ox) = (rng.random_range(0.3..0.7) * h as f64, rng.random_range(0.3..0.7) * w as f64);
    for &c in &stuff {
        let z = noisy(world.classes.row(c), &mut rng);
        embed.row_mut(config.stuff_slot(c)).copy_from_slice(&z);
    }
    for p in 0..pixels {
        let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
        let side = sigmoid(STUFF_SHARPNESS * ((y - oy) * theta.sin() + (x - ox) * theta.cos()));
        let rest = 1.0 - soft[p];
        if stuff.len() == 2 {
            masks.set(p, config.stuff_slot(stuff[0]), side * rest);
            masks.set(p, config.stuff_slot(stuff[1]), (1.0 - side) * rest);
        } else {
            masks.set(p, config.stuff_slot(stuff[0]), rest);
        }
    }

    // Faint clutter proposals with random embeddings.
    for slot in config.instances_per_class + config.vocab - 1..n {
        // Only the personal proposal may carry the personal direction.
        let mut dir = gaussian(&mut rng, d);
        let u = world.instance_dirs.row(0);
        let along: f64 = dir.iter().zip(u).map(|(a, b)| a * b).sum();
        dir.iter_mut().zip(u).for_each(|(a, b)| *a -= along * b);
        normalize(&mut dir);
        embed.row_mut(slot).copy_from_slice(&dir);
        let amp = rng.random_range(0.0..CLUTTER_AMPLITUDE);
        let c = Blob::random(&mut rng, h, w);
        for p in 0..pixels {
            masks.set(p, slot, amp * sigmoid(config.edge_sharpness * (1.0 - c.radius(p / w, p % w))));
        }
    }

    let features = render_features(config, &masks, &embed, &mut rng);
    let mut snapshot = FrozenSnapshot {
        text: world.classes.clone(),
        mask_embed: embed,
        masks,
        height: h,
        width: w,
        logit_scale: config.logit_scale,
        vocab_names: world.names.clone(),
        features: Some(features),
    };
    snapshot.quantize();
    snapshot.validate()?;
    Ok(SynthImage {
        snapshot,
        gt,
        personal_proposal: (objects[0] == 0).then_some(0),
        instances: objects,
    })
}

/// Each feature cell is the area-averaged mask-weighted embedding plus noise.
fn render_features(config: &SynthConfig, masks: &Matrix, embed: &Matrix, rng: &mut ChaCha8Rng) -> FeatureMap {
    let (h, w, fh, fw, d) = (config.height, config.width, config.feat_height, config.feat_width, config.dim);
    let noise_scale = config.noise / (d as f64).sqrt();
    let mut data = Matrix::zeros(fh * fw, d);
    for cy in 0..fh {
        for cx in 0..fw {
            let (y0, y1) = (cy * h / fh, (cy + 1) * h / fh);
            let (x0, x1) = (cx * w / fw, (cx + 1) * w / fw);
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            let cell = data.row_mut(cy * fw + cx);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    for (slot, m) in masks.row(p).iter().enumerate() {
                        if *m != 0.0 {
                            for (c, z) in cell.iter_mut().zip(embed.row(slot)) {
                                *c += m * z / area;
                            }
                        }
                    }
                }
            }
            for c in cell.iter_mut() {
                *c += noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    FeatureMap {
        height: fh,
        width: fw,
        data,
    }
}

/// Image order: training positives, then alternating test positives and negatives.
pub fn image_specs(config: &SynthConfig) -> Vec<ImageSpec> {
    let mut specs = Vec::new();
    for _ in 0..config.k_train {
        specs.push((Split::Train, Polarity::Positive));
    }
    let (mut pos, mut neg) = (0, 0);
    while pos < config.n_test_pos || neg < config.n_test_neg {
        if pos < config.n_test_pos {
            specs.push((Split::Test, Polarity::Positive));
            pos += 1;
        }
        if neg < config.n_test_neg {
            specs.push((Split::Test, Polarity::Negative));
            neg += 1;
        }
    }
    specs
        .into_iter()
        .enumerate()
        .map(|(index, (split, polarity))| ImageSpec { index, split, polarity })
        .collect()
}

fn file_stem(spec: &ImageSpec) -> String {
    let split = match spec.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let pol = match spec.polarity {
        Polarity::Positive => "pos",
        Polarity::Negative => "neg",
    };
    format!("{:04}_{split}_{pol}", spec.index)
}

/// Writes a dataset directory; the result is a pure function of `config`.
pub fn generate(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let world = build_world(config)?;
    for sub in ["snapshots", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let name = personal_name();
    let mut manifest = String::new();
    let mut meta = String::from("snapshot\tpersonal_proposal\tinstances\n");
    for spec in image_specs(config) {
        let image = render_image(config, &world, spec)?;
        let stem = file_stem(&spec);
        let snap_rel = format!("snapshots/{stem}.povs");
        save_snapshot(&image.snapshot, dir.join(&snap_rel))?;
        let mask_rel = if spec.polarity == Polarity::Positive {
            let rel = format!("masks/{stem}.mask");
            save_mask(&image.gt, dir.join(&rel))?;
            rel
        } else {
            "-".to_owned()
        };
        let split = if spec.split == Split::Train { "train" } else { "test" };
        let pol = if spec.polarity == Polarity::Positive {
            "positive"
        } else {
            "negative"
        };
        writeln!(manifest, "{snap_rel}\t{mask_rel}\t{split}\t{pol}\t{name}").unwrap();
        let proposal = image.personal_proposal.map_or_else(|| "-".to_owned(), |p| p.to_string());
        let shown: Vec<String> = image.instances.iter().map(|i| i.to_string()).collect();
        writeln!(meta, "{snap_rel}\t{proposal}\t{}", shown.join(",")).unwrap();
    }
    let mut dirs = String::new();
    for i in 0..world.instance_dirs.rows() {
        let row: Vec<String> = world.instance_dirs.row(i).iter().map(|x| format!("{x:?}")).collect();
        writeln!(dirs, "{i}\t{}", row.join("\t")).unwrap();
    }
    for (file, text) in [(MANIFEST_FILE, manifest), (META_FILE, meta), (DIRECTIONS_FILE, dirs)] {
        let p = dir.join(file);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    save_vector(&world.prompt, dir.join(PROMPT_FILE))
}

/// Horizontal concatenation of a positive and a negative sample. The
/// proposal bank is doubled: left-image proposals first, each bank zero
/// outside its own half.
pub fn concat(pos: &Sample, neg: &Sample) -> Result<Sample> {
    let (a, b) = (&pos.snapshot, &neg.snapshot);
    if a.height != b.height {
        return Err(Error::dims("concat height", a.height, b.height));
    }
    if a.width != b.width {
        return Err(Error::dims("concat width", a.width, b.width));
    }
    if a.num_masks() != b.num_masks() {
        return Err(Error::dims("concat proposal count", a.num_masks(), b.num_masks()));
    }
    if a.text != b.text || a.vocab_names != b.vocab_names {
        return Err(Error::Format("concat needs identical text banks".into()));
    }
    let (h, w, n) = (a.height, a.width, a.num_masks());
    let mut masks = Matrix::zeros(h * 2 * w, 2 * n);
    for y in 0..h {
        for x in 0..w {
            let src = y * w + x;
            masks.row_mut(y * 2 * w + x)[..n].copy_from_slice(a.masks.row(src));
            masks.row_mut(y * 2 * w + w + x)[n..].copy_from_slice(b.masks.row(src));
        }
    }
    let mut mask_embed = a.mask_embed.clone();
    for r in 0..n {
        mask_embed.push_row(b.mask_embed.row(r))?;
    }
    let features = match (&a.features, &b.features) {
        (Some(fa), Some(fb)) if fa.height == fb.height && fa.width == fb.width => {
            let (fh, fw) = (fa.height, fa.width);
            let mut data = Matrix::zeros(fh * 2 * fw, fa.dim());
            for y in 0..fh {
                for x in 0..fw {
                    data.row_mut(y * 2 * fw + x).copy_from_slice(fa.data.row(y * fw + x));
                    data.row_mut(y * 2 * fw + fw + x).copy_from_slice(fb.data.row(y * fw + x));
                }
            }
            Some(FeatureMap {
                height: fh,
                width: 2 * fw,
                data,
            })
        }
        _ => None,
    };
    let gt = pos.mask.as_ref().map(|m| {
        BinaryMask::from_fn(h, 2 * w, |y, x| x < w && m.get(y, x))
    });
    Ok(Sample {
        snapshot: FrozenSnapshot {
            text: a.text.clone(),
            mask_embed,
            masks,
            height: h,
            width: 2 * w,
            logit_scale: a.logit_scale,
            vocab_names: a.vocab_names.clone(),
            features,
        },
        mask: gt,
        split: pos.split,
        polarity: Polarity::Positive,
    })
}

/// Pairs the i-th test positive with the i-th test negative.
pub fn concat_test_set(dataset: &Dataset) -> Result<Vec<Sample>> {
    let test = dataset.test();
    let pos: Vec<_> = test.iter().filter(|s| s.polarity == Polarity::Positive).collect();
    let neg: Vec<_> = test.iter().filter(|s| s.polarity == Polarity::Negative).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config("concat evaluation needs test positives and negatives".into()));
    }
    pos.iter().zip(&neg).map(|(p, n)| concat(p, n)).collect()
}

pub fn concat_evaluate(dataset: &Dataset, state: &PersonalState) -> Result<MetricsReport> {
    let samples = concat_test_set(dataset)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let tiled = state.tiled(2);
    evaluate(&refs, Decoder::Personal(&tiled), &dataset.manifest.personal_class_name, Aggregation::Dataset)
}

/// The first `k` training samples in manifest order.
pub fn train_samples(dataset: &Dataset, k: usize) -> Result<Vec<TrainSample<'_>>> {
    let train = dataset.train();
    if train.len() < k {
        return Err(Error::Config(format!(
            "{k} training samples requested, dataset has {}",
            train.len()
        )));
    }
    train[..k]
        .iter()
        .map(|s| {
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::Config("training sample without mask".into()))?;
            Ok(TrainSample {
                snapshot: &s.snapshot,
                mask,
            })
        })
        .collect()
}

/// Trains on the first `k` training samples of `dataset`.
pub fn personalize_dataset(dataset: &Dataset, k: usize, config: &TrainConfig) -> Result<PersonalState> {
    let samples = train_samples(dataset, k)?;
    Ok(run_personalization(&samples, &dataset.init_vector()?, config)?.state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub text_prompt: bool,
    pub neg_mask: bool,
    pub visual_inject: bool,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::new(false, false, false),
        AblationRow::new(true, false, false),
        AblationRow::new(true, true, false),
        AblationRow::new(true, false, true),
        AblationRow::new(true, true, true),
    ];

    const fn new(text_prompt: bool, neg_mask: bool, visual_inject: bool) -> Self {
        Self {
            text_prompt,
            neg_mask,
            visual_inject,
        }
    }

    /// Training config for this row derived from the full-method `base`.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = *base;
        c.negative_enabled = self.neg_mask;
        c.injection_enabled = self.visual_inject;
        if !self.neg_mask {
            c.weights.neg_z = 0.0;
            c.weights.neg_m = 0.0;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub miou: f64,
    pub iou_per: f64,
    pub precision_per: f64,
    pub recall_per: f64,
}

fn mark(b: bool) -> &'static str {
    if b {
        "y"
    } else {
        "-"
    }
}

pub fn ablation_tsv(rows: &[AblationResult]) -> String {
    let mut s = String::from("text_prompt\tneg_mask\tvisual_inject\tmiou\tiou_per\tprecision_per\trecall_per\n");
    for r in rows {
        writeln!(
            s,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            mark(r.row.text_prompt),
            mark(r.row.neg_mask),
            mark(r.row.visual_inject),
            r.miou,
            r.iou_per,
            r.precision_per,
            r.recall_per
        )
        .unwrap();
    }
    s
}

/// The five ablation rows. The first row evaluates the untrained name
/// embedding as the personal entry.
pub fn run_ablation(dataset: &Dataset, base: &TrainConfig) -> Result<Vec<AblationResult>> {
    let k = dataset.train().len();
    let test = dataset.test();
    let name = &dataset.manifest.personal_class_name;
    let init = dataset.init_vector()?;
    let first = &dataset
        .samples
        .first()
        .ok_or_else(|| Error::Config("dataset has no samples".into()))?
        .snapshot;
    AblationRow::ALL
        .iter()
        .map(|row| {
            let config = row.config(base);
            let state = if row.text_prompt {
                personalize_dataset(dataset, k, &config)?
            } else {
                init_state(first, &init, &config)?
            };
            let report = evaluate(&test, Decoder::Personal(&state), name, Aggregation::Dataset)?;
            Ok(AblationResult {
                row: *row,
                miou: report.miou,
                iou_per: report.iou_per,
                precision_per: report.precision_per,
                recall_per: report.recall_per,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KShotTable {
    pub rows: Vec<(usize, f64, f64)>,
    pub avg_iou_per: f64,
    pub avg_miou: f64,
}

impl KShotTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("k\tiou_per\tmiou\n");
        for (k, iou, miou) in &self.rows {
            writeln!(s, "{k}\t{iou:.6}\t{miou:.6}").unwrap();
        }
        writeln!(s, "Avg.\t{:.6}\t{:.6}", self.avg_iou_per, self.avg_miou).unwrap();
        s
    }
}

pub fn run_kshot(dataset: &Dataset, ks: &[usize], config: &TrainConfig) -> Result<KShotTable> {
    if ks.is_empty() {
        return Err(Error::Config("no K values given".into()));
    }
    let test = dataset.test();
    let name = &dataset.manifest.personal_class_name;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let state = personalize_dataset(dataset, k, config)?;
        let report = evaluate(&test, Decoder::Personal(&state), name, Aggregation::Dataset)?;
        rows.push((k, report.iou_per, report.miou));
    }
    let n = rows.len() as f64;
    Ok(KShotTable {
        avg_iou_per: rows.iter().map(|r| r.1).sum::<f64>() / n,
        avg_miou: rows.iter().map(|r| r.2).sum::<f64>() / n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            height: 16,
            width: 16,
            feat_height: 4,
            feat_width: 4,
            k_train: 2,
            n_test_pos: 2,
            n_test_neg: 2,
            ..SynthConfig::default()
        }
    }

    fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "snapshots", "masks"] {
            let mut entries: Vec<_> = fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&small(), a.path()).unwrap();
        generate(&small(), b.path()).unwrap();
        assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(b.path()));

        let c = tempfile::tempdir().unwrap();
        generate(&SynthConfig { seed: 8, ..small() }, c.path()).unwrap();
        assert_ne!(read_dir_bytes(a.path()), read_dir_bytes(c.path()));
    }

    #[test]
    fn generated_dataset_is_balanced_and_valid() {
        let dir = tempfile::tempdir().unwrap();
        generate(&small(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.train().len(), 2);
        let test = ds.test();
        let pos = test.iter().filter(|s| s.polarity == Polarity::Positive).count();
        assert_eq!(pos, 2);
        assert_eq!(test.len() - pos, 2);
        for s in &ds.samples {
            assert!(s.snapshot.masks.as_slice().iter().all(|m| (0.0..=1.0).contains(m)));
        }
        assert_eq!(ds.manifest.personal_class_name, "my bird");
        assert_eq!(ds.init_vector().unwrap().len(), 16);
    }

    #[test]
    fn personal_direction_only_in_positives() {
        let config = small();
        let world = build_world(&config).unwrap();
        let dir0 = world.instance_dirs.row(0);
        for spec in image_specs(&config) {
            let img = render_image(&config, &world, spec).unwrap();
            let carrying: Vec<usize> = (0..config.proposals)
                .filter(|&n| {
                    let z = img.snapshot.mask_embed.row(n);
                    z.iter().zip(dir0).map(|(a, b)| a * b).sum::<f64>() > config.personal_offset / 2.0
                })
                .collect();
            match spec.polarity {
                Polarity::Positive => {
                    assert_eq!(carrying, vec![0]);
                    assert_eq!(img.personal_proposal, Some(0));
                }
                Polarity::Negative => {
                    assert!(carrying.is_empty());
                    assert_eq!(img.personal_proposal, None);
                }
            }
        }
    }

    #[test]
    fn infeasible_config_rejected() {
        let config = SynthConfig {
            proposals: 4,
            ..small()
        };
        assert!(matches!(config.validate(), Err(Error::Infeasible(_))));
        assert!(SynthConfig { vocab: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn degenerate_config_cannot_separate_instances() {
        let config = SynthConfig {
            personal_offset: 0.0,
            noise: 0.0,
            context_leak: 0.0,
            ..small()
        };
        let world = build_world(&config).unwrap();
        let specs = image_specs(&config);
        let pos = specs.iter().find(|s| s.polarity == Polarity::Positive).unwrap();
        let neg = specs.iter().find(|s| s.polarity == Polarity::Negative).unwrap();
        let a = render_image(&config, &world, *pos).unwrap();
        let b = render_image(&config, &world, *neg).unwrap();
        let (ia, ib) = (a.instances[0], b.instances[0]);
        assert_eq!(a.snapshot.mask_embed.row(ia), b.snapshot.mask_embed.row(ib));
    }

    #[test]
    fn concat_shapes_and_areas() {
        let dir = tempfile::tempdir().unwrap();
        generate(&small(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let test = ds.test();
        let pos = test.iter().find(|s| s.polarity == Polarity::Positive).unwrap();
        let neg = test.iter().find(|s| s.polarity == Polarity::Negative).unwrap();

        let same = concat(pos, pos).unwrap();
        assert_eq!(same.snapshot.width, 32);
        assert_eq!(same.snapshot.num_masks(), 24);
        assert_eq!(same.snapshot.mask_embed.row(3), same.snapshot.mask_embed.row(15));
        same.snapshot.validate().unwrap();

        let c = concat(pos, neg).unwrap();
        assert_eq!(c.mask.as_ref().unwrap().foreground(), pos.mask.as_ref().unwrap().foreground());
        let total = |m: &Matrix| m.as_slice().iter().sum::<f64>();
        let want = total(&pos.snapshot.masks) + total(&neg.snapshot.masks);
        assert!((total(&c.snapshot.masks) - want).abs() < 1e-9);

        let mut tall = (*neg).clone();
        tall.snapshot.height = 8;
        assert!(concat(pos, &tall).is_err());
    }

    #[test]
    fn kshot_rejects_too_many() {
        let dir = tempfile::tempdir().unwrap();
        generate(&small(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(run_kshot(&ds, &[3], &TrainConfig::default()).is_err());
        let one = train_samples(&ds, 1).unwrap();
        assert!(std::ptr::eq(one[0].snapshot, &ds.train()[0].snapshot));
    }
}
