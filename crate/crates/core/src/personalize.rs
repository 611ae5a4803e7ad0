//! K-shot personalization: initialization, masked visual embedding,
//! fixed-step gradient descent and state persistence.
//!
//! POVP state layout (little-endian):
//!
//! | field          | type                                   |
//! |----------------|----------------------------------------|
//! | magic          | `b"POVP"`                              |
//! | version        | `u8` (= 1)                             |
//! | flags          | `u8`, bit 0: visual, bit 1: negative   |
//! | D, N           | `u32` each                             |
//! | alpha          | `f64`                                  |
//! | k              | `u32`                                  |
//! | T_per          | `f64[D]`                               |
//! | W_Z, W_M       | `f64[N]` each                          |
//! | b_M            | `f64`                                  |
//! | F_per          | `f64[D]` if bit 0                      |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::{backward, flatten_params, with_params};
use crate::head::PersonalState;
use crate::losses::{LossBreakdown, LossWeights};
use crate::snapshot::{downsample_mask, FrozenSnapshot, GroundTruthMask, Reader};
use crate::tensor::norm;

pub const STATE_MAGIC: [u8; 4] = *b"POVP";
pub const STATE_VERSION: u8 = 1;
const FLAG_VISUAL: u8 = 0b01;
const FLAG_NEGATIVE: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub alpha: f64,
    pub weights: LossWeights,
    /// Recorded with the run. Training itself draws no random numbers.
    pub seed: u64,
    pub injection_enabled: bool,
    pub negative_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            iterations: 200,
            alpha: 0.1,
            weights: LossWeights::default(),
            seed: 0,
            injection_enabled: true,
            negative_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::AlphaOutOfRange(self.alpha));
        }
        if !self.weights.is_valid() {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Interpolation weight actually applied.
    pub fn effective_alpha(&self) -> f64 {
        if self.injection_enabled {
            self.alpha
        } else {
            0.0
        }
    }
}

/// Fresh state: `T_per` copied from `init_vector`, negative parameters at 0,
/// no visual embedding.
pub fn init_state(snapshot: &FrozenSnapshot, init_vector: &[f64], config: &TrainConfig) -> Result<PersonalState> {
    if init_vector.len() != snapshot.dim() {
        return Err(Error::dims("initial embedding", snapshot.dim(), init_vector.len()));
    }
    let n = snapshot.num_masks();
    Ok(PersonalState {
        text: init_vector.to_vec(),
        neg_embed_weights: vec![0.0; n],
        neg_mask_weights: vec![0.0; n],
        neg_mask_bias: 0.0,
        visual: None,
        alpha: 0.0,
        personal_index: snapshot.vocab_size(),
        negative_enabled: config.negative_enabled,
    })
}

/// Mean feature vector over the cells where the mask, downsampled to the
/// feature grid, is foreground.
pub fn masked_average(snapshot: &FrozenSnapshot, mask: &GroundTruthMask) -> Result<Vec<f64>> {
    let features = snapshot.features.as_ref().ok_or(Error::MissingFeatureMap)?;
    let cells = downsample_mask(mask, features.height, features.width)?;
    let count = cells.foreground();
    if count == 0 {
        return Err(Error::EmptyForeground);
    }
    let mut acc = vec![0.0; features.dim()];
    for q in (0..cells.len()).filter(|&q| cells.at(q)) {
        for (a, f) in acc.iter_mut().zip(features.data.row(q)) {
            *a += f;
        }
    }
    Ok(acc.into_iter().map(|a| a / count as f64).collect())
}

/// Averages the per-sample masked embeddings, then L2-normalizes and
/// rescales to the mean row norm of the first sample's text bank.
pub fn compute_visual_embedding(samples: &[(&FrozenSnapshot, &GroundTruthMask)]) -> Result<Vec<f64>> {
    let (first, _) = samples
        .first()
        .ok_or_else(|| Error::Config("no samples for visual embedding".into()))?;
    let mut mean = vec![0.0; first.dim()];
    for (snap, mask) in samples {
        let v = masked_average(snap, mask)?;
        if v.len() != mean.len() {
            return Err(Error::dims("feature dimension", mean.len(), v.len()));
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let k = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);

    let rows = first.vocab_size();
    if rows == 0 {
        return Err(Error::Config("empty text bank gives no target norm".into()));
    }
    let target = (0..rows).map(|r| norm(first.text.row(r))).sum::<f64>() / rows as f64;
    let len = norm(&mean);
    if len == 0.0 {
        return Err(Error::Config("masked visual embedding is the zero vector".into()));
    }
    Ok(mean.into_iter().map(|m| m / len * target).collect())
}

/// One supervised training example.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub snapshot: &'a FrozenSnapshot,
    pub mask: &'a GroundTruthMask,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: PersonalState,
    /// Loss of the sample visited at each step, before that step's update.
    pub trace: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn totals(&self) -> Vec<f64> {
        self.trace.iter().map(|l| l.total).collect()
    }
}

/// Plain gradient descent at batch size 1, cycling through `samples` in order.
pub fn run_personalization(
    samples: &[TrainSample<'_>],
    init_vector: &[f64],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("personalization needs at least one sample".into()))?;
    for s in samples {
        let (a, b) = (first.snapshot, s.snapshot);
        if a.vocab_size() != b.vocab_size() {
            return Err(Error::dims("vocabulary size", a.vocab_size(), b.vocab_size()));
        }
        if a.dim() != b.dim() {
            return Err(Error::dims("embedding dimension", a.dim(), b.dim()));
        }
        if a.num_masks() != b.num_masks() {
            return Err(Error::dims("mask proposal count", a.num_masks(), b.num_masks()));
        }
        if s.mask.len() != b.num_pixels() {
            return Err(Error::dims("ground-truth mask", b.num_pixels(), s.mask.len()));
        }
    }

    let mut state = init_state(first.snapshot, init_vector, config)?;
    if config.injection_enabled {
        let pairs: Vec<_> = samples.iter().map(|s| (s.snapshot, s.mask)).collect();
        state.visual = Some(compute_visual_embedding(&pairs)?);
        state.alpha = config.alpha;
    }

    let mut params = flatten_params(&state);
    let mut trace = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let sample = &samples[step % samples.len()];
        let current = with_params(&state, &params);
        let (loss, grads) = match backward(sample.snapshot, &current, sample.mask, &config.weights) {
            Ok(r) => r,
            Err(Error::NonFiniteStage { stage: "loss" }) => return Err(Error::NonFiniteLoss { step }),
            Err(e) => return Err(e),
        };
        for (p, g) in params.iter_mut().zip(grads.to_flat()) {
            *p -= config.learning_rate * g;
        }
        trace.push(loss);
    }
    state = with_params(&state, &params);
    Ok(TrainOutcome { state, trace })
}

pub fn state_to_bytes(state: &PersonalState) -> Result<Vec<u8>> {
    state.validate()?;
    let to_u32 = |x: usize| u32::try_from(x).map_err(|_| Error::Format(format!("dimension {x} exceeds u32")));
    let mut out = Vec::new();
    out.extend_from_slice(&STATE_MAGIC);
    out.push(STATE_VERSION);
    let mut flags = 0;
    if state.visual.is_some() {
        flags |= FLAG_VISUAL;
    }
    if state.negative_enabled {
        flags |= FLAG_NEGATIVE;
    }
    out.push(flags);
    out.extend_from_slice(&to_u32(state.dim())?.to_le_bytes());
    out.extend_from_slice(&to_u32(state.num_masks())?.to_le_bytes());
    out.extend_from_slice(&state.alpha.to_le_bytes());
    out.extend_from_slice(&to_u32(state.personal_index)?.to_le_bytes());
    let arrays = [
        state.text.as_slice(),
        &state.neg_embed_weights,
        &state.neg_mask_weights,
        std::slice::from_ref(&state.neg_mask_bias),
        state.visual.as_deref().unwrap_or(&[]),
    ];
    for (i, x) in arrays.iter().flat_map(|a| a.iter()).enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { field: "state", index: i });
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<PersonalState> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != STATE_MAGIC {
        return Err(Error::BadMagic {
            expected: STATE_MAGIC,
            found: magic,
        });
    }
    let version = r.u8("version")?;
    if version != STATE_VERSION {
        return Err(Error::UnsupportedVersion {
            expected: STATE_VERSION,
            found: version,
        });
    }
    let flags = r.u8("flags")?;
    if flags & !(FLAG_VISUAL | FLAG_NEGATIVE) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
    }
    let d = r.u32("header")? as usize;
    let n = r.u32("header")? as usize;
    let alpha = r.f64("alpha")?;
    let personal_index = r.u32("header")? as usize;
    let text = r.f64s(d, "personal embedding")?;
    let neg_embed_weights = r.f64s(n, "negative embedding weights")?;
    let neg_mask_weights = r.f64s(n, "negative mask weights")?;
    let neg_mask_bias = r.f64("negative mask bias")?;
    let visual = if flags & FLAG_VISUAL != 0 {
        Some(r.f64s(d, "visual embedding")?)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(Error::TrailingBytes { count: r.remaining() });
    }
    let all = text
        .iter()
        .chain(&neg_embed_weights)
        .chain(&neg_mask_weights)
        .chain(std::iter::once(&neg_mask_bias))
        .chain(visual.iter().flatten())
        .chain(std::iter::once(&alpha));
    if let Some(index) = all.clone().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { field: "state", index });
    }
    let state = PersonalState {
        text,
        neg_embed_weights,
        neg_mask_weights,
        neg_mask_bias,
        visual,
        alpha,
        personal_index,
        negative_enabled: flags & FLAG_NEGATIVE != 0,
    };
    state.validate()?;
    Ok(state)
}

pub fn save_state(state: &PersonalState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, state_to_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<PersonalState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    state_from_bytes(&bytes)
}

/// Two-column `step<TAB>total` text, steps numbered from 1.
pub fn write_trace(trace: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "step\ttotal").unwrap();
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{}\t{:?}", i + 1, l.total).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
