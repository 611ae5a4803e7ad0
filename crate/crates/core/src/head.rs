//! Forward pass of the segmentation head with the personal text entry and
//! the negative mask proposal appended.
//!
//! Shapes: `T` is `(V+1) x D`, `Z` is `(N+1) x D`, `S = tau * T Z^T` and its
//! column softmax `C` are `(V+1) x (N+1)`, masks `M` are `pixels x (N+1)`,
//! and the prediction `P = M C^T` is `pixels x (V+1)`. The personal entry
//! is row `V`; the negative proposal is column/channel `N`. When the
//! negative proposal is disabled the extra column and channel are absent.

use crate::error::{Error, Result};
use crate::snapshot::FrozenSnapshot;
use crate::tensor::{dot, sigmoid, Matrix};

/// Denominator below which a pixel falls back to the uniform distribution.
pub const COVERAGE_EPS: f64 = 1e-12;

/// Trainable and frozen parameters produced by personalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalState {
    /// Learnable personal text embedding.
    pub text: Vec<f64>,
    /// Combination weights over mask embeddings for the negative embedding.
    pub neg_embed_weights: Vec<f64>,
    /// 1x1 combination weights over proposal channels for the negative mask.
    pub neg_mask_weights: Vec<f64>,
    pub neg_mask_bias: f64,
    /// Frozen masked visual embedding; present iff injection is enabled.
    pub visual: Option<Vec<f64>>,
    pub alpha: f64,
    /// Row index of the personal entry (= V of the target vocabulary).
    pub personal_index: usize,
    pub negative_enabled: bool,
}

impl PersonalState {
    pub fn dim(&self) -> usize {
        self.text.len()
    }

    pub fn num_masks(&self) -> usize {
        self.neg_embed_weights.len()
    }

    /// Number of trainable scalars: `D + 2N + 1`.
    pub fn param_count(&self) -> usize {
        self.dim() + 2 * self.num_masks() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let n = self.num_masks();
        if self.neg_mask_weights.len() != n {
            return Err(Error::dims("negative mask weights", n, self.neg_mask_weights.len()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::AlphaOutOfRange(self.alpha));
        }
        match &self.visual {
            Some(v) if v.len() != d => return Err(Error::dims("visual embedding", d, v.len())),
            None if self.alpha != 0.0 => return Err(Error::MissingVisualEmbedding(self.alpha)),
            _ => {}
        }
        Ok(())
    }

    /// Checks that the state can be applied to `snapshot`.
    pub fn validate_for(&self, snapshot: &FrozenSnapshot) -> Result<()> {
        self.validate()?;
        if self.dim() != snapshot.dim() {
            return Err(Error::dims("embedding dimension", snapshot.dim(), self.dim()));
        }
        if self.num_masks() != snapshot.num_masks() {
            return Err(Error::dims("mask proposal count", snapshot.num_masks(), self.num_masks()));
        }
        if self.personal_index != snapshot.vocab_size() {
            return Err(Error::dims("personal index", snapshot.vocab_size(), self.personal_index));
        }
        Ok(())
    }

    /// Repeats the proposal-channel weights `factor` times, for snapshots
    /// whose proposal bank is `factor` disjoint copies of the trained layout.
    /// Mask weights are tiled; embedding weights are tiled and divided by
    /// `factor` so the negative embedding stays the mean of per-part
    /// combinations.
    pub fn tiled(&self, factor: usize) -> PersonalState {
        let tile = |w: &[f64], scale: f64| -> Vec<f64> {
            (0..factor).flat_map(|_| w.iter().map(move |x| x * scale)).collect()
        };
        PersonalState {
            neg_embed_weights: tile(&self.neg_embed_weights, 1.0 / factor as f64),
            neg_mask_weights: tile(&self.neg_mask_weights, 1.0),
            ..self.clone()
        }
    }
}

/// `alpha * F_per + (1 - alpha) * T_per`; returns `T_per` unchanged when no
/// visual embedding is supplied (alpha must then be 0).
pub fn effective_embedding(text: &[f64], visual: Option<&[f64]>, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    match visual {
        None if alpha != 0.0 => Err(Error::MissingVisualEmbedding(alpha)),
        None => Ok(text.to_vec()),
        Some(f) if f.len() != text.len() => Err(Error::dims("visual embedding", text.len(), f.len())),
        Some(f) => Ok(f
            .iter()
            .zip(text)
            .map(|(fv, tv)| alpha * fv + (1.0 - alpha) * tv)
            .collect()),
    }
}

/// Text bank with the personal entry appended as its last row.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedText {
    pub matrix: Matrix,
    pub personal_index: usize,
}

impl AugmentedText {
    /// A bank carries exactly one personal entry.
    pub fn augment(&self, _t_eff: &[f64]) -> Result<AugmentedText> {
        Err(Error::AlreadyAugmented)
    }
}

pub fn augment_text(text_open: &Matrix, t_eff: &[f64]) -> Result<AugmentedText> {
    if t_eff.len() != text_open.cols() {
        return Err(Error::dims("personal embedding", text_open.cols(), t_eff.len()));
    }
    let mut matrix = text_open.clone();
    matrix.push_row(t_eff)?;
    Ok(AugmentedText {
        personal_index: text_open.rows(),
        matrix,
    })
}

/// `W_Z Z_open`: a weighted sum of mask-embedding rows.
pub fn negative_embedding(mask_embed: &Matrix, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != mask_embed.rows() {
        return Err(Error::dims("negative embedding weights", mask_embed.rows(), weights.len()));
    }
    let mut out = vec![0.0; mask_embed.cols()];
    for (n, &w) in weights.iter().enumerate() {
        for (o, z) in out.iter_mut().zip(mask_embed.row(n)) {
            *o += w * z;
        }
    }
    Ok(out)
}

/// Pre-activation of the negative mask: `sum_n W_M[n] M_open(p, n) + b_M`.
pub fn negative_mask_logits(masks: &Matrix, weights: &[f64], bias: f64) -> Result<Vec<f64>> {
    if weights.len() != masks.cols() {
        return Err(Error::dims("negative mask weights", masks.cols(), weights.len()));
    }
    Ok((0..masks.rows()).map(|p| dot(masks.row(p), weights) + bias).collect())
}

/// `sigmoid(sum_n W_M[n] M_open(p, n) + b_M)` per pixel.
pub fn negative_mask(masks: &Matrix, weights: &[f64], bias: f64) -> Result<Vec<f64>> {
    Ok(negative_mask_logits(masks, weights, bias)?
        .into_iter()
        .map(sigmoid)
        .collect())
}

/// `S = tau * (T Z^T)`.
pub fn similarity(text: &Matrix, mask_embed: &Matrix, logit_scale: f64) -> Result<Matrix> {
    if text.cols() != mask_embed.cols() {
        return Err(Error::dims("similarity inner dimension", text.cols(), mask_embed.cols()));
    }
    let mut s = Matrix::zeros(text.rows(), mask_embed.rows());
    for v in 0..text.rows() {
        for n in 0..mask_embed.rows() {
            s.set(v, n, logit_scale * dot(text.row(v), mask_embed.row(n)));
        }
    }
    Ok(s)
}

/// Softmax down each column, with max subtraction.
pub fn class_probs(sim: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(sim.rows(), sim.cols());
    for n in 0..sim.cols() {
        let max = (0..sim.rows()).map(|v| sim.get(v, n)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in 0..sim.rows() {
            let e = (sim.get(v, n) - max).exp();
            c.set(v, n, e);
            total += e;
        }
        for v in 0..sim.rows() {
            c.set(v, n, c.get(v, n) / total);
        }
    }
    c
}

/// Composed prediction `P = M C^T`, its per-pixel mass and the
/// per-pixel normalized distribution `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Matrix,
    pub coverage: Vec<f64>,
    pub dist: Matrix,
}

pub fn predict(masks: &Matrix, probs: &Matrix) -> Result<Prediction> {
    if masks.cols() != probs.cols() {
        return Err(Error::dims("mask channels vs class columns", probs.cols(), masks.cols()));
    }
    let classes = probs.rows();
    let mut scores = Matrix::zeros(masks.rows(), classes);
    let mut dist = Matrix::zeros(masks.rows(), classes);
    let mut coverage = Vec::with_capacity(masks.rows());
    for p in 0..masks.rows() {
        let m = masks.row(p);
        let mut total = 0.0;
        for v in 0..classes {
            let pv = dot(m, probs.row(v));
            scores.set(p, v, pv);
            total += pv;
        }
        coverage.push(total);
        for v in 0..classes {
            let q = if total > COVERAGE_EPS {
                scores.get(p, v) / total
            } else {
                1.0 / classes as f64
            };
            dist.set(p, v, q);
        }
    }
    Ok(Prediction {
        scores,
        coverage,
        dist,
    })
}

/// Per-pixel class decisions at proposal-grid resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dims("label map cells", height * width, labels.len()));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }
}

/// Argmax per row of `dist`; the smallest index wins ties.
pub fn label_map(dist: &Matrix, height: usize, width: usize) -> Result<LabelMap> {
    let labels = (0..dist.rows())
        .map(|p| {
            let row = dist.row(p);
            let mut best = 0;
            for (v, &q) in row.iter().enumerate().skip(1) {
                if q > row[best] {
                    best = v;
                }
            }
            best
        })
        .collect();
    LabelMap::new(height, width, labels)
}

/// Every intermediate of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub t_eff: Vec<f64>,
    pub text: AugmentedText,
    /// `W_Z Z_open` when the negative proposal is enabled.
    pub neg_embed: Option<Vec<f64>>,
    pub mask_embed: Matrix,
    pub sim: Matrix,
    pub probs: Matrix,
    /// Negative-mask probabilities per pixel.
    pub neg_mask: Option<Vec<f64>>,
    pub masks: Matrix,
    pub pred: Prediction,
    pub height: usize,
    pub width: usize,
    /// Number of frozen proposals `N`.
    pub open_masks: usize,
    pub logit_scale: f64,
}

impl ForwardCache {
    pub fn personal_index(&self) -> usize {
        self.text.personal_index
    }

    /// Column/channel of the negative proposal, if enabled.
    pub fn neg_index(&self) -> Option<usize> {
        self.neg_mask.as_ref().map(|_| self.open_masks)
    }

    pub fn labels(&self) -> LabelMap {
        label_map(&self.pred.dist, self.height, self.width).expect("cache shapes are consistent")
    }

    /// Composes using only the frozen `V x N` similarity block and the
    /// first `N` mask channels.
    pub fn restrict_to_frozen(&self) -> Prediction {
        let v = self.personal_index();
        let probs = class_probs(&self.sim.block(v, self.open_masks));
        let masks = self.masks.block(self.masks.rows(), self.open_masks);
        predict(&masks, &probs).expect("block shapes agree")
    }
}

fn finite(stage: &'static str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFiniteStage { stage })
    }
}

/// Runs the head on one snapshot with the personal state applied.
pub fn forward(snapshot: &FrozenSnapshot, state: &PersonalState) -> Result<ForwardCache> {
    state.validate_for(snapshot)?;
    let t_eff = effective_embedding(&state.text, state.visual.as_deref(), state.alpha)?;
    finite("effective_embedding", t_eff.iter().all(|x| x.is_finite()))?;
    let text = augment_text(&snapshot.text, &t_eff)?;

    let mut mask_embed = snapshot.mask_embed.clone();
    let mut masks = snapshot.masks.clone();
    let (neg_embed, neg_mask) = if state.negative_enabled {
        let z = negative_embedding(&snapshot.mask_embed, &state.neg_embed_weights)?;
        finite("negative_embedding", z.iter().all(|x| x.is_finite()))?;
        mask_embed.push_row(&z)?;
        let m = negative_mask(&snapshot.masks, &state.neg_mask_weights, state.neg_mask_bias)?;
        finite("negative_mask", m.iter().all(|x| x.is_finite()))?;
        masks = append_channel(&snapshot.masks, &m);
        (Some(z), Some(m))
    } else {
        (None, None)
    };

    let sim = similarity(&text.matrix, &mask_embed, snapshot.logit_scale)?;
    finite("similarity", sim.all_finite())?;
    let probs = class_probs(&sim);
    finite("class_probs", probs.all_finite())?;
    let pred = predict(&masks, &probs)?;
    finite("prediction", pred.dist.all_finite() && pred.scores.all_finite())?;

    Ok(ForwardCache {
        t_eff,
        text,
        neg_embed,
        mask_embed,
        sim,
        probs,
        neg_mask,
        masks,
        pred,
        height: snapshot.height,
        width: snapshot.width,
        open_masks: snapshot.num_masks(),
        logit_scale: snapshot.logit_scale,
    })
}

/// The frozen model alone: no personal row, no negative proposal.
pub fn frozen_forward(snapshot: &FrozenSnapshot) -> Result<Prediction> {
    let sim = similarity(&snapshot.text, &snapshot.mask_embed, snapshot.logit_scale)?;
    predict(&snapshot.masks, &class_probs(&sim))
}

pub fn frozen_labels(snapshot: &FrozenSnapshot) -> Result<LabelMap> {
    let pred = frozen_forward(snapshot)?;
    label_map(&pred.dist, snapshot.height, snapshot.width)
}

fn append_channel(masks: &Matrix, channel: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(masks.rows(), masks.cols() + 1);
    for p in 0..masks.rows() {
        let row = out.row_mut(p);
        row[..masks.cols()].copy_from_slice(masks.row(p));
        row[masks.cols()] = channel[p];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn effective_embedding_endpoints() {
        let t = [1.0, -2.0, 0.5];
        let f = [0.3, 0.7, -0.1];
        assert_eq!(effective_embedding(&t, Some(&f), 0.0).unwrap(), t);
        assert_eq!(effective_embedding(&t, Some(&f), 1.0).unwrap(), f);
        let mid = effective_embedding(&t, Some(&f), 0.1).unwrap();
        for i in 0..3 {
            assert!((mid[i] - (0.1 * f[i] + 0.9 * t[i])).abs() < 1e-15);
        }
        assert!(matches!(effective_embedding(&t, Some(&f), 1.5), Err(Error::AlphaOutOfRange(_))));
        assert!(matches!(effective_embedding(&t, None, 0.1), Err(Error::MissingVisualEmbedding(_))));
        assert_eq!(effective_embedding(&t, None, 0.0).unwrap(), t);
    }

    #[test]
    fn augment_examples() {
        let empty = Matrix::zeros(0, 3);
        let a = augment_text(&empty, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.matrix.rows(), 1);
        assert_eq!(a.matrix.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(a.personal_index, 0);

        let bank = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        let a = augment_text(&bank, &[9.0, 8.0]).unwrap();
        assert_eq!(a.matrix.rows(), 3);
        assert_eq!(a.personal_index, 2);
        for r in 0..2 {
            for (x, y) in a.matrix.row(r).iter().zip(bank.row(r)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(matches!(a.augment(&[0.0, 0.0]), Err(Error::AlreadyAugmented)));
        assert!(augment_text(&bank, &[1.0]).is_err());
    }

    #[test]
    fn negative_embedding_examples() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(negative_embedding(&z, &[0.0, 1.0, 0.0]).unwrap(), vec![3.0, -1.0]);
        let mean = negative_embedding(&z, &[1.0 / 3.0; 3]).unwrap();
        assert!((mean[0] - 1.5).abs() < 1e-12 && (mean[1] - 0.5).abs() < 1e-12);
        // Hand product: [0.2, -0.5, 1.0] . Z
        let w = [0.2, -0.5, 1.0];
        let got = negative_embedding(&z, &w).unwrap();
        let want = [0.2 * 1.0 - 0.5 * 3.0 + 0.5, 0.2 * 2.0 + 0.5 + 0.5];
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        assert!(negative_embedding(&z, &[1.0]).is_err());
    }

    #[test]
    fn negative_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 4, 2, 0.0, 1.0);
        assert!(negative_mask(&m, &[0.0, 0.0], 0.0).unwrap().iter().all(|&x| x == 0.5));
        let w = [0.7, -1.3];
        let got = negative_mask(&m, &w, 0.2).unwrap();
        for p in 0..4 {
            let z = 0.7 * m.get(p, 0) - 1.3 * m.get(p, 1) + 0.2;
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((got[p] - want).abs() < 1e-15);
        }
        assert!(negative_mask(&m, &[1.0], 0.0).is_err());
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_matrix(&mut rng, 2, 2, -1.0, 1.0);
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = similarity(&eye, &z, 1.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(s.get(i, j), z.get(j, i));
            }
        }
        let t = random_matrix(&mut rng, 3, 2, -1.0, 1.0);
        let s1 = similarity(&t, &z, 1.0).unwrap();
        let s2 = similarity(&t, &z, 2.0).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(s2.get(i, j), 2.0 * s1.get(i, j));
                let mut want = 0.0;
                for k in 0..2 {
                    want += t.get(i, k) * z.get(j, k);
                }
                assert!((s1.get(i, j) - want).abs() < 1e-15);
            }
        }
        assert!(similarity(&t, &Matrix::zeros(2, 3), 1.0).is_err());
    }

    #[test]
    fn class_prob_examples() {
        let s = Matrix::from_rows(&[vec![0.3, 1000.0, 0.0], vec![0.3, 0.0, 2f64.ln()]]).unwrap();
        let c = class_probs(&s);
        assert_eq!(c.column(0), vec![0.5, 0.5]);
        assert_eq!(c.get(0, 1), 1.0);
        assert!(c.get(1, 1) < 1e-300);
        assert!((c.get(0, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.get(1, 2) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        let c = Matrix::from_rows(&[vec![0.2], vec![0.3], vec![0.5]]).unwrap();
        let m = Matrix::from_vec(4, 1, vec![1.0; 4]).unwrap();
        let pr = predict(&m, &c).unwrap();
        for p in 0..4 {
            assert_eq!(pr.dist.row(p), &[0.2, 0.3, 0.5]);
        }

        let zero = Matrix::zeros(3, 1);
        let pr = predict(&zero, &c).unwrap();
        for p in 0..3 {
            assert!(pr.dist.row(p).iter().all(|&q| q == 1.0 / 3.0));
        }

        // Two masks, two classes, one pixel.
        let m = Matrix::from_rows(&[vec![0.6, 0.3]]).unwrap();
        let c = Matrix::from_rows(&[vec![0.9, 0.2], vec![0.1, 0.8]]).unwrap();
        let pr = predict(&m, &c).unwrap();
        let p0 = 0.6 * 0.9 + 0.3 * 0.2;
        let p1 = 0.6 * 0.1 + 0.3 * 0.8;
        assert!((pr.scores.get(0, 0) - p0).abs() < 1e-15);
        assert!((pr.scores.get(0, 1) - p1).abs() < 1e-15);
        assert!((pr.dist.get(0, 0) - p0 / (p0 + p1)).abs() < 1e-15);
        assert!(predict(&m, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn label_map_examples() {
        let q = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        assert_eq!(label_map(&q, 1, 2).unwrap().labels, vec![1, 0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_matrix(&mut rng, 16, 5, 0.0, 1.0);
        let lm = label_map(&q, 4, 4).unwrap();
        for p in 0..16 {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for v in 0..5 {
                if q.get(p, v) > best_v {
                    best_v = q.get(p, v);
                    best = v;
                }
            }
            assert_eq!(lm.labels[p], best);
        }
    }

    fn toy_snapshot(rng: &mut ChaCha8Rng) -> FrozenSnapshot {
        let (v, d, n, h, w) = (3, 4, 5, 3, 3);
        let names = (0..v).map(|i| format!("c{i}")).collect();
        FrozenSnapshot {
            text: random_matrix(rng, v, d, -1.0, 1.0),
            mask_embed: random_matrix(rng, n, d, -1.0, 1.0),
            masks: random_matrix(rng, h * w, n, 0.0, 1.0),
            height: h,
            width: w,
            logit_scale: 2.0,
            vocab_names: names,
            features: None,
        }
    }

    fn toy_state(rng: &mut ChaCha8Rng, snap: &FrozenSnapshot, negative: bool) -> PersonalState {
        PersonalState {
            text: (0..snap.dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            neg_embed_weights: (0..snap.num_masks()).map(|_| rng.random_range(-0.5..0.5)).collect(),
            neg_mask_weights: (0..snap.num_masks()).map(|_| rng.random_range(-0.5..0.5)).collect(),
            neg_mask_bias: 0.1,
            visual: None,
            alpha: 0.0,
            personal_index: snap.vocab_size(),
            negative_enabled: negative,
        }
    }

    #[test]
    fn forward_shapes_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let snap = toy_snapshot(&mut rng);
        let state = toy_state(&mut rng, &snap, true);
        let cache = forward(&snap, &state).unwrap();
        assert_eq!(cache.sim.rows(), 4);
        assert_eq!(cache.sim.cols(), 6);
        assert_eq!(cache.masks.cols(), 6);
        assert_eq!(cache.neg_index(), Some(5));
        for n in 0..6 {
            let s: f64 = cache.probs.column(n).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for p in 0..9 {
            let s: f64 = cache.pred.dist.row(p).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let m = cache.neg_mask.as_ref().unwrap()[p];
            assert!(m > 0.0 && m < 1.0);
        }

        let off = forward(&snap, &toy_state(&mut rng, &snap, false)).unwrap();
        assert_eq!(off.sim.cols(), 5);
        assert_eq!(off.neg_index(), None);
    }

    #[test]
    fn zero_weights_give_zero_negative_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let snap = toy_snapshot(&mut rng);
        let mut state = toy_state(&mut rng, &snap, true);
        state.neg_embed_weights.iter_mut().for_each(|w| *w = 0.0);
        let cache = forward(&snap, &state).unwrap();
        assert!(cache.neg_embed.unwrap().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn alpha_zero_ignores_visual_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let snap = toy_snapshot(&mut rng);
        let mut a = toy_state(&mut rng, &snap, true);
        let b = a.clone();
        a.visual = Some(vec![5.0, -3.0, 2.0, 7.0]);
        let ca = forward(&snap, &a).unwrap();
        let cb = forward(&snap, &b).unwrap();
        assert_eq!(ca.pred, cb.pred);
    }

    #[test]
    fn frozen_block_is_reproduced_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let snap = toy_snapshot(&mut rng);
        let state = toy_state(&mut rng, &snap, true);
        let cache = forward(&snap, &state).unwrap();
        let frozen = frozen_forward(&snap).unwrap();
        assert_eq!(cache.restrict_to_frozen(), frozen);
    }

    #[test]
    fn state_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let snap = toy_snapshot(&mut rng);
        let mut s = toy_state(&mut rng, &snap, true);
        s.alpha = 0.3;
        assert!(matches!(forward(&snap, &s), Err(Error::MissingVisualEmbedding(_))));
        s.alpha = 0.0;
        s.personal_index = 7;
        assert!(forward(&snap, &s).is_err());
        s.personal_index = 3;
        s.text.push(0.0);
        assert!(forward(&snap, &s).is_err());
    }

    #[test]
    fn non_finite_stage_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let snap = toy_snapshot(&mut rng);
        let mut s = toy_state(&mut rng, &snap, true);
        s.text[0] = f64::INFINITY;
        assert!(matches!(
            forward(&snap, &s),
            Err(Error::NonFiniteStage { stage: "effective_embedding" })
        ));
    }

    proptest! {
        #[test]
        fn class_probs_columns_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
            let s = Matrix::from_vec(4, 3, vals).unwrap();
            let c = class_probs(&s);
            for n in 0..3 {
                let col = c.column(n);
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(col.iter().all(|&x| x > 0.0));
            }
        }

        #[test]
        fn predict_scores_are_linear_in_masks(
            m1 in prop::collection::vec(0.0f64..1.0, 6),
            m2 in prop::collection::vec(0.0f64..1.0, 6),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let c = Matrix::from_rows(&[vec![0.2, 0.7, 0.1], vec![0.8, 0.3, 0.9]]).unwrap();
            let mm1 = Matrix::from_vec(2, 3, m1.clone()).unwrap();
            let mm2 = Matrix::from_vec(2, 3, m2.clone()).unwrap();
            let mix: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| a * x + b * y).collect();
            let mix = Matrix::from_vec(2, 3, mix).unwrap();
            let p1 = predict(&mm1, &c).unwrap().scores;
            let p2 = predict(&mm2, &c).unwrap().scores;
            let pm = predict(&mix, &c).unwrap().scores;
            for p in 0..2 {
                for v in 0..2 {
                    prop_assert!((pm.get(p, v) - (a * p1.get(p, v) + b * p2.get(p, v))).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn negative_mask_monotone_in_bias(b1 in -20.0f64..20.0, db in 0.0f64..10.0) {
            let m = Matrix::from_rows(&[vec![0.3, 0.9], vec![0.0, 0.5]]).unwrap();
            let lo = negative_mask(&m, &[1.0, -2.0], b1).unwrap();
            let hi = negative_mask(&m, &[1.0, -2.0], b1 + db).unwrap();
            for (l, h) in lo.iter().zip(&hi) {
                prop_assert!(h >= l);
            }
        }

        #[test]
        fn label_map_invariant_to_positive_scaling(
            vals in prop::collection::vec(0.0f64..1.0, 12),
            scale in 1e-3f64..1e3,
        ) {
            let q = Matrix::from_vec(4, 3, vals.clone()).unwrap();
            let scaled = Matrix::from_vec(4, 3, vals.iter().map(|x| x * scale).collect()).unwrap();
            prop_assert_eq!(label_map(&q, 2, 2).unwrap(), label_map(&scaled, 2, 2).unwrap());
        }
    }

    #[test]
    fn negative_mask_saturates_with_bias() {
        let m = Matrix::from_rows(&[vec![0.3, 0.9]]).unwrap();
        assert!(negative_mask(&m, &[1.0, 1.0], 50.0).unwrap()[0] > 1.0 - 1e-12);
    }
}
