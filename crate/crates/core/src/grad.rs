//! Hand-derived reverse-mode gradients of the total loss with respect to
//! the trainable parameters, and a central-difference verifier.
//!
//! Backward order mirrors the forward pass: loss terms -> `Q` -> `P` ->
//! (`C`, negative mask) -> column softmax -> `S = tau T Z^T` -> personal row
//! and negative embedding -> parameters.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::head::{forward, PersonalState, COVERAGE_EPS};
use crate::losses::{total_loss, LossBreakdown, LossWeights, DICE_EPS, PROB_CLAMP};
use crate::snapshot::{BinaryMask, FrozenSnapshot, GroundTruthMask};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub text: Vec<f64>,
    pub neg_embed_weights: Vec<f64>,
    pub neg_mask_weights: Vec<f64>,
    pub neg_mask_bias: f64,
}

impl Gradients {
    pub fn zeros(dim: usize, num_masks: usize) -> Self {
        Self {
            text: vec![0.0; dim],
            neg_embed_weights: vec![0.0; num_masks],
            neg_mask_weights: vec![0.0; num_masks],
            neg_mask_bias: 0.0,
        }
    }

    /// Named parameter groups, in a fixed order.
    pub fn groups(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("text", &self.text),
            ("neg_embed_weights", &self.neg_embed_weights),
            ("neg_mask_weights", &self.neg_mask_weights),
            ("neg_mask_bias", std::slice::from_ref(&self.neg_mask_bias)),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.groups().iter().flat_map(|(_, g)| g.iter().copied()).collect()
    }

    fn from_flat(flat: &[f64], dim: usize, num_masks: usize) -> Self {
        Self {
            text: flat[..dim].to_vec(),
            neg_embed_weights: flat[dim..dim + num_masks].to_vec(),
            neg_mask_weights: flat[dim + num_masks..dim + 2 * num_masks].to_vec(),
            neg_mask_bias: flat[dim + 2 * num_masks],
        }
    }
}

/// Trainable parameters of `state` as one flat vector
/// (`T_per`, `W_Z`, `W_M`, `b_M`).
pub fn flatten_params(state: &PersonalState) -> Vec<f64> {
    let mut out = state.text.clone();
    out.extend_from_slice(&state.neg_embed_weights);
    out.extend_from_slice(&state.neg_mask_weights);
    out.push(state.neg_mask_bias);
    out
}

pub fn with_params(state: &PersonalState, flat: &[f64]) -> PersonalState {
    let g = Gradients::from_flat(flat, state.dim(), state.num_masks());
    PersonalState {
        text: g.text,
        neg_embed_weights: g.neg_embed_weights,
        neg_mask_weights: g.neg_mask_weights,
        neg_mask_bias: g.neg_mask_bias,
        ..state.clone()
    }
}

fn check(stage: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteStage { stage })
    }
}

#[inline]
fn unclamped(p: f64) -> bool {
    p > PROB_CLAMP && p < 1.0 - PROB_CLAMP
}

/// d(pixel-mean BCE)/d(prob) against a 0/1 target; zero where clamped.
fn bce_grad(prob: &[f64], target: impl Fn(usize) -> bool, scale: f64, out: &mut [f64]) {
    let n = prob.len() as f64;
    for (i, &p) in prob.iter().enumerate() {
        if unclamped(p) {
            let g = if target(i) { -1.0 / p } else { 1.0 / (1.0 - p) };
            out[i] += scale * g / n;
        }
    }
}

/// Loss and exact gradients for one sample.
pub fn backward(
    snapshot: &FrozenSnapshot,
    state: &PersonalState,
    gt: &GroundTruthMask,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    if gt.len() != snapshot.num_pixels() {
        return Err(Error::dims("ground-truth mask", snapshot.num_pixels(), gt.len()));
    }
    let cache = forward(snapshot, state)?;
    let loss = total_loss(&cache, gt, weights);
    check("loss", &[loss.total])?;

    let k = cache.personal_index();
    let pixels = snapshot.num_pixels();
    let classes = cache.probs.rows();
    let cols = cache.probs.cols();
    let dist = &cache.pred.dist;
    let prob: Vec<f64> = (0..pixels).map(|p| dist.get(p, k)).collect();

    // dL/dQ(p, k); every segmentation term reads only the personal channel.
    let mut g_q = vec![0.0; pixels];
    if weights.dice != 0.0 {
        let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
        for (p, &q) in prob.iter().enumerate() {
            let g = f64::from(u8::from(gt.at(p)));
            inter += q * g;
            psum += q;
            gsum += g;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + gsum + DICE_EPS;
        for (p, gq) in g_q.iter_mut().enumerate() {
            let g = f64::from(u8::from(gt.at(p)));
            *gq -= weights.dice * (2.0 * g * den - num) / (den * den);
        }
    }
    if weights.bce != 0.0 {
        bce_grad(&prob, |p| gt.at(p), weights.bce, &mut g_q);
    }
    let fg = gt.foreground();
    if weights.cls != 0.0 && fg > 0 {
        for (p, gq) in g_q.iter_mut().enumerate() {
            if gt.at(p) && prob[p] > PROB_CLAMP {
                *gq -= weights.cls / (prob[p] * fg as f64);
            }
        }
    }
    check("personal_channel", &g_q)?;

    // Q = P / sum_v P; only column k of dL/dQ is nonzero.
    let mut g_p = Matrix::zeros(pixels, classes);
    for p in 0..pixels {
        let m = cache.pred.coverage[p];
        if m > COVERAGE_EPS && g_q[p] != 0.0 {
            let shared = g_q[p] * cache.pred.scores.get(p, k) / (m * m);
            for v in 0..classes {
                g_p.set(p, v, -shared);
            }
            g_p.add_at(p, k, g_q[p] / m);
        }
    }
    check("normalization", g_p.as_slice())?;

    // P = M C^T.
    let mut g_c = Matrix::zeros(classes, cols);
    for p in 0..pixels {
        let gp = g_p.row(p);
        let m = cache.masks.row(p);
        for v in 0..classes {
            if gp[v] != 0.0 {
                for n in 0..cols {
                    g_c.add_at(v, n, gp[v] * m[n]);
                }
            }
        }
    }

    let neg = cache.neg_index();
    let mut g_neg_mask = vec![0.0; if neg.is_some() { pixels } else { 0 }];
    if let Some(j) = neg {
        for (p, g) in g_neg_mask.iter_mut().enumerate() {
            *g = dot(g_p.row(p), &cache.probs.column(j));
        }
        if weights.neg_z != 0.0 && classes > 1 {
            let v_np = (classes - 1) as f64;
            for i in (0..classes).filter(|&i| i != k) {
                let c = cache.probs.get(i, j);
                if c > PROB_CLAMP {
                    g_c.add_at(i, j, -weights.neg_z / (v_np * c));
                }
            }
        }
    }
    check("composition", g_c.as_slice())?;

    // Column softmax.
    let mut g_s = Matrix::zeros(classes, cols);
    for n in 0..cols {
        let inner: f64 = (0..classes).map(|v| g_c.get(v, n) * cache.probs.get(v, n)).sum();
        for v in 0..classes {
            g_s.set(v, n, cache.probs.get(v, n) * (g_c.get(v, n) - inner));
        }
    }
    check("class_probs", g_s.as_slice())?;

    // S = tau T Z^T: gradient reaches the personal row and the negative row.
    let tau = cache.logit_scale;
    let dim = snapshot.dim();
    let mut g_teff = vec![0.0; dim];
    for n in 0..cols {
        let w = tau * g_s.get(k, n);
        for (g, z) in g_teff.iter_mut().zip(cache.mask_embed.row(n)) {
            *g += w * z;
        }
    }
    let scale = if state.visual.is_some() { 1.0 - state.alpha } else { 1.0 };
    let mut grads = Gradients::zeros(dim, snapshot.num_masks());
    grads.text = g_teff.iter().map(|g| scale * g).collect();
    check("similarity", &grads.text)?;

    if let (Some(j), Some(neg_mask)) = (neg, &cache.neg_mask) {
        let mut g_zneg = vec![0.0; dim];
        for v in 0..classes {
            let w = tau * g_s.get(v, j);
            for (g, t) in g_zneg.iter_mut().zip(cache.text.matrix.row(v)) {
                *g += w * t;
            }
        }
        for (n, g) in grads.neg_embed_weights.iter_mut().enumerate() {
            *g = dot(snapshot.mask_embed.row(n), &g_zneg);
        }
        check("negative_embedding", &grads.neg_embed_weights)?;

        if weights.neg_m != 0.0 {
            bce_grad(neg_mask, |p| !gt.at(p), weights.neg_m, &mut g_neg_mask);
        }
        let mut bias = 0.0;
        for p in 0..pixels {
            let s = neg_mask[p];
            let g_pre = g_neg_mask[p] * s * (1.0 - s);
            bias += g_pre;
            for (g, m) in grads.neg_mask_weights.iter_mut().zip(snapshot.masks.row(p)) {
                *g += g_pre * m;
            }
        }
        grads.neg_mask_bias = bias;
        check("negative_mask", &grads.neg_mask_weights)?;
        check("negative_mask", &[bias])?;
    }
    Ok((loss, grads))
}

/// Central differences of `f` around `params`.
pub fn central_difference(params: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Numerical gradient of the total loss over every trainable coordinate.
pub fn finite_diff(
    snapshot: &FrozenSnapshot,
    state: &PersonalState,
    gt: &GroundTruthMask,
    weights: &LossWeights,
    eps: f64,
) -> Result<Gradients> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    // Surface forward errors once instead of inside the closure.
    forward(snapshot, state)?;
    let flat = central_difference(&flatten_params(state), eps, |x| {
        let s = with_params(state, x);
        forward(snapshot, &s)
            .map(|c| total_loss(&c, gt, weights).total)
            .unwrap_or(f64::NAN)
    });
    Ok(Gradients::from_flat(&flat, state.dim(), state.num_masks()))
}

/// A seeded random problem for gradient checking.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub snapshot: FrozenSnapshot,
    pub state: PersonalState,
    pub gt: GroundTruthMask,
    pub weights: LossWeights,
}

impl GradcheckInstance {
    /// V=5, D=8, N=6, 16x16 grid, injection at alpha 0.3, all five terms on.
    pub fn random(seed: u64) -> Self {
        let (v, d, n, h, w) = (5, 8, 6, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, s: f64| {
            let data = (0..rows * cols)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Matrix::from_vec(rows, cols, data).unwrap()
        };
        let text = gauss(v, d, 0.5);
        let mask_embed = gauss(n, d, 0.5);
        let visual = gauss(1, d, 0.5).into_vec();
        let t_per = gauss(1, d, 0.5).into_vec();
        let w_z = gauss(1, n, 0.3).into_vec();
        let w_m = gauss(1, n, 0.5).into_vec();

        let masks = Matrix::from_vec(h * w, n, (0..h * w * n).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap();
        let (y0, x0) = (rng.random_range(2..6), rng.random_range(2..6));
        let (y1, x1) = (rng.random_range(9..14), rng.random_range(9..14));
        let gt = BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x));

        let snapshot = FrozenSnapshot {
            text,
            mask_embed,
            masks,
            height: h,
            width: w,
            logit_scale: 3.0,
            vocab_names: (0..v).map(|i| format!("class_{i}")).collect(),
            features: None,
        };
        let state = PersonalState {
            text: t_per,
            neg_embed_weights: w_z,
            neg_mask_weights: w_m,
            neg_mask_bias: 0.2,
            visual: Some(visual),
            alpha: 0.3,
            personal_index: v,
            negative_enabled: true,
        };
        let weights = LossWeights {
            dice: 1.0,
            bce: 1.0,
            cls: 1.0,
            neg_z: 0.5,
            neg_m: 2.0,
        };
        Self {
            snapshot,
            state,
            gt,
            weights,
        }
    }
}

/// Outcome of comparing analytic and numerical gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
    /// Max relative error per parameter group.
    pub per_param: Vec<(&'static str, f64)>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

impl GradcheckReport {
    pub fn compare(seed: u64, eps: f64, tol: f64, analytic: &Gradients, numeric: &Gradients) -> Self {
        let per_param: Vec<(&'static str, f64)> = analytic
            .groups()
            .iter()
            .zip(numeric.groups().iter())
            .map(|((name, a), (_, f))| {
                let err = a
                    .iter()
                    .zip(f.iter())
                    .map(|(&a, &f)| relative_error(a, f))
                    .fold(0.0, f64::max);
                (*name, err)
            })
            .collect();
        let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        Self {
            seed,
            eps,
            tol,
            passed: max_rel_error <= tol,
            per_param,
            max_rel_error,
        }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gradcheck seed={} eps={:e} tol={:e}: {} max_rel_err={:.3e}",
            self.seed,
            self.eps,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error
        )?;
        for (name, err) in &self.per_param {
            write!(f, " {name}={err:.3e}")?;
        }
        Ok(())
    }
}

pub fn gradcheck(seed: u64, eps: f64, tol: f64) -> Result<GradcheckReport> {
    let inst = GradcheckInstance::random(seed);
    let (_, analytic) = backward(&inst.snapshot, &inst.state, &inst.gt, &inst.weights)?;
    let numeric = finite_diff(&inst.snapshot, &inst.state, &inst.gt, &inst.weights, eps)?;
    Ok(GradcheckReport::compare(seed, eps, tol, &analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_stub() {
        let theta = [0.5, -1.25, 3.0];
        let g = central_difference(&theta, 1e-4, |x| x.iter().map(|v| v * v).sum());
        for (gi, ti) in g.iter().zip(theta) {
            assert!((gi - 2.0 * ti).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_weights_zero_gradients() {
        let inst = GradcheckInstance::random(3);
        let w = LossWeights::zero();
        let (loss, g) = backward(&inst.snapshot, &inst.state, &inst.gt, &w).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
        let fd = finite_diff(&inst.snapshot, &inst.state, &inst.gt, &w, 1e-4).unwrap();
        assert!(fd.to_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn alpha_one_kills_text_gradient() {
        let mut inst = GradcheckInstance::random(4);
        inst.state.alpha = 1.0;
        let (_, g) = backward(&inst.snapshot, &inst.state, &inst.gt, &inst.weights).unwrap();
        assert!(g.text.iter().all(|&x| x == 0.0));
        assert!(g.neg_mask_weights.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn seed_zero_passes() {
        let r = gradcheck(0, 1e-4, 1e-5).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn infinite_tolerance_always_passes() {
        let inst = GradcheckInstance::random(1);
        let (_, a) = backward(&inst.snapshot, &inst.state, &inst.gt, &inst.weights).unwrap();
        let mut bogus = a.clone();
        bogus.text.iter_mut().for_each(|x| *x += 100.0);
        assert!(GradcheckReport::compare(1, 1e-4, f64::INFINITY, &a, &bogus).passed);
    }

    #[test]
    fn richardson_consistency() {
        let inst = GradcheckInstance::random(2);
        let a = finite_diff(&inst.snapshot, &inst.state, &inst.gt, &inst.weights, 1e-4).unwrap();
        let b = finite_diff(&inst.snapshot, &inst.state, &inst.gt, &inst.weights, 1e-5).unwrap();
        for (x, y) in a.to_flat().iter().zip(b.to_flat()) {
            assert!(relative_error(*x, y) <= 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn report_line_format() {
        let r = gradcheck(0, 1e-4, 1e-5).unwrap();
        let line = r.to_string();
        assert!(line.starts_with("gradcheck seed=0"));
        assert!(line.contains("PASS"));
        assert!(line.contains("neg_mask_bias="));
        assert!(!line.contains('\n'));
    }
}
