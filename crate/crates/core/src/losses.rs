//! Training objectives for the personal entry and the negative proposal.

use crate::head::ForwardCache;
use crate::snapshot::GroundTruthMask;
use crate::tensor::Matrix;

/// Smoothing constant of the soft dice loss.
pub const DICE_EPS: f64 = 1e-6;
/// Lower clamp applied to every probability before a logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub bce: f64,
    pub cls: f64,
    pub neg_z: f64,
    pub neg_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dice: 1.0,
            bce: 1.0,
            cls: 1.0,
            neg_z: 0.1,
            neg_m: 500.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            dice: 0.0,
            bce: 0.0,
            cls: 0.0,
            neg_z: 0.0,
            neg_m: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.dice, self.bce, self.cls, self.neg_z, self.neg_m]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub bce: f64,
    pub cls: f64,
    pub neg_z: f64,
    pub neg_m: f64,
    pub total: f64,
    /// Ground truth had no foreground, so the classification term is 0.
    pub degenerate: bool,
}

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss(prob: &[f64], gt: &GroundTruthMask) -> f64 {
    assert_eq!(prob.len(), gt.len(), "dice: shape mismatch");
    let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
    for (i, &p) in prob.iter().enumerate() {
        let g = f64::from(u8::from(gt.at(i)));
        inter += p * g;
        psum += p;
        gsum += g;
    }
    1.0 - (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS)
}

/// Pixel-mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(prob: &[f64], gt: &GroundTruthMask) -> f64 {
    assert_eq!(prob.len(), gt.len(), "bce: shape mismatch");
    if prob.is_empty() {
        return 0.0;
    }
    let total: f64 = prob
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let p = clamp_prob(p);
            if gt.at(i) {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / prob.len() as f64
}

/// Mean over foreground pixels of `-ln Q(p, k)`; 0 without foreground.
pub fn cls_loss(dist: &Matrix, gt: &GroundTruthMask, k: usize) -> f64 {
    assert_eq!(dist.rows(), gt.len(), "cls: shape mismatch");
    let fg = gt.foreground();
    if fg == 0 {
        return 0.0;
    }
    let total: f64 = (0..dist.rows())
        .filter(|&p| gt.at(p))
        .map(|p| -dist.get(p, k).max(PROB_CLAMP).ln())
        .sum();
    total / fg as f64
}

/// `-(1/V_np) sum_{i != k} ln C[i, j]` where `V_np` counts the
/// non-personal rows. Its minimum, `ln V_np`, is reached when column `j`
/// is uniform over non-personal rows and puts no mass on `k`.
pub fn neg_z_loss(probs: &Matrix, j: usize, k: usize) -> f64 {
    let v_np = probs.rows() - 1;
    if v_np == 0 {
        return 0.0;
    }
    let total: f64 = (0..probs.rows())
        .filter(|&i| i != k)
        .map(|i| -probs.get(i, j).max(PROB_CLAMP).ln())
        .sum();
    total / v_np as f64
}

/// Binary cross-entropy of the negative mask against the complement of
/// the personal mask.
pub fn neg_m_loss(neg_mask: &[f64], gt: &GroundTruthMask) -> f64 {
    bce_loss(neg_mask, &gt.complement())
}

/// Personal-channel probability `Q(., k)`.
pub fn personal_channel(cache: &ForwardCache) -> Vec<f64> {
    cache.pred.dist.column(cache.personal_index())
}

pub fn total_loss(cache: &ForwardCache, gt: &GroundTruthMask, weights: &LossWeights) -> LossBreakdown {
    let k = cache.personal_index();
    let prob = personal_channel(cache);
    let dice = dice_loss(&prob, gt);
    let bce = bce_loss(&prob, gt);
    let cls = cls_loss(&cache.pred.dist, gt, k);
    let (neg_z, neg_m) = match (cache.neg_index(), &cache.neg_mask) {
        (Some(j), Some(m)) => (neg_z_loss(&cache.probs, j, k), neg_m_loss(m, gt)),
        _ => (0.0, 0.0),
    };
    let total = weights.dice * dice
        + weights.bce * bce
        + weights.cls * cls
        + weights.neg_z * neg_z
        + weights.neg_m * neg_m;
    LossBreakdown {
        dice,
        bce,
        cls,
        neg_z,
        neg_m,
        total,
        degenerate: gt.foreground() == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snapshot::BinaryMask;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> GroundTruthMask {
        BinaryMask::new(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let gt = mask(2, 2, &[1, 1, 0, 0]);
        assert!(dice_loss(&[1.0, 1.0, 0.0, 0.0], &gt) <= 1e-6);
        assert!((dice_loss(&[0.0, 0.0, 1.0, 1.0], &gt) - 1.0).abs() < 1e-6);
        // gt and pred each A=4 pixels, overlap A/2: 1 - 2*2/(4+4) = 0.5
        let gt = mask(2, 4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let pred = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        assert!((dice_loss(&pred, &gt) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bce_examples() {
        let gt = mask(1, 4, &[1, 0, 1, 0]);
        assert!((bce_loss(&[0.5; 4], &gt) - 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0, 1.0, 0.0], &gt) <= 1e-6);
        let one = mask(1, 1, &[1]);
        assert!((bce_loss(&[0.25], &one) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cls_examples() {
        let gt = mask(1, 2, &[1, 1]);
        let q = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(cls_loss(&q, &gt, 1), 0.0);
        let q = Matrix::from_rows(&[vec![0.25; 4], vec![0.25; 4]]).unwrap();
        assert!((cls_loss(&q, &gt, 3) - 4f64.ln()).abs() < 1e-12);
        let q = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.75, 0.25]]).unwrap();
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((cls_loss(&q, &gt, 1) - want).abs() < 1e-12);
        assert_eq!(cls_loss(&q, &mask(1, 2, &[0, 0]), 1), 0.0);
    }

    #[test]
    fn neg_z_examples() {
        let c = Matrix::from_rows(&[vec![0.5], vec![0.5], vec![0.0]]).unwrap();
        assert!((neg_z_loss(&c, 0, 2) - 2f64.ln()).abs() < 1e-12);
        let c = Matrix::from_rows(&[vec![0.2], vec![0.2], vec![0.2], vec![0.4]]).unwrap();
        assert!(neg_z_loss(&c, 0, 3) > 3f64.ln());
    }

    #[test]
    fn neg_m_examples() {
        let gt = mask(1, 4, &[1, 1, 0, 0]);
        assert!(neg_m_loss(&[0.0, 0.0, 1.0, 1.0], &gt) <= 1e-6);
        assert!((neg_m_loss(&[0.5; 4], &gt) - 2f64.ln()).abs() < 1e-12);
        assert!(neg_m_loss(&[1.0, 1.0, 0.0, 0.0], &gt) >= (1.0f64 / 1e-7).ln() - 1e-6);
    }

    proptest! {
        #[test]
        fn neg_z_lower_bound(raw in prop::collection::vec(0.01f64..1.0, 5)) {
            let s: f64 = raw.iter().sum();
            let col: Vec<Vec<f64>> = raw.iter().map(|x| vec![x / s]).collect();
            let c = Matrix::from_rows(&col).unwrap();
            prop_assert!(neg_z_loss(&c, 0, 4) >= 4f64.ln() - 1e-12);
        }

        #[test]
        fn losses_nonnegative_and_finite(
            probs in prop::collection::vec(-0.5f64..1.5, 9),
            bits in prop::collection::vec(0u8..2, 9),
        ) {
            let gt = mask(3, 3, &bits);
            let p: Vec<f64> = probs.iter().map(|x| x.clamp(0.0, 1.0)).collect();
            for l in [dice_loss(&p, &gt), bce_loss(&p, &gt), neg_m_loss(&p, &gt)] {
                prop_assert!(l.is_finite() && l >= 0.0);
            }
        }

        #[test]
        fn dice_and_bce_transpose_symmetric(
            probs in prop::collection::vec(0.0f64..1.0, 6),
            bits in prop::collection::vec(0u8..2, 6),
        ) {
            let gt = mask(2, 3, &bits);
            let pt: Vec<f64> = (0..6).map(|i| { let (y, x) = (i / 2, i % 2); probs[x * 3 + y] }).collect();
            let gtt = gt.transpose();
            prop_assert!((dice_loss(&probs, &gt) - dice_loss(&pt, &gtt)).abs() < 1e-12);
            prop_assert!((bce_loss(&probs, &gt) - bce_loss(&pt, &gtt)).abs() < 1e-12);
        }
    }
}
