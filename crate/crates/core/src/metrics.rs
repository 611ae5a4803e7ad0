//! Pixel-count evaluation: personal IoU, mIoU over pseudo-labels, and
//! personal-class precision and recall over a balanced test set.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::{forward, frozen_labels, LabelMap, PersonalState};
use crate::snapshot::{FrozenSnapshot, GroundTruthMask, Polarity, Sample};

/// Per-class true-positive, false-positive and false-negative pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.tp.iter_mut().zip(&other.tp) {
            *a += b;
        }
        for (a, b) in self.fp.iter_mut().zip(&other.fp) {
            *a += b;
        }
        for (a, b) in self.fn_.iter_mut().zip(&other.fn_) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let den = self.tp[c] + self.fp[c] + self.fn_[c];
        (den > 0).then(|| self.tp[c] as f64 / den as f64)
    }
}

pub fn accumulate(pred: &LabelMap, gt: &LabelMap, counts: &mut ConfusionCounts) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::dims("label map cells", gt.labels.len(), pred.labels.len()));
    }
    let classes = counts.classes();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p >= classes || g >= classes {
            return Err(Error::dims("label index bound", classes, p.max(g) + 1));
        }
        if p == g {
            counts.tp[p] += 1;
        } else {
            counts.fp[p] += 1;
            counts.fn_[g] += 1;
        }
    }
    Ok(())
}

/// IoU of the personal class; 0 when it never occurs.
pub fn iou_per(counts: &ConfusionCounts, k: usize) -> f64 {
    counts.iou(k).unwrap_or(0.0)
}

/// Mean IoU over classes present in prediction or ground truth.
pub fn miou(counts: &ConfusionCounts) -> f64 {
    let ious: Vec<f64> = (0..counts.classes()).filter_map(|c| counts.iou(c)).collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Pixel precision and recall of class `k`; 0 for an empty denominator.
pub fn precision_recall(counts: &ConfusionCounts, k: usize) -> (f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (
        ratio(counts.tp[k], counts.tp[k] + counts.fp[k]),
        ratio(counts.tp[k], counts.tp[k] + counts.fn_[k]),
    )
}

/// Evaluation ground truth: frozen-model labels, with the personal
/// foreground (if any) relabeled to the personal index `V`.
pub fn pseudo_label(snapshot: &FrozenSnapshot, personal: Option<&GroundTruthMask>) -> Result<LabelMap> {
    let mut labels = frozen_labels(snapshot)?;
    if let Some(mask) = personal {
        if mask.len() != labels.labels.len() {
            return Err(Error::dims("personal mask", labels.labels.len(), mask.len()));
        }
        let k = snapshot.vocab_size();
        for (p, l) in labels.labels.iter_mut().enumerate() {
            if mask.at(p) {
                *l = k;
            }
        }
    }
    Ok(labels)
}

/// How test predictions are produced.
#[derive(Debug, Clone, Copy)]
pub enum Decoder<'a> {
    /// The frozen model with no personal entry; the personal class is never predicted.
    FrozenOnly,
    Personal(&'a PersonalState),
}

pub fn decode(snapshot: &FrozenSnapshot, decoder: Decoder<'_>) -> Result<LabelMap> {
    match decoder {
        Decoder::FrozenOnly => frozen_labels(snapshot),
        Decoder::Personal(state) => Ok(forward(snapshot, state)?.labels()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Sum counts over the whole test set, then take ratios.
    #[default]
    Dataset,
    /// Ratios per image, averaged over images where each is defined.
    PerImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iou_per: f64,
    pub miou: f64,
    pub precision_per: f64,
    pub recall_per: f64,
    pub per_class: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    pub positives: usize,
    pub negatives: usize,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        for (name, v) in [
            ("iou_per", self.iou_per),
            ("miou", self.miou),
            ("precision_per", self.precision_per),
            ("recall_per", self.recall_per),
        ] {
            writeln!(s, "{name}\t{v:.4}").unwrap();
        }
        for (name, iou) in self.class_names.iter().zip(&self.per_class) {
            match iou {
                Some(v) => writeln!(s, "{name}\t{v:.4}").unwrap(),
                None => writeln!(s, "{name}\t-").unwrap(),
            }
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Ground truth for one test sample: personal override on positives only.
pub fn sample_ground_truth(sample: &Sample) -> Result<LabelMap> {
    let personal = match sample.polarity {
        Polarity::Positive => sample.mask.as_ref(),
        Polarity::Negative => None,
    };
    pseudo_label(&sample.snapshot, personal)
}

pub fn evaluate(
    samples: &[&Sample],
    decoder: Decoder<'_>,
    personal_name: &str,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("evaluation needs at least one test sample".into()))?;
    let k = first.snapshot.vocab_size();
    let classes = k + 1;
    let mut counts = ConfusionCounts::new(classes);
    let mut per_image = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.snapshot.vocab_size() != k {
            return Err(Error::dims("vocabulary size", k, sample.snapshot.vocab_size()));
        }
        let gt = sample_ground_truth(sample)?;
        let pred = decode(&sample.snapshot, decoder)?;
        let mut c = ConfusionCounts::new(classes);
        accumulate(&pred, &gt, &mut c)?;
        counts.merge(&c);
        per_image.push(c);
    }

    let (iou_per_v, miou_v, precision_per, recall_per, per_class) = match aggregation {
        Aggregation::Dataset => {
            let (p, r) = precision_recall(&counts, k);
            let per_class = (0..classes).map(|c| counts.iou(c)).collect();
            (iou_per(&counts, k), miou(&counts), p, r, per_class)
        }
        Aggregation::PerImage => {
            let mean_of = |xs: Vec<f64>| {
                if xs.is_empty() {
                    0.0
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };
            let iou_k = mean_of(per_image.iter().filter_map(|c| c.iou(k)).collect());
            let m = mean_of(
                per_image
                    .iter()
                    .filter(|c| (0..classes).any(|i| c.iou(i).is_some()))
                    .map(miou)
                    .collect(),
            );
            let p = mean_of(
                per_image
                    .iter()
                    .filter(|c| c.tp[k] + c.fp[k] > 0)
                    .map(|c| precision_recall(c, k).0)
                    .collect(),
            );
            let r = mean_of(
                per_image
                    .iter()
                    .filter(|c| c.tp[k] + c.fn_[k] > 0)
                    .map(|c| precision_recall(c, k).1)
                    .collect(),
            );
            let per_class = (0..classes)
                .map(|cls| {
                    let v: Vec<f64> = per_image.iter().filter_map(|c| c.iou(cls)).collect();
                    (!v.is_empty()).then(|| mean_of(v))
                })
                .collect();
            (iou_k, m, p, r, per_class)
        }
    };

    let mut class_names = first.snapshot.vocab_names.clone();
    class_names.push(personal_name.to_owned());
    Ok(MetricsReport {
        iou_per: iou_per_v,
        miou: miou_v,
        precision_per,
        recall_per,
        per_class,
        class_names,
        positives: samples.iter().filter(|s| s.polarity == Polarity::Positive).count(),
        negatives: samples.iter().filter(|s| s.polarity == Polarity::Negative).count(),
        counts,
    })
}
