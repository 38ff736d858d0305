//! Multi-label evaluation: per-class average precision and ROC AUC with
//! their macro means, expected calibration error, BCE and macro F1.
//!
//! Ranking ties are resolved deterministically: AP sorts by descending score
//! and breaks ties by ascending sample index; AUC counts tied
//! positive/negative pairs as one half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{bce_loss, check_binary_labels, sigmoid_scalar};
use crate::numerics::Matrix;

pub const DEFAULT_ECE_BINS: usize = 15;

/// Whether a score matrix holds raw logits or probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_bins: usize,
    pub threshold: f64,
    /// Per-class thresholds overriding `threshold` when present.
    pub class_thresholds: Option<Vec<f64>>,
    pub score_kind: ScoreKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_ECE_BINS,
            threshold: 0.5,
            class_thresholds: None,
            score_kind: ScoreKind::Logits,
        }
    }
}

impl EvalConfig {
    pub fn probabilities() -> Self {
        Self {
            score_kind: ScoreKind::Probabilities,
            ..Self::default()
        }
    }
}

/// Flat metric report. Per-class AP/AUC entries are `null` for classes where
/// the metric is undefined; those classes are listed in `skipped_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub mauc: f64,
    pub mece: f64,
    pub bce: f64,
    pub macro_f1: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_auc: Vec<Option<f64>>,
    pub per_class_ece: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub skipped_classes: Vec<usize>,
}

fn check_pair(scores: &[f64], labels: &[f64]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric input", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut positives = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y == 1.0 {
            positives += 1;
        } else if y != 0.0 {
            return Err(Error::NonBinaryLabel { row: i, col: 0, value: y });
        }
    }
    Ok(positives)
}

/// Average precision: mean of precision@k over the ranks k of the positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let positives = check_pair(scores, labels)?;
    if positives == 0 {
        return Err(Error::undefined("average precision", "no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps ascending index within ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1.0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// ROC AUC as the Mann–Whitney statistic with ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let positives = check_pair(scores, labels)?;
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::undefined("ROC AUC", "labels contain a single class"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the U statistic, kept integral
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let s = scores[order[start]];
        let mut end = start;
        let (mut pos_tied, mut neg_tied) = (0u64, 0u64);
        while end < order.len() && scores[order[end]] == s {
            if labels[order[end]] == 1.0 {
                pos_tied += 1;
            } else {
                neg_tied += 1;
            }
            end += 1;
        }
        twice_u += pos_tied * (2 * neg_below + neg_tied);
        neg_below += neg_tied;
        start = end;
    }
    Ok(twice_u as f64 / (2 * positives as u64 * negatives as u64) as f64)
}

/// Macro mean of a per-class metric with its per-class values.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroMean {
    pub mean: f64,
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

fn check_matrix_pair(scores: &Matrix, labels: &Matrix) -> Result<()> {
    if scores.shape() != labels.shape() {
        return Err(Error::shape(
            "metric input",
            format!("{:?}", scores.shape()),
            format!("{:?}", labels.shape()),
        ));
    }
    if scores.rows() == 0 || scores.cols() == 0 {
        return Err(Error::EmptyInput);
    }
    check_binary_labels(labels)
}

fn macro_mean(
    scores: &Matrix,
    labels: &Matrix,
    metric: &'static str,
    per_class: impl Fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<MacroMean> {
    check_matrix_pair(scores, labels)?;
    let mut values = Vec::with_capacity(scores.cols());
    let mut skipped = Vec::new();
    for c in 0..scores.cols() {
        match per_class(&scores.column(c), &labels.column(c)) {
            Ok(v) => values.push(Some(v)),
            Err(Error::Undefined { .. }) => {
                values.push(None);
                skipped.push(c);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::undefined(metric, "every class was skipped"));
    }
    Ok(MacroMean {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class: values,
        skipped,
    })
}

/// Mean AP over classes that have at least one positive.
pub fn mean_ap(scores: &Matrix, labels: &Matrix) -> Result<MacroMean> {
    macro_mean(scores, labels, "mAP", average_precision)
}

/// Mean ROC AUC over classes that have both positives and negatives.
pub fn mean_auc(scores: &Matrix, labels: &Matrix) -> Result<MacroMean> {
    macro_mean(scores, labels, "mAUC", roc_auc)
}

/// Expected calibration error over `n_bins` equal-width bins on [0, 1];
/// `p = 1.0` lands in the last bin.
pub fn ece(probs: &[f64], labels: &[f64], n_bins: usize) -> Result<f64> {
    check_pair(probs, labels)?;
    if n_bins == 0 {
        return Err(Error::invalid("n_bins", "must be at least 1"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid("probability", format!("{p} outside [0, 1]")));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut pos = vec![0.0; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += p;
        pos[b] += y;
    }
    let n = probs.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (conf[b] / c - pos[b] / c).abs()
        })
        .sum())
}

/// Per-bin reliability statistics pooled over the given samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub fraction_positive: Option<f64>,
}

pub fn reliability_bins(probs: &[f64], labels: &[f64], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    ece(probs, labels, n_bins)?;
    let mut bins: Vec<(usize, f64, f64)> = vec![(0, 0.0, 0.0); n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        bins[b].0 += 1;
        bins[b].1 += p;
        bins[b].2 += y;
    }
    Ok(bins
        .into_iter()
        .enumerate()
        .map(|(b, (count, conf, pos))| ReliabilityBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count,
            mean_confidence: (count > 0).then(|| conf / count as f64),
            fraction_positive: (count > 0).then(|| pos / count as f64),
        })
        .collect())
}

/// Per-class ECE averaged over every class; all-negative classes included.
pub fn mece(probs: &Matrix, labels: &Matrix, n_bins: usize) -> Result<(f64, Vec<f64>)> {
    check_matrix_pair(probs, labels)?;
    let per_class = (0..probs.cols())
        .map(|c| ece(&probs.column(c), &labels.column(c), n_bins))
        .collect::<Result<Vec<_>>>()?;
    Ok((per_class.iter().sum::<f64>() / per_class.len() as f64, per_class))
}

/// Macro F1 with positive predictions at `score >= threshold`. A class with
/// `2·tp + fp + fn = 0` scores 0.
pub fn macro_f1(probs: &Matrix, labels: &Matrix, thresholds: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_matrix_pair(probs, labels)?;
    if thresholds.len() != probs.cols() {
        return Err(Error::shape("macro_f1 thresholds", probs.cols(), thresholds.len()));
    }
    let mut per_class = Vec::with_capacity(probs.cols());
    for (c, &t) in thresholds.iter().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for r in 0..probs.rows() {
            let predicted = probs.get(r, c) >= t;
            let actual = labels.get(r, c) == 1.0;
            match (predicted, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        per_class.push(if tp == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 });
    }
    Ok((per_class.iter().sum::<f64>() / per_class.len() as f64, per_class))
}

fn probability_to_logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

/// Computes every metric of [`EvalReport`] in one call.
pub fn evaluate(scores: &Matrix, labels: &Matrix, config: &EvalConfig) -> Result<EvalReport> {
    check_matrix_pair(scores, labels)?;
    let (probs, logits) = match config.score_kind {
        ScoreKind::Logits => (scores.map(sigmoid_scalar), scores.clone()),
        ScoreKind::Probabilities => (scores.clone(), scores.map(probability_to_logit)),
    };
    let ap = mean_ap(scores, labels)?;
    let auc = mean_auc(scores, labels)?;
    let (mece_value, per_class_ece) = mece(&probs, labels, config.n_bins)?;
    let thresholds = match &config.class_thresholds {
        Some(t) => t.clone(),
        None => vec![config.threshold; scores.cols()],
    };
    let (f1, per_class_f1) = macro_f1(&probs, labels, &thresholds)?;
    let bce = bce_loss(&logits, labels)?.value;

    let mut skipped: Vec<usize> = ap.skipped.iter().chain(&auc.skipped).copied().collect();
    skipped.sort_unstable();
    skipped.dedup();

    Ok(EvalReport {
        map: ap.mean,
        mauc: auc.mean,
        mece: mece_value,
        bce,
        macro_f1: f1,
        per_class_ap: ap.per_class,
        per_class_auc: auc.per_class,
        per_class_ece,
        per_class_f1,
        skipped_classes: skipped,
    })
}
