use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mean_ap;
use crate::numerics::{permutation, Matrix, SeededRng};

/// Number of classes in the proxy-validation label space.
pub const PROXY_LABEL_SPACE: usize = 30;
/// Held-out classes per proxy group.
pub const HELDOUT_PER_GROUP: usize = 6;

/// Sentence used as the report of a sample without any positive class.
pub const NORMAL_STUDY: &str = "no acute cardiopulmonary abnormality";

/// Separator placed between concatenated class descriptions.
pub const DESCRIPTION_SEPARATOR: &str = "; ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProxyGroup {
    A,
    B,
    C,
}

impl fmt::Display for ProxyGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProxyGroup::A => "A",
            ProxyGroup::B => "B",
            ProxyGroup::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for ProxyGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ProxyGroup::A),
            "B" | "b" => Ok(ProxyGroup::B),
            "C" | "c" => Ok(ProxyGroup::C),
            other => Err(Error::invalid("proxy group", format!("{other:?} (expected A, B or C)"))),
        }
    }
}

/// One proxy-validation fold: six classes treated as unseen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyFoldSpec {
    pub group_id: ProxyGroup,
    pub heldout_classes: Vec<usize>,
    #[serde(default)]
    pub group_label: String,
}

impl ProxyFoldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heldout_classes.len() != HELDOUT_PER_GROUP {
            return Err(Error::invalid(
                "proxy fold",
                format!("group {} holds out {} classes, expected {HELDOUT_PER_GROUP}", self.group_id, self.heldout_classes.len()),
            ));
        }
        let mut sorted = self.heldout_classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.heldout_classes.len() {
            return Err(Error::invalid("proxy fold", format!("group {} repeats a class", self.group_id)));
        }
        if let Some(c) = self.heldout_classes.iter().find(|&&c| c >= PROXY_LABEL_SPACE) {
            return Err(Error::invalid("proxy fold", format!("class {c} outside [0, {PROXY_LABEL_SPACE})")));
        }
        Ok(())
    }
}

/// Checks three folds with distinct group ids and pairwise disjoint classes.
pub fn validate_folds(folds: &[ProxyFoldSpec]) -> Result<()> {
    if folds.len() != 3 {
        return Err(Error::invalid("proxy folds", format!("expected 3 folds, got {}", folds.len())));
    }
    for (i, a) in folds.iter().enumerate() {
        a.validate()?;
        for b in &folds[i + 1..] {
            if a.group_id == b.group_id {
                return Err(Error::invalid("proxy folds", format!("group {} appears twice", a.group_id)));
            }
            if let Some(c) = a.heldout_classes.iter().find(|c| b.heldout_classes.contains(c)) {
                return Err(Error::invalid(
                    "proxy folds",
                    format!("class {c} held out by both {} and {}", a.group_id, b.group_id),
                ));
            }
        }
    }
    Ok(())
}

/// Fold layout used by the synthetic benchmark: group B takes head classes,
/// group C tail classes, group A a spread across the range.
pub fn default_proxy_folds() -> Vec<ProxyFoldSpec> {
    vec![
        ProxyFoldSpec {
            group_id: ProxyGroup::A,
            heldout_classes: vec![2, 7, 11, 16, 21, 26],
            group_label: "structural anomalies and devices".into(),
        },
        ProxyFoldSpec {
            group_id: ProxyGroup::B,
            heldout_classes: vec![0, 1, 5, 10, 15, 20],
            group_label: "high prevalence diseases".into(),
        },
        ProxyFoldSpec {
            group_id: ProxyGroup::C,
            heldout_classes: vec![12, 19, 24, 27, 28, 29],
            group_label: "critical and rare conditions".into(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxySplit {
    pub group_id: ProxyGroup,
    /// Samples without a positive among the held-out classes.
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
    /// Classes the model may train on, ascending.
    pub retained_classes: Vec<usize>,
    pub heldout_classes: Vec<usize>,
}

impl ProxySplit {
    /// Training labels restricted to the retained classes.
    pub fn train_labels(&self, labels: &Matrix) -> Matrix {
        labels.select_rows(&self.train_indices).select_cols(&self.retained_classes)
    }
}

/// Removes every sample positive for a held-out class from training.
pub fn build_proxy_split(labels: &Matrix, fold: &ProxyFoldSpec) -> Result<ProxySplit> {
    fold.validate()?;
    if labels.cols() != PROXY_LABEL_SPACE {
        return Err(Error::shape("build_proxy_split classes", PROXY_LABEL_SPACE, labels.cols()));
    }
    crate::losses::check_binary_labels(labels)?;
    let train_indices: Vec<usize> = (0..labels.rows())
        .filter(|&i| fold.heldout_classes.iter().all(|&c| labels.get(i, c) == 0.0))
        .collect();
    if train_indices.is_empty() {
        return Err(Error::invalid(
            "proxy split",
            format!("group {} leaves no training samples", fold.group_id),
        ));
    }
    let mut heldout = fold.heldout_classes.clone();
    heldout.sort_unstable();
    Ok(ProxySplit {
        group_id: fold.group_id,
        train_indices,
        eval_indices: (0..labels.rows()).collect(),
        retained_classes: (0..labels.cols()).filter(|c| !heldout.contains(c)).collect(),
        heldout_classes: heldout,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group_id: ProxyGroup,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

/// Per-group mAP over the held-out classes and their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub groups: Vec<GroupResult>,
    pub average: f64,
}

impl fmt::Display for ProxyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            write!(f, "Group {}: {:.4}  ", g.group_id, g.map)?;
        }
        write!(f, "Avg: {:.4}", self.average)
    }
}

/// Evaluates each fold's scores (`n x 30`, one matrix per fold) on that
/// fold's held-out columns.
pub fn evaluate_proxy(fold_scores: &[Matrix], labels: &Matrix, folds: &[ProxyFoldSpec]) -> Result<ProxyReport> {
    validate_folds(folds)?;
    if fold_scores.len() != folds.len() {
        return Err(Error::shape("evaluate_proxy scores", folds.len(), fold_scores.len()));
    }
    let groups = folds
        .iter()
        .zip(fold_scores)
        .map(|(fold, scores)| {
            if scores.shape() != labels.shape() {
                return Err(Error::shape(
                    "evaluate_proxy",
                    format!("{:?}", labels.shape()),
                    format!("{:?}", scores.shape()),
                ));
            }
            let r = mean_ap(
                &scores.select_cols(&fold.heldout_classes),
                &labels.select_cols(&fold.heldout_classes),
            )?;
            Ok(GroupResult {
                group_id: fold.group_id,
                map: r.mean,
                per_class_ap: r.per_class,
                skipped_classes: r.skipped.iter().map(|&j| fold.heldout_classes[j]).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let average = groups.iter().map(|g| g.map).sum::<f64>() / groups.len() as f64;
    Ok(ProxyReport { groups, average })
}

/// Concatenates the descriptions of a sample's positive classes in a random
/// order, or returns [`NORMAL_STUDY`] when it has none.
pub fn shuffle_concat_descriptions(label_row: &[f64], descriptions: &[String], rng: &mut SeededRng) -> Result<String> {
    let positives: Vec<usize> = label_row
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == 1.0)
        .map(|(c, _)| c)
        .collect();
    if positives.is_empty() {
        return Ok(NORMAL_STUDY.to_string());
    }
    for &c in &positives {
        if descriptions.get(c).is_none_or(|d| d.trim().is_empty()) {
            return Err(Error::invalid("descriptions", format!("positive class {c} has no description")));
        }
    }
    let order = permutation(positives.len(), rng);
    Ok(order
        .into_iter()
        .map(|i| descriptions[positives[i]].as_str())
        .collect::<Vec<_>>()
        .join(DESCRIPTION_SEPARATOR))
}
