//! Projection-aware ensembling: weighted logit averaging, test-time
//! augmentation averaging, exhaustive simplex grid search for member
//! weights, a linear projection router and routed prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{bce_loss, sigmoid_scalar};
use crate::metrics::{mean_ap, mean_auc};
use crate::numerics::{dot, permutation, Matrix, SeededRng};

/// Width of the challenge label space produced by routed prediction.
pub const LABEL_SPACE: usize = 30;

/// Default simplex lattice spacing.
pub const DEFAULT_STEP: f64 = 0.05;

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Projection {
    #[serde(rename = "ap_pa")]
    ApPa,
    #[serde(rename = "lateral")]
    Lateral,
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Projection::ApPa => write!(f, "ap_pa"),
            Projection::Lateral => write!(f, "lateral"),
        }
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ap_pa" | "ap/pa" | "appa" | "frontal" => Ok(Projection::ApPa),
            "lateral" | "l" => Ok(Projection::Lateral),
            other => Err(Error::invalid("projection", format!("unknown tag {other:?}"))),
        }
    }
}

/// Grid-search objective, always maximized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Map,
    Mauc,
    NegBce,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(Objective::Map),
            "mauc" => Ok(Objective::Mauc),
            "neg_bce" => Ok(Objective::NegBce),
            other => Err(Error::invalid("objective", format!("{other:?} (expected map, mauc or neg_bce)"))),
        }
    }
}

impl Objective {
    /// Scores averaged logits against labels.
    pub fn score(&self, logits: &Matrix, labels: &Matrix) -> Result<f64> {
        match self {
            Objective::Map => Ok(mean_ap(logits, labels)?.mean),
            Objective::Mauc => Ok(mean_auc(logits, labels)?.mean),
            Objective::NegBce => Ok(-bce_loss(logits, labels)?.value),
        }
    }
}

/// Per-projection member weights plus the search settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleWeights {
    pub ap_pa: Option<Vec<f64>>,
    pub lateral: Option<Vec<f64>>,
    pub members: Vec<String>,
    pub step: f64,
    pub objective: Objective,
}

impl EnsembleWeights {
    pub fn for_projection(&self, p: Projection) -> Option<&[f64]> {
        match p {
            Projection::ApPa => self.ap_pa.as_deref(),
            Projection::Lateral => self.lateral.as_deref(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in [&self.ap_pa, &self.lateral].into_iter().flatten() {
            check_simplex(w)?;
            if !self.members.is_empty() && w.len() != self.members.len() {
                return Err(Error::shape("ensemble weights", self.members.len(), w.len()));
            }
        }
        Ok(())
    }
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::EmptyInput);
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("weights", "entries must be finite and nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid("weights", format!("sum to {sum}, expected 1")));
    }
    Ok(())
}

fn check_same_shape(members: &[Matrix]) -> Result<(usize, usize)> {
    let first = members.first().ok_or(Error::EmptyInput)?;
    for m in &members[1..] {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "ensemble members",
                format!("{:?}", first.shape()),
                format!("{:?}", m.shape()),
            ));
        }
    }
    Ok(first.shape())
}

/// Elementwise `Σ_m w_m · L_m`, accumulated in member order.
pub fn weighted_logit_average(member_logits: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    let (rows, cols) = check_same_shape(member_logits)?;
    if weights.len() != member_logits.len() {
        return Err(Error::shape("weighted_logit_average", member_logits.len(), weights.len()));
    }
    check_simplex(weights)?;
    let mut out = Matrix::zeros(rows, cols);
    for (m, &w) in member_logits.iter().zip(weights) {
        out.add_scaled(m, w);
    }
    Ok(out)
}

/// Uniform mean over test-time augmentation views.
pub fn tta_average(view_logits: &[Matrix]) -> Result<Matrix> {
    let (rows, cols) = check_same_shape(view_logits)?;
    let mut out = Matrix::zeros(rows, cols);
    for v in view_logits {
        out.add_scaled(v, 1.0);
    }
    Ok(out.scaled(1.0 / view_logits.len() as f64))
}

/// Number of lattice divisions for `step`, requiring `1/step` to be integral.
pub fn lattice_divisions(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid("step", format!("{step} not in (0, 1]")));
    }
    let n = (1.0 / step).round();
    if ((1.0 / step) - n).abs() > 1e-9 {
        return Err(Error::invalid("step", format!("{step} does not divide 1")));
    }
    Ok(n as usize)
}

/// Every composition of `divisions` into `parts` nonnegative integers, in
/// ascending lexicographic order.
pub fn simplex_lattice(parts: usize, divisions: usize) -> Vec<Vec<usize>> {
    fn fill(prefix: &mut Vec<usize>, remaining: usize, parts_left: usize, out: &mut Vec<Vec<usize>>) {
        if parts_left == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for c in 0..=remaining {
            prefix.push(c);
            fill(prefix, remaining - c, parts_left - 1, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        fill(&mut Vec::with_capacity(parts), divisions, parts, &mut out);
    }
    out
}

/// Result of a one-projection grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub weights: Vec<f64>,
    pub score: f64,
    pub evaluated: usize,
}

/// Exhaustive search over the simplex lattice with spacing `step`. Returns
/// the first maximizer in lexicographic lattice order.
pub fn grid_search_weights(
    member_logits: &[Matrix],
    labels: &Matrix,
    step: f64,
    objective: Objective,
) -> Result<GridSearchResult> {
    let (rows, cols) = check_same_shape(member_logits)?;
    if labels.shape() != (rows, cols) {
        return Err(Error::shape(
            "grid_search_weights labels",
            format!("{:?}", (rows, cols)),
            format!("{:?}", labels.shape()),
        ));
    }
    let divisions = lattice_divisions(step)?;
    let lattice = simplex_lattice(member_logits.len(), divisions);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for point in &lattice {
        let w: Vec<f64> = point.iter().map(|&c| c as f64 / divisions as f64).collect();
        let avg = weighted_logit_average(member_logits, &w)?;
        let score = objective.score(&avg, labels)?;
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((w, score));
        }
    }
    let (weights, score) = best.ok_or(Error::EmptyInput)?;
    Ok(GridSearchResult {
        weights,
        score,
        evaluated: lattice.len(),
    })
}

/// Logistic projection classifier standing in for an image router.
/// Probabilities at or above `threshold` route to AP/PA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearRouter {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    pub projections: Vec<Projection>,
    pub probabilities: Vec<f64>,
}

pub fn predict_projection(features: &Matrix, router: &LinearRouter) -> Result<RouterOutput> {
    if features.cols() != router.weights.len() {
        return Err(Error::shape("predict_projection", router.weights.len(), features.cols()));
    }
    if !(router.threshold > 0.0 && router.threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("{} not in (0, 1)", router.threshold)));
    }
    let probabilities: Vec<f64> = features
        .iter_rows()
        .map(|x| sigmoid_scalar(dot(x, &router.weights) + router.bias))
        .collect();
    let projections = probabilities
        .iter()
        .map(|&p| if p >= router.threshold { Projection::ApPa } else { Projection::Lateral })
        .collect();
    Ok(RouterOutput {
        projections,
        probabilities,
    })
}

pub fn router_accuracy(features: &Matrix, labels: &[Projection], router: &LinearRouter) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::shape("router_accuracy", features.rows(), labels.len()));
    }
    let out = predict_projection(features, router)?;
    let correct = out.projections.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len() as f64)
}

const ROUTER_BATCH: usize = 32;

/// Logistic regression by mini-batch gradient descent from a zero start.
/// Sample order per epoch comes from `seed`.
pub fn train_linear_router(
    features: &Matrix,
    labels: &[Projection],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LinearRouter> {
    if labels.len() != features.rows() {
        return Err(Error::shape("train_linear_router", features.rows(), labels.len()));
    }
    if features.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let n_ap = labels.iter().filter(|&&p| p == Projection::ApPa).count();
    if n_ap == 0 || n_ap == labels.len() {
        return Err(Error::invalid("projection labels", "only one projection present"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("lr", format!("must be positive, got {lr}")));
    }

    let d = features.cols();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut rng = SeededRng::new(seed);
    let targets: Vec<f64> = labels.iter().map(|&p| (p == Projection::ApPa) as u8 as f64).collect();
    let mut grad_w = vec![0.0; d];
    for _ in 0..epochs {
        let order = permutation(features.rows(), &mut rng);
        for batch in order.chunks(ROUTER_BATCH) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &i in batch {
                let x = features.row(i);
                let err = sigmoid_scalar(dot(x, &w) + b) - targets[i];
                for (g, &xi) in grad_w.iter_mut().zip(x) {
                    *g += err * xi;
                }
                grad_b += err;
            }
            let scale = lr / batch.len() as f64;
            for (wi, g) in w.iter_mut().zip(&grad_w) {
                *wi -= scale * g;
            }
            b -= scale * grad_b;
        }
    }
    Ok(LinearRouter {
        weights: w,
        bias: b,
        threshold: 0.5,
    })
}

/// Member logits for both projection branches, rows aligned by sample.
#[derive(Debug, Clone)]
pub struct BranchLogits {
    pub ap_pa: Vec<Matrix>,
    pub lateral: Vec<Matrix>,
}

impl BranchLogits {
    pub fn members(&self, p: Projection) -> &[Matrix] {
        match p {
            Projection::ApPa => &self.ap_pa,
            Projection::Lateral => &self.lateral,
        }
    }
}

/// Fused prediction: each sample's row is the weighted member average of the
/// branch its routing decision selects.
pub fn routed_predict(branches: &BranchLogits, decisions: &[Projection], weights: &EnsembleWeights) -> Result<Matrix> {
    let n = decisions.len();
    for p in [Projection::ApPa, Projection::Lateral] {
        let members = branches.members(p);
        let needed = decisions.contains(&p);
        let w = weights.for_projection(p);
        if needed && w.is_none() {
            return Err(Error::invalid("weights", format!("no weights for projection {p}")));
        }
        if members.is_empty() {
            if needed {
                return Err(Error::invalid("branch logits", format!("no members for projection {p}")));
            }
            continue;
        }
        let (rows, cols) = check_same_shape(members)?;
        if cols != LABEL_SPACE {
            return Err(Error::shape("routed_predict classes", LABEL_SPACE, cols));
        }
        if rows != n {
            return Err(Error::shape("routed_predict rows", n, rows));
        }
        if let Some(w) = w {
            check_simplex(w)?;
            if w.len() != members.len() {
                return Err(Error::shape("routed_predict members", members.len(), w.len()));
            }
        }
    }

    let mut out = Matrix::zeros(n, LABEL_SPACE);
    for (i, &p) in decisions.iter().enumerate() {
        let members = branches.members(p);
        let w = weights.for_projection(p).expect("checked above");
        let row = out.row_mut(i);
        for (m, &wm) in members.iter().zip(w) {
            for (o, &v) in row.iter_mut().zip(m.row(i)) {
                *o += wm * v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Matrix {
        Matrix::filled(3, 4, v)
    }

    #[test]
    fn weighted_average_examples() {
        let a = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        assert_eq!(weighted_logit_average(std::slice::from_ref(&a), &[1.0]).unwrap(), a);
        let same = weighted_logit_average(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(same, a);
        let mixed = weighted_logit_average(&[constant(1.0), constant(2.0), constant(3.0)], &[0.4, 0.4, 0.2]).unwrap();
        assert!(mixed.as_slice().iter().all(|v| (v - 1.8).abs() < 1e-12));
    }

    #[test]
    fn weighted_average_rejects_off_simplex() {
        assert!(weighted_logit_average(&[constant(1.0), constant(2.0)], &[0.5, 0.6]).is_err());
        assert!(weighted_logit_average(&[constant(1.0), Matrix::zeros(2, 2)], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn tta_examples() {
        let v = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        assert_eq!(tta_average(std::slice::from_ref(&v)).unwrap(), v);
        let z = tta_average(&[v.clone(), v.scaled(-1.0)]).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
        assert!(tta_average(&[]).is_err());
    }

    #[test]
    fn lattice_enumeration() {
        assert_eq!(simplex_lattice(2, 2), vec![vec![0, 2], vec![1, 1], vec![2, 0]]);
        // C(20 + 2, 2) points for three members at step 0.05
        assert_eq!(simplex_lattice(3, 20).len(), 231);
        assert!(lattice_divisions(0.3).is_err());
        assert_eq!(lattice_divisions(0.05).unwrap(), 20);
    }

    #[test]
    fn grid_search_step_half_evaluates_three_points() {
        let labels = Matrix::from_rows(&[[1.0], [0.0], [1.0]]).unwrap();
        let a = Matrix::from_rows(&[[0.9], [0.1], [0.8]]).unwrap();
        let b = Matrix::from_rows(&[[0.1], [0.9], [0.2]]).unwrap();
        let r = grid_search_weights(&[a, b], &labels, 0.5, Objective::Map).unwrap();
        assert_eq!(r.evaluated, 3);
        // (0, 1) -> 7/12, (0.5, 0.5) ties every score -> 5/6, (1, 0) -> 1
        assert_eq!(r.weights, vec![1.0, 0.0]);
        assert_eq!(r.score, 1.0);
    }

    #[test]
    fn router_boundary_and_sign_flip() {
        let router = LinearRouter { weights: vec![0.0, 0.0], bias: 0.0, threshold: 0.5 };
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let out = predict_projection(&x, &router).unwrap();
        assert_eq!(out.probabilities, vec![0.5]);
        assert_eq!(out.projections, vec![Projection::ApPa]);

        let r = LinearRouter { weights: vec![1.0, -0.5], bias: 0.1, threshold: 0.5 };
        let flipped = LinearRouter { weights: vec![-1.0, 0.5], bias: -0.1, threshold: 0.5 };
        let x = Matrix::from_rows(&[[1.0, 0.0], [-2.0, 1.0], [0.3, 3.0]]).unwrap();
        let a = predict_projection(&x, &r).unwrap().projections;
        let b = predict_projection(&x, &flipped).unwrap().projections;
        assert!(a.iter().zip(&b).all(|(p, q)| p != q));
        assert!(predict_projection(&Matrix::zeros(1, 3), &r).is_err());
    }

    #[test]
    fn router_training_separable_and_deterministic() {
        let mut rng = SeededRng::new(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let ap = i % 2 == 0;
            let cx = if ap { 2.0 } else { -2.0 };
            rows.push([cx + 0.5 * rng.normal(), 0.5 * rng.normal()]);
            labels.push(if ap { Projection::ApPa } else { Projection::Lateral });
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let r1 = train_linear_router(&x, &labels, 20, 0.5, 9).unwrap();
        let r2 = train_linear_router(&x, &labels, 20, 0.5, 9).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(router_accuracy(&x, &labels, &r1).unwrap(), 1.0);

        let flipped: Vec<Projection> = labels
            .iter()
            .map(|p| if *p == Projection::ApPa { Projection::Lateral } else { Projection::ApPa })
            .collect();
        let rf = train_linear_router(&x, &flipped, 20, 0.5, 9).unwrap();
        assert_eq!(
            router_accuracy(&x, &flipped, &rf).unwrap(),
            router_accuracy(&x, &labels, &r1).unwrap()
        );
        assert!(train_linear_router(&x, &[Projection::ApPa; 200], 5, 0.5, 1).is_err());
    }

    #[test]
    fn routed_predict_requires_thirty_classes_and_weights() {
        let m = Matrix::zeros(2, 5);
        let branches = BranchLogits { ap_pa: vec![m.clone()], lateral: vec![m] };
        let weights = EnsembleWeights {
            ap_pa: Some(vec![1.0]),
            lateral: Some(vec![1.0]),
            members: vec!["a".into()],
            step: 0.05,
            objective: Objective::Map,
        };
        assert!(routed_predict(&branches, &[Projection::ApPa, Projection::Lateral], &weights).is_err());

        let m = Matrix::filled(2, LABEL_SPACE, 1.0);
        let branches = BranchLogits { ap_pa: vec![m.clone()], lateral: vec![m] };
        let missing = EnsembleWeights { lateral: None, ..weights.clone() };
        assert!(routed_predict(&branches, &[Projection::Lateral, Projection::ApPa], &missing).is_err());
        assert!(routed_predict(&branches, &[Projection::ApPa, Projection::ApPa], &missing).is_ok());
    }

    #[test]
    fn weights_json_layout() {
        let w = EnsembleWeights {
            ap_pa: Some(vec![0.4, 0.4, 0.2]),
            lateral: Some(vec![0.45, 0.45, 0.1]),
            members: vec!["pcam".into(), "swin".into(), "cait".into()],
            step: 0.05,
            objective: Objective::Map,
        };
        let json = serde_json::to_value(&w).unwrap();
        assert_eq!(json["objective"], "map");
        assert_eq!(json["ap_pa"][2], 0.2);
        let back: EnsembleWeights = serde_json::from_value(json).unwrap();
        assert_eq!(back, w);
        back.validate().unwrap();
    }
}
