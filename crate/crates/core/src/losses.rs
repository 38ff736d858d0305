//! Asymmetric loss, binary cross-entropy, symmetric image-text contrastive
//! loss and their weighted combination, each with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, ZERO_NORM};

/// Focusing exponents and probability clamp of the asymmetric loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub prob_eps: f64,
}

impl Default for AslParams {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            prob_eps: 1e-7,
        }
    }
}

impl AslParams {
    pub fn new(gamma_pos: f64, gamma_neg: f64) -> Result<Self> {
        let p = Self {
            gamma_pos,
            gamma_neg,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    /// Plain cross-entropy: both exponents zero.
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_pos.is_finite()) {
            return Err(Error::invalid("gamma_pos", format!("must be >= 0, got {}", self.gamma_pos)));
        }
        if !(self.gamma_neg >= 0.0 && self.gamma_neg.is_finite()) {
            return Err(Error::invalid("gamma_neg", format!("must be >= 0, got {}", self.gamma_neg)));
        }
        if !(self.prob_eps > 0.0 && self.prob_eps < 0.5) {
            return Err(Error::invalid("prob_eps", format!("must be in (0, 0.5), got {}", self.prob_eps)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient blocks.
///
/// Block order is fixed per producer: [`asl_loss`] and [`bce_loss`] return
/// one block (the logits); [`contrastive_loss`] returns image embeddings,
/// text embeddings and a 1x1 temperature block.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Matrix>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self {
            value,
            grads: Vec::new(),
        }
    }

    /// First gradient block.
    pub fn grad(&self) -> &Matrix {
        &self.grads[0]
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest double below 1.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function kept strictly inside (0, 1).
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid_raw(x).clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

pub fn sigmoid(logits: &Matrix) -> Matrix {
    logits.map(sigmoid_scalar)
}

pub(crate) fn check_binary_labels(labels: &Matrix) -> Result<()> {
    for r in 0..labels.rows() {
        for (c, &v) in labels.row(r).iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryLabel { row: r, col: c, value: v });
            }
        }
    }
    Ok(())
}

/// Loss and d(loss)/d(logit) for one entry, before averaging.
fn asl_entry(x: f64, positive: bool, params: &AslParams) -> (f64, f64) {
    let eps = params.prob_eps;
    let p = sigmoid_raw(x);
    let q = sigmoid_raw(-x);
    let (pc, qc, ln_p, ln_q, clamped) = if p < eps {
        (eps, 1.0 - eps, eps.ln(), (1.0 - eps).ln(), true)
    } else if q < eps {
        (1.0 - eps, eps, (1.0 - eps).ln(), eps.ln(), true)
    } else {
        (p, q, -softplus(-x), -softplus(x), false)
    };
    if positive {
        let g = params.gamma_pos;
        let w = qc.powf(g);
        let loss = -w * ln_p;
        let grad = if clamped { 0.0 } else { w * (g * pc * ln_p - qc) };
        (loss, grad)
    } else {
        let g = params.gamma_neg;
        let w = pc.powf(g);
        let loss = -w * ln_q;
        let grad = if clamped { 0.0 } else { w * (pc - g * qc * ln_q) };
        (loss, grad)
    }
}

/// Asymmetric loss averaged over classes, then over samples. The gradient is
/// taken with respect to the logits of the clamped expression.
pub fn asl_loss(logits: &Matrix, labels: &Matrix, params: &AslParams) -> Result<LossValue> {
    params.validate()?;
    if logits.shape() != labels.shape() {
        return Err(Error::shape(
            "asl_loss",
            format!("{:?}", logits.shape()),
            format!("{:?}", labels.shape()),
        ));
    }
    let (n, k) = logits.shape();
    if n == 0 || k == 0 {
        return Err(Error::EmptyInput);
    }
    check_binary_labels(labels)?;

    let scale = 1.0 / (n as f64 * k as f64);
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..k {
            let (l, g) = asl_entry(logits.get(i, j), labels.get(i, j) == 1.0, params);
            row_sum += l;
            grad.set(i, j, g * scale);
        }
        total += row_sum / k as f64;
    }
    Ok(LossValue {
        value: total / n as f64,
        grads: vec![grad],
    })
}

/// Binary cross-entropy on logits; the asymmetric loss with both exponents at 0.
pub fn bce_loss(logits: &Matrix, labels: &Matrix) -> Result<LossValue> {
    asl_loss(logits, labels, &AslParams::bce())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Backpropagates through `u = a / ‖a‖` for each row.
pub(crate) fn normalize_backward(raw: &Matrix, unit: &Matrix, grad_unit: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let n = norm(raw.row(r));
        if n < ZERO_NORM {
            continue;
        }
        let u = unit.row(r);
        let g = grad_unit.row(r);
        let proj = dot(g, u);
        for (o, (&gi, &ui)) in out.row_mut(r).iter_mut().zip(g.iter().zip(u)) {
            *o = (gi - proj * ui) / n;
        }
    }
    out
}

pub(crate) fn normalize_rows_lenient(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n >= ZERO_NORM {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Symmetric cross-entropy over the temperature-scaled cosine-similarity
/// matrix with matching pairs on the diagonal.
///
/// Inputs are row-normalized internally; gradients flow back through the
/// normalization. Gradient blocks: `[img, txt, temperature (1x1)]`.
pub fn contrastive_loss(img_emb: &Matrix, txt_emb: &Matrix, temperature: f64) -> Result<LossValue> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature", format!("must be positive, got {temperature}")));
    }
    if img_emb.shape() != txt_emb.shape() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{:?}", img_emb.shape()),
            format!("{:?}", txt_emb.shape()),
        ));
    }
    let b = img_emb.rows();
    if b == 0 || img_emb.cols() == 0 {
        return Err(Error::EmptyInput);
    }

    let u = normalize_rows_lenient(img_emb);
    let v = normalize_rows_lenient(txt_emb);
    let s = u.matmul_t(&v)?.scaled(1.0 / temperature);

    let bf = b as f64;
    let mut loss_rows = 0.0;
    let mut loss_cols = 0.0;
    // dL/dS
    let mut g = Matrix::zeros(b, b);
    for i in 0..b {
        let lse = log_sum_exp(s.row(i).iter().copied());
        loss_rows += lse - s.get(i, i);
        for j in 0..b {
            let p = (s.get(i, j) - lse).exp();
            g.set(i, j, p / (2.0 * bf));
        }
    }
    for j in 0..b {
        let lse = log_sum_exp((0..b).map(|i| s.get(i, j)));
        loss_cols += lse - s.get(j, j);
        for i in 0..b {
            let p = (s.get(i, j) - lse).exp();
            g.set(i, j, g.get(i, j) + p / (2.0 * bf));
        }
    }
    for i in 0..b {
        g.set(i, i, g.get(i, i) - 1.0 / bf);
    }
    let value = 0.5 * (loss_rows / bf + loss_cols / bf);

    let grad_u = g.matmul(&v)?.scaled(1.0 / temperature);
    let grad_v = g.t_matmul(&u)?.scaled(1.0 / temperature);
    let grad_img = normalize_backward(img_emb, &u, &grad_u);
    let grad_txt = normalize_backward(txt_emb, &v, &grad_v);
    let grad_temp = -dot(g.as_slice(), s.as_slice()) / temperature;

    Ok(LossValue {
        value: value.max(0.0),
        grads: vec![grad_img, grad_txt, Matrix::scalar(grad_temp)],
    })
}

/// `con + alpha · asl`, combining gradient blocks linearly when both carry
/// gradients with respect to the same parameters.
pub fn total_loss(con: &LossValue, asl: &LossValue, alpha: f64) -> Result<LossValue> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be >= 0, got {alpha}")));
    }
    let grads = match (con.grads.is_empty(), asl.grads.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) if alpha == 0.0 => con.grads.clone(),
        _ => {
            if con.grads.len() != asl.grads.len()
                || con.grads.iter().zip(&asl.grads).any(|(a, b)| a.shape() != b.shape())
            {
                return Err(Error::shape(
                    "total_loss",
                    "matching gradient blocks",
                    "blocks of different number or shape",
                ));
            }
            con.grads
                .iter()
                .zip(&asl.grads)
                .map(|(c, a)| {
                    let mut out = c.clone();
                    out.add_scaled(a, alpha);
                    out
                })
                .collect()
        }
    };
    Ok(LossValue {
        value: con.value + alpha * asl.value,
        grads,
    })
}
