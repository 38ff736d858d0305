use std::fmt::Write as _;

use serde::Serialize;

use super::model::{forward, DualBranchModel};
use super::optim::{adamw_step, ema_update, scheduled_lr, AdamState, AdamW, TrainConfig};
use super::proxy::shuffle_concat_descriptions;
use crate::dataio::format_score;
use crate::error::{Error, Result};
use crate::metrics::mean_ap;
use crate::numerics::{permutation, Matrix, SeededRng};
use crate::zeroshot::TextEmbedder;

const STREAM_ORDER: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Training inputs. Report text for each sample is synthesized every epoch
/// from the descriptions of its positive classes.
pub struct TrainingSet<'a> {
    pub img_features: &'a Matrix,
    pub labels: &'a Matrix,
    pub descriptions: &'a [String],
    /// Text features of each class, `K x d_txt`, aligned with `labels` columns.
    pub class_text: &'a Matrix,
    pub embedder: &'a dyn TextEmbedder,
}

/// Data scored by zero-shot mAP after every epoch.
pub struct ValidationSet<'a> {
    pub img_features: &'a Matrix,
    pub labels: &'a Matrix,
    pub class_text: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub loss_total: f64,
    pub loss_con: f64,
    pub loss_asl: f64,
}

/// Epoch means of the step losses. `epoch` counts from 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_con: f64,
    pub loss_asl: f64,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Trace {
    /// Validation mAP of the initial model.
    pub baseline_val_map: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl Trace {
    /// `epoch,lr,loss_total,loss_con,loss_asl,val_map`, one row per epoch;
    /// `val_map` is empty without validation data.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss_total,loss_con,loss_asl,val_map\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                format_score(r.lr),
                format_score(r.loss_total),
                format_score(r.loss_con),
                format_score(r.loss_asl),
                r.val_map.map(format_score).unwrap_or_default()
            );
        }
        out
    }

    /// Highest validation mAP over epochs and the epoch reaching it first.
    pub fn best_epoch(&self) -> Option<(usize, f64)> {
        self.epochs
            .iter()
            .filter_map(|r| r.val_map.map(|m| (r.epoch, m)))
            .fold(None, |best, (e, m)| match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((e, m)),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: DualBranchModel,
    pub ema: DualBranchModel,
    pub trace: Trace,
}

/// Zero-shot mAP of `model` on `val`, over classes with positives.
pub fn validation_map(model: &DualBranchModel, val: &ValidationSet<'_>) -> Result<f64> {
    let logits = model.zero_shot_logits(val.img_features, val.class_text)?;
    Ok(mean_ap(&logits, val.labels)?.mean)
}

fn check_inputs(model: &DualBranchModel, data: &TrainingSet<'_>, val: Option<&ValidationSet<'_>>) -> Result<()> {
    let n = data.img_features.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if data.labels.rows() != n {
        return Err(Error::shape("train labels", n, data.labels.rows()));
    }
    if data.descriptions.len() != data.labels.cols() {
        return Err(Error::shape("train descriptions", data.labels.cols(), data.descriptions.len()));
    }
    if data.class_text.rows() != data.labels.cols() {
        return Err(Error::shape("train class text", data.labels.cols(), data.class_text.rows()));
    }
    if data.embedder.dim() != model.txt_dim() {
        return Err(Error::shape("embedder dim", model.txt_dim(), data.embedder.dim()));
    }
    crate::losses::check_binary_labels(data.labels)?;
    if let Some(v) = val {
        if v.labels.rows() != v.img_features.rows() || v.labels.cols() != v.class_text.rows() {
            return Err(Error::shape(
                "validation set",
                format!("{} x {}", v.img_features.rows(), v.class_text.rows()),
                format!("{:?}", v.labels.shape()),
            ));
        }
    }
    Ok(())
}

/// Minibatch AdamW on the combined loss with a per-epoch cosine schedule and
/// an EMA shadow updated after every step.
///
/// Weight decay applies to the projection matrices only. With
/// `freeze_temperature` the log-temperature never changes. Validation mAP in
/// the trace is measured on the live weights.
pub fn train(
    init: &DualBranchModel,
    data: &TrainingSet<'_>,
    val: Option<&ValidationSet<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    init.validate()?;
    check_inputs(init, data, val)?;

    let mut trace = Trace {
        baseline_val_map: val.map(|v| validation_map(init, v)).transpose()?,
        ..Trace::default()
    };
    let n = data.img_features.rows();
    let n_matrix = init.w_img.as_slice().len() + init.w_txt.as_slice().len();
    let mut params = init.to_vec();
    let mut shadow = params.clone();
    let mut state_mat = AdamState::new(n_matrix);
    let mut state_scalar = AdamState::new(3);
    let opt_mat = cfg.adamw();
    let opt_scalar = AdamW { weight_decay: 0.0, ..opt_mat };
    let root = SeededRng::new(cfg.seed);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(epoch, cfg);
        let order = permutation(n, &mut root.derive(STREAM_ORDER).derive(epoch as u64));
        let mut shuffle_rng = root.derive(STREAM_SHUFFLE).derive(epoch as u64);
        let (mut sum_total, mut sum_con, mut sum_asl, mut batches) = (0.0, 0.0, 0.0, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            let model = init.with_params(&params)?;
            let img = data.img_features.select_rows(batch);
            let labels = data.labels.select_rows(batch);
            let texts = batch
                .iter()
                .map(|&i| shuffle_concat_descriptions(data.labels.row(i), data.descriptions, &mut shuffle_rng))
                .collect::<Result<Vec<_>>>()?;
            let txt = data.embedder.embed_all(&texts)?;
            let out = forward(&model, &img, &txt, data.class_text, &labels, cfg.alpha, &cfg.asl)?;
            let mut grad = out.flat_gradient();
            if cfg.freeze_temperature {
                grad[n_matrix] = 0.0;
            }
            let frozen_tau = params[n_matrix];
            let (p_mat, p_scalar) = params.split_at_mut(n_matrix);
            let (g_mat, g_scalar) = grad.split_at(n_matrix);
            adamw_step(p_mat, g_mat, &mut state_mat, lr, &opt_mat);
            adamw_step(p_scalar, g_scalar, &mut state_scalar, lr, &opt_scalar);
            if cfg.freeze_temperature {
                params[n_matrix] = frozen_tau;
            }
            if let Some(i) = params.iter().position(|p| !p.is_finite()) {
                return Err(Error::NonFinite(i));
            }
            ema_update(&mut shadow, &params, cfg.ema_decay);
            if cfg.freeze_temperature {
                shadow[n_matrix] = frozen_tau;
            }

            step += 1;
            trace.steps.push(StepRecord {
                epoch: epoch + 1,
                step,
                lr,
                alpha: cfg.alpha,
                loss_total: out.loss.value,
                loss_con: out.loss_con,
                loss_asl: out.loss_asl,
            });
            sum_total += out.loss.value;
            sum_con += out.loss_con;
            sum_asl += out.loss_asl;
            batches += 1;
        }

        let current = init.with_params(&params)?;
        let b = batches as f64;
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss_total: sum_total / b,
            loss_con: sum_con / b,
            loss_asl: sum_asl / b,
            val_map: val.map(|v| validation_map(&current, v)).transpose()?,
        });
        log::debug!("epoch {} lr {lr:.3e} loss {:.5}", epoch + 1, sum_total / b);
    }

    Ok(TrainOutput {
        model: init.with_params(&params)?,
        ema: init.with_params(&shadow)?,
        trace,
    })
}
