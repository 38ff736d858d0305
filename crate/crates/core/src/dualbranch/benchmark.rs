use serde::Serialize;

use super::model::DualBranchModel;
use super::optim::TrainConfig;
use super::proxy::{build_proxy_split, default_proxy_folds, validate_folds, ProxyFoldSpec};
use super::train::{train, validation_map, TrainingSet, ValidationSet};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::synthdata::{gen_zeroshot_benchmark, SynthSpec};
use crate::zeroshot::{StubEmbedder, TextEmbedder};

const STREAM_INIT: u64 = 7;
const STREAM_EMBEDDER: u64 = 8;

/// Synthetic proxy-validation benchmark: for each fold, train on the retained
/// classes and score zero-shot mAP on the held-out ones after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkConfig {
    pub spec: SynthSpec,
    pub text_dim: usize,
    pub joint_dim: usize,
    pub train: TrainConfig,
    pub folds: Vec<ProxyFoldSpec>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            spec: SynthSpec::default(),
            text_dim: 64,
            joint_dim: 32,
            train: TrainConfig {
                lr_max: 3e-3,
                ..TrainConfig::default()
            },
            folds: default_proxy_folds(),
        }
    }
}

impl BenchmarkConfig {
    /// Same settings with the data and training seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.spec.seed = seed;
        c.train.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub alpha: f64,
    /// Held-out mAP per epoch, averaged over folds.
    pub curve: Vec<f64>,
    /// Held-out mAP per fold at the best epoch.
    pub per_fold: Vec<f64>,
    pub best_epoch: usize,
    pub best_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    /// Held-out mAP of the untrained model, averaged over folds.
    pub baseline: f64,
    pub arms: Vec<ArmResult>,
}

impl BenchmarkReport {
    pub fn arm(&self, alpha: f64) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.alpha == alpha)
    }
}

/// Runs one arm per `alpha` from the same initial model and data.
pub fn run_proxy_benchmark(cfg: &BenchmarkConfig, alphas: &[f64]) -> Result<BenchmarkReport> {
    validate_folds(&cfg.folds)?;
    if cfg.train.epochs == 0 {
        return Err(Error::invalid("epochs", "benchmark needs at least one epoch"));
    }
    let bench = gen_zeroshot_benchmark(&cfg.spec)?;
    let root = SeededRng::new(cfg.spec.seed);
    let embedder = StubEmbedder::new(cfg.text_dim, root.derive(STREAM_EMBEDDER).seed())?;
    let class_text = embedder.embed_all(&bench.descriptions)?;
    let init = DualBranchModel::random(
        cfg.spec.feature_dim,
        cfg.text_dim,
        cfg.joint_dim,
        root.derive(STREAM_INIT).seed(),
    )?;
    let labels = &bench.data.labels;
    let features = &bench.data.features;

    struct Fold {
        train_img: Matrix,
        train_labels: Matrix,
        descriptions: Vec<String>,
        class_text: Matrix,
        val_labels: Matrix,
        val_text: Matrix,
    }
    let folds = cfg
        .folds
        .iter()
        .map(|fold| {
            let split = build_proxy_split(labels, fold)?;
            Ok(Fold {
                train_img: features.select_rows(&split.train_indices),
                train_labels: split.train_labels(labels),
                descriptions: split.retained_classes.iter().map(|&c| bench.descriptions[c].clone()).collect(),
                class_text: class_text.select_rows(&split.retained_classes),
                val_labels: labels.select_rows(&split.eval_indices).select_cols(&split.heldout_classes),
                val_text: class_text.select_rows(&split.heldout_classes),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let baseline = folds
        .iter()
        .map(|f| {
            validation_map(
                &init,
                &ValidationSet { img_features: features, labels: &f.val_labels, class_text: &f.val_text },
            )
        })
        .sum::<Result<f64>>()?
        / folds.len() as f64;

    let mut arms = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let tc = TrainConfig { alpha, ..cfg.train.clone() };
        let mut fold_curves = Vec::with_capacity(folds.len());
        for f in &folds {
            let data = TrainingSet {
                img_features: &f.train_img,
                labels: &f.train_labels,
                descriptions: &f.descriptions,
                class_text: &f.class_text,
                embedder: &embedder as &dyn TextEmbedder,
            };
            let val = ValidationSet { img_features: features, labels: &f.val_labels, class_text: &f.val_text };
            let out = train(&init, &data, Some(&val), &tc)?;
            fold_curves.push(out.trace.epochs.iter().map(|r| r.val_map.expect("validation set given")).collect::<Vec<_>>());
        }
        let epochs = fold_curves[0].len();
        let curve: Vec<f64> = (0..epochs)
            .map(|e| fold_curves.iter().map(|c| c[e]).sum::<f64>() / fold_curves.len() as f64)
            .collect();
        let best = (0..epochs).fold(0, |b, e| if curve[e] > curve[b] { e } else { b });
        log::info!("seed {} alpha {alpha}: best epoch {} mAP {:.4}", cfg.spec.seed, best + 1, curve[best]);
        arms.push(ArmResult {
            alpha,
            per_fold: fold_curves.iter().map(|c| c[best]).collect(),
            best_epoch: best + 1,
            best_map: curve[best],
            curve,
        });
    }
    Ok(BenchmarkReport { seed: cfg.spec.seed, baseline, arms })
}
