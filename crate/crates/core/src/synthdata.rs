//! Deterministic synthetic data: long-tailed multi-label features, a
//! projection-shifted variant for routing experiments, and per-class
//! template descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, permutation, Matrix, SeededRng};
use crate::zeroshot::embed_text_stub;
use crate::ensemble::Projection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_classes: usize,
    pub zipf_exponent: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            n_classes: 30,
            zipf_exponent: 1.2,
            feature_dim: 32,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_classes == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("synth spec", "counts must be positive"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::invalid("zipf_exponent", format!("{} must be >= 0", self.zipf_exponent)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", format!("{} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        class_names(self.n_classes)
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("class_{k:02}")).collect()
}

/// `π_k = 0.5 · (k + 1)^(−s)`; the head class sits at 0.5.
pub fn zipf_prevalence(n_classes: usize, s: f64) -> Vec<f64> {
    (0..n_classes).map(|k| 0.5 * ((k + 1) as f64).powf(-s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongTailData {
    pub features: Matrix,
    pub labels: Matrix,
    pub class_prototypes: Matrix,
    pub background_prototype: Vec<f64>,
    pub prevalence: Vec<f64>,
}

// independent sub-streams of the spec seed
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_PROJECTION: u64 = 4;
const STREAM_OFFSET: u64 = 5;
const STREAM_GROUNDING: u64 = 6;

fn draw_labels(spec: &SynthSpec, prevalence: &[f64]) -> Result<Matrix> {
    let (n, k) = (spec.n_samples, spec.n_classes);
    if n < k {
        return Err(Error::invalid(
            "n_samples",
            format!("{n} samples cannot give each of {k} classes a positive"),
        ));
    }
    let mut rng = SeededRng::new(spec.seed).derive(STREAM_LABELS);
    let mut labels = Matrix::zeros(n, k);
    for i in 0..n {
        for (c, &p) in prevalence.iter().enumerate() {
            if rng.bernoulli(p) {
                labels.set(i, c, 1.0);
            }
        }
    }
    // inject one positive into each empty class, using distinct samples
    let mut donors = permutation(n, &mut rng).into_iter();
    for c in 0..k {
        if (0..n).all(|i| labels.get(i, c) == 0.0) {
            let i = donors.next().expect("n >= k");
            labels.set(i, c, 1.0);
        }
    }
    Ok(labels)
}

fn clean_feature(labels: &[f64], prototypes: &Matrix, background: &[f64]) -> Vec<f64> {
    let positives: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == 1.0).map(|(c, _)| c).collect();
    match positives.as_slice() {
        [] => background.to_vec(),
        [c] => prototypes.row(*c).to_vec(),
        many => {
            let mut sum = vec![0.0; prototypes.cols()];
            for &c in many {
                for (s, v) in sum.iter_mut().zip(prototypes.row(c)) {
                    *s += v;
                }
            }
            let n = norm(&sum);
            if n > 0.0 {
                sum.iter_mut().for_each(|v| *v /= n);
            }
            sum
        }
    }
}

fn assemble(
    spec: &SynthSpec,
    prototypes: Matrix,
    background: Vec<f64>,
    offsets: Option<(&[bool], &[f64])>,
) -> Result<LongTailData> {
    spec.validate()?;
    if prototypes.shape() != (spec.n_classes, spec.feature_dim) || background.len() != spec.feature_dim {
        return Err(Error::shape(
            "prototypes",
            format!("{}x{}", spec.n_classes, spec.feature_dim),
            format!("{}x{}", prototypes.rows(), prototypes.cols()),
        ));
    }
    let prevalence = zipf_prevalence(spec.n_classes, spec.zipf_exponent);
    let labels = draw_labels(spec, &prevalence)?;
    let mut noise = SeededRng::new(spec.seed).derive(STREAM_NOISE);
    let mut data = Vec::with_capacity(spec.n_samples * spec.feature_dim);
    for i in 0..spec.n_samples {
        let mut f = clean_feature(labels.row(i), &prototypes, &background);
        if let Some((shifted, offset)) = offsets {
            if shifted[i] {
                f.iter_mut().zip(offset).for_each(|(a, b)| *a += b);
            }
        }
        if spec.noise_sigma > 0.0 {
            f.iter_mut().for_each(|v| *v += spec.noise_sigma * noise.normal());
        }
        data.extend(f);
    }
    Ok(LongTailData {
        features: Matrix::new(spec.n_samples, spec.feature_dim, data)?,
        labels,
        class_prototypes: prototypes,
        background_prototype: background,
        prevalence,
    })
}

fn random_prototypes(spec: &SynthSpec) -> (Matrix, Vec<f64>) {
    let mut rng = SeededRng::new(spec.seed).derive(STREAM_PROTOTYPES);
    let rows: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| rng.unit_vector(spec.feature_dim)).collect();
    let background = rng.unit_vector(spec.feature_dim);
    (Matrix::from_rows(&rows).expect("unit vectors"), background)
}

/// Long-tailed multi-label features around random unit class prototypes.
///
/// Labels are independent Bernoulli draws with Zipf prevalence; classes left
/// without positives receive one injected positive. A sample's clean
/// feature is its single positive prototype, the normalized sum of several,
/// or a background prototype when it has none; Gaussian noise of scale
/// `noise_sigma` is added per coordinate.
pub fn gen_longtail(spec: &SynthSpec) -> Result<LongTailData> {
    spec.validate()?;
    let (prototypes, background) = random_prototypes(spec);
    assemble(spec, prototypes, background, None)
}

/// Same label/noise process with caller-supplied prototypes.
pub fn gen_longtail_with_prototypes(spec: &SynthSpec, prototypes: Matrix, background: Vec<f64>) -> Result<LongTailData> {
    assemble(spec, prototypes, background, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSplitSpec {
    pub lateral_fraction: f64,
    pub offset_magnitude: f64,
}

impl Default for ProjectionSplitSpec {
    fn default() -> Self {
        Self {
            lateral_fraction: 0.2,
            offset_magnitude: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionData {
    pub features: Matrix,
    pub projections: Vec<Projection>,
    pub labels: Matrix,
}

/// Long-tailed data where a minority of samples are lateral views, shifted
/// by a fixed offset vector before noise is added.
pub fn gen_projection_split(spec: &SynthSpec, split: &ProjectionSplitSpec) -> Result<ProjectionData> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&split.lateral_fraction) {
        return Err(Error::invalid("lateral_fraction", format!("{} not in [0, 1]", split.lateral_fraction)));
    }
    let n = spec.n_samples;
    let root = SeededRng::new(spec.seed);
    let n_lateral = (split.lateral_fraction * n as f64).round() as usize;
    let mut lateral = vec![false; n];
    for i in permutation(n, &mut root.derive(STREAM_PROJECTION)).into_iter().take(n_lateral) {
        lateral[i] = true;
    }
    let offset: Vec<f64> = root
        .derive(STREAM_OFFSET)
        .unit_vector(spec.feature_dim)
        .into_iter()
        .map(|v| v * split.offset_magnitude)
        .collect();
    let (prototypes, background) = random_prototypes(spec);
    let data = assemble(spec, prototypes, background, Some((&lateral, &offset)))?;
    Ok(ProjectionData {
        features: data.features,
        projections: lateral
            .iter()
            .map(|&l| if l { Projection::Lateral } else { Projection::ApPa })
            .collect(),
        labels: data.labels,
    })
}

const MODIFIERS: &[&str] = &[
    "diffuse", "focal", "patchy", "bilateral", "subtle", "marked", "chronic", "acute", "nodular", "linear",
];
const FINDINGS: &[&str] = &[
    "opacity", "lucency", "thickening", "density", "enlargement", "calcification", "consolidation",
    "fluid", "deformity", "nodule", "collapse", "shadowing",
];
const LOCATIONS: &[&str] = &[
    "upper lobe", "lower lobe", "hilar region", "costophrenic angle", "mediastinum", "apex",
    "cardiac border", "pleural space", "vertebral body", "rib margin",
];

/// Pairwise-distinct "modifier finding location" descriptions, one per class.
pub fn gen_descriptions(n_classes: usize, seed: u64) -> Vec<String> {
    let combos = MODIFIERS.len() * FINDINGS.len() * LOCATIONS.len();
    let order = permutation(combos, &mut SeededRng::new(seed));
    (0..n_classes)
        .map(|k| {
            let idx = order[k % combos];
            let m = MODIFIERS[idx % MODIFIERS.len()];
            let f = FINDINGS[(idx / MODIFIERS.len()) % FINDINGS.len()];
            let l = LOCATIONS[idx / (MODIFIERS.len() * FINDINGS.len())];
            if k < combos {
                format!("{m} {f} {l}")
            } else {
                format!("{m} {f} {l} pattern {}", k / combos)
            }
        })
        .collect()
}

/// Synthetic zero-shot world in which image prototypes are built from the
/// same words as the class descriptions, so that a map learned on some
/// classes can transfer to the others.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotBenchmark {
    pub spec: SynthSpec,
    pub class_names: Vec<String>,
    pub descriptions: Vec<String>,
    pub data: LongTailData,
}

/// Image prototype of each class: a bag-of-words embedding of its
/// description using an image-side token dictionary seeded independently of
/// any text embedder.
pub fn grounded_prototypes(descriptions: &[String], dim: usize, seed: u64) -> Result<Matrix> {
    let rows = descriptions
        .iter()
        .map(|d| embed_text_stub(d, dim, seed).map(|e| e.vector))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

pub fn gen_zeroshot_benchmark(spec: &SynthSpec) -> Result<ZeroShotBenchmark> {
    spec.validate()?;
    let descriptions = gen_descriptions(spec.n_classes, spec.seed);
    let grounding = SeededRng::new(spec.seed).derive(STREAM_GROUNDING);
    let prototypes = grounded_prototypes(&descriptions, spec.feature_dim, grounding.seed())?;
    let background = SeededRng::new(spec.seed).derive(STREAM_PROTOTYPES).unit_vector(spec.feature_dim);
    let data = assemble(spec, prototypes, background, None)?;
    Ok(ZeroShotBenchmark {
        spec: spec.clone(),
        class_names: spec.class_names(),
        descriptions,
        data,
    })
}
