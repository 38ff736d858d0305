//! Zero-shot scoring from image and prompt embeddings: paired
//! positive/negative prompts, prompt ensembling, hybrid name + description
//! prompting and test-time augmentation over embedding views.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::ensemble::tta_average;
use crate::error::{Error, Result};
use crate::losses::{normalize_rows_lenient, sigmoid_scalar};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::numerics::{cosine_similarity, l2_normalize_rows, norm, Matrix, SeededRng};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Text used for the negated prompt when none is supplied.
pub fn default_negative(class_name: &str) -> String {
    format!("no {class_name}")
}

/// How prompt variants of one class are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Average the per-variant probabilities.
    #[default]
    Prob,
    /// Average the normalized prompt embeddings, renormalize, score once.
    Embed,
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" => Ok(EnsembleMode::Prob),
            "embed" => Ok(EnsembleMode::Embed),
            other => Err(Error::invalid("mode", format!("{other:?} (expected prob or embed)"))),
        }
    }
}

/// Prompts for one class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPrompts {
    pub names: Vec<String>,
    #[serde(default)]
    pub descriptions: Vec<String>,
    pub negatives: Vec<String>,
}

/// Per-class prompts in a fixed class order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    classes: Vec<String>,
    prompts: Vec<ClassPrompts>,
}

impl PromptSet {
    pub fn new(classes: Vec<String>, prompts: Vec<ClassPrompts>) -> Result<Self> {
        if classes.len() != prompts.len() {
            return Err(Error::shape("PromptSet", classes.len(), prompts.len()));
        }
        if classes.is_empty() {
            return Err(Error::EmptyInput);
        }
        for (name, p) in classes.iter().zip(&prompts) {
            if p.names.is_empty() {
                return Err(Error::invalid("prompt set", format!("class {name:?} has no name prompt")));
            }
            if p.negatives.is_empty() {
                return Err(Error::invalid("prompt set", format!("class {name:?} has no negative prompt")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::invalid("prompt set", format!("duplicate class {dup:?}")));
        }
        Ok(Self { classes, prompts })
    }

    /// Class name prompt, optional description and the default negation.
    pub fn from_names_and_descriptions(classes: &[String], descriptions: &[String]) -> Result<Self> {
        let prompts = classes
            .iter()
            .enumerate()
            .map(|(i, c)| ClassPrompts {
                names: vec![c.clone()],
                descriptions: descriptions.get(i).cloned().into_iter().collect(),
                negatives: vec![default_negative(c)],
            })
            .collect();
        Self::new(classes.to_vec(), prompts)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn prompts(&self) -> &[ClassPrompts] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Parses `{"classes": [...], "<class>": {"names": [...], "descriptions": [...], "negatives": [...]}, ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::invalid("prompt file", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::invalid("prompt file", "top level must be an object"))?;
        let classes: Vec<String> = serde_json::from_value(
            obj.get("classes")
                .cloned()
                .ok_or_else(|| Error::invalid("prompt file", "missing \"classes\" array"))?,
        )
        .map_err(|e| Error::invalid("prompt file", format!("classes: {e}")))?;
        for key in obj.keys() {
            if key != "classes" && !classes.contains(key) {
                return Err(Error::invalid("prompt file", format!("unknown key {key:?}")));
            }
        }
        let prompts = classes
            .iter()
            .map(|c| {
                let entry = obj
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::invalid("prompt file", format!("no prompts for class {c:?}")))?;
                serde_json::from_value::<ClassPrompts>(entry)
                    .map_err(|e| Error::invalid("prompt file", format!("class {c:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes, prompts)
    }

    pub fn to_json(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("classes".into(), serde_json::json!(self.classes));
        for (c, p) in self.classes.iter().zip(&self.prompts) {
            obj.insert(c.clone(), serde_json::to_value(p).expect("prompts serialize"));
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(obj)).expect("json")
    }

    /// Positive variants of each class: names followed by descriptions,
    /// exact duplicates dropped, each paired with the negative at the same
    /// index (cycling).
    pub fn hybrid_variants(&self) -> Vec<Vec<(String, String)>> {
        self.prompts
            .iter()
            .map(|p| {
                let mut positives: Vec<&String> = Vec::new();
                for s in p.names.iter().chain(&p.descriptions) {
                    if !positives.contains(&s) {
                        positives.push(s);
                    }
                }
                positives
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| (s.clone(), p.negatives[i % p.negatives.len()].clone()))
                    .collect()
            })
            .collect()
    }
}

/// L2-normalized embeddings with sample identifiers and the view they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub vectors: Matrix,
    pub view_tag: String,
    pub zero_rows: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, raw: &Matrix, view_tag: impl Into<String>) -> Result<Self> {
        if ids.len() != raw.rows() {
            return Err(Error::shape("EmbeddingSet ids", raw.rows(), ids.len()));
        }
        let n = l2_normalize_rows(raw)?;
        Ok(Self {
            ids,
            vectors: n.matrix,
            view_tag: view_tag.into(),
            zero_rows: n.zero_rows,
        })
    }

    /// Ids `0..n` as strings.
    pub fn with_index_ids(raw: &Matrix, view_tag: impl Into<String>) -> Result<Self> {
        Self::new((0..raw.rows()).map(|i| i.to_string()).collect(), raw, view_tag)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Maps text to a fixed-width vector.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;

    fn embed_all(&self, texts: &[String]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = texts.iter().map(|t| self.embed(t)).collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.dim()));
        }
        Matrix::from_rows(&rows)
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    SeededRng::new(seed).derive(fnv1a(token.as_bytes())).unit_vector(dim)
}

/// Output of [`embed_text_stub`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    /// No tokens, or tokens that cancelled out.
    pub is_zero: bool,
}

fn combine_tokens(mut tokens: Vec<String>, dim: usize, lookup: impl Fn(&str) -> Vec<f64>) -> TextEmbedding {
    // summing in sorted token order makes the result independent of word order
    tokens.sort_unstable();
    let mut sum = vec![0.0; dim];
    for t in &tokens {
        for (s, v) in sum.iter_mut().zip(lookup(t)) {
            *s += v;
        }
    }
    let n = norm(&sum);
    if n < crate::numerics::ZERO_NORM {
        return TextEmbedding {
            vector: vec![0.0; dim],
            is_zero: true,
        };
    }
    sum.iter_mut().for_each(|v| *v /= n);
    TextEmbedding {
        vector: sum,
        is_zero: false,
    }
}

/// Bag-of-words stand-in for a text encoder: every token maps to a seeded
/// pseudo-random unit vector; the text embedding is their normalized sum.
pub fn embed_text_stub(text: &str, dim: usize, seed: u64) -> Result<TextEmbedding> {
    if dim < 8 {
        return Err(Error::invalid("dim", format!("must be at least 8, got {dim}")));
    }
    Ok(combine_tokens(tokenize(text), dim, |t| token_vector(t, dim, seed)))
}

/// [`embed_text_stub`] with a per-token cache.
#[derive(Debug)]
pub struct StubEmbedder {
    dim: usize,
    seed: u64,
    cache: RwLock<HashMap<String, Vec<f64>>>,
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::invalid("dim", format!("must be at least 8, got {dim}")));
        }
        Ok(Self {
            dim,
            seed,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed_flagged(&self, text: &str) -> TextEmbedding {
        combine_tokens(tokenize(text), self.dim, |t| {
            if let Some(v) = self.cache.read().expect("cache lock").get(t) {
                return v.clone();
            }
            let v = token_vector(t, self.dim, self.seed);
            self.cache.write().expect("cache lock").insert(t.to_string(), v.clone());
            v
        })
    }
}

impl TextEmbedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        self.embed_flagged(text).vector
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("temperature", format!("must be positive, got {t}")))
    }
}

/// Two-way softmax between each class's positive and negative prompt:
/// `p = exp(s⁺/τ) / (exp(s⁺/τ) + exp(s⁻/τ))`.
pub fn class_probability_posneg(img: &Matrix, pos_txt: &Matrix, neg_txt: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    if pos_txt.shape() != neg_txt.shape() {
        return Err(Error::shape(
            "class_probability_posneg",
            format!("{:?}", pos_txt.shape()),
            format!("{:?}", neg_txt.shape()),
        ));
    }
    let sp = cosine_similarity(img, pos_txt)?.matrix;
    let sn = cosine_similarity(img, neg_txt)?.matrix;
    let mut out = Matrix::zeros(img.rows(), pos_txt.rows());
    for (o, (a, b)) in out.data_mut().iter_mut().zip(sp.as_slice().iter().zip(sn.as_slice())) {
        *o = sigmoid_scalar((a - b) / temperature);
    }
    Ok(out)
}

/// Alternative rule without negatives: `sigmoid(cos(img, prompt) / τ)`.
pub fn class_probability_sigmoid(img: &Matrix, pos_txt: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    let s = cosine_similarity(img, pos_txt)?.matrix;
    Ok(s.map(|v| sigmoid_scalar(v / temperature)))
}

/// Averages scores over the prompt variants of each class.
/// `variants[c]` is a list of (positive, negative) embedding pairs.
pub fn prompt_ensemble(
    img: &Matrix,
    variants: &[Vec<(Vec<f64>, Vec<f64>)>],
    temperature: f64,
    mode: EnsembleMode,
) -> Result<Matrix> {
    check_temperature(temperature)?;
    if variants.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = Matrix::zeros(img.rows(), variants.len());
    for (c, class_variants) in variants.iter().enumerate() {
        if class_variants.is_empty() {
            return Err(Error::invalid("prompt variants", format!("class {c} has none")));
        }
        let pos = Matrix::from_rows(&class_variants.iter().map(|(p, _)| p.as_slice()).collect::<Vec<_>>())?;
        let neg = Matrix::from_rows(&class_variants.iter().map(|(_, n)| n.as_slice()).collect::<Vec<_>>())?;
        let column = match mode {
            EnsembleMode::Prob => {
                let probs = class_probability_posneg(img, &pos, &neg, temperature)?;
                let v = class_variants.len() as f64;
                probs.iter_rows().map(|r| r.iter().sum::<f64>() / v).collect::<Vec<_>>()
            }
            EnsembleMode::Embed => {
                let mean_pos = mean_unit_row(&pos);
                let mean_neg = mean_unit_row(&neg);
                class_probability_posneg(img, &mean_pos, &mean_neg, temperature)?.column(0)
            }
        };
        for (r, v) in column.into_iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

fn mean_unit_row(m: &Matrix) -> Matrix {
    let unit = normalize_rows_lenient(m);
    let mut mean = vec![0.0; m.cols()];
    for r in unit.iter_rows() {
        for (a, b) in mean.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = norm(&mean);
    if n >= crate::numerics::ZERO_NORM {
        mean.iter_mut().for_each(|v| *v /= n);
    }
    Matrix::row_vector(&mean).expect("finite mean")
}

/// Embeds every (positive, negative) prompt pair of a prompt set.
pub fn embed_variants(prompt_set: &PromptSet, embedder: &dyn TextEmbedder) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    prompt_set
        .hybrid_variants()
        .into_iter()
        .map(|vs| vs.into_iter().map(|(p, n)| (embedder.embed(&p), embedder.embed(&n))).collect())
        .collect()
}

/// Scores every class using both its name prompts and its descriptions.
pub fn hybrid_prompt_scores(
    img: &Matrix,
    prompt_set: &PromptSet,
    embedder: &dyn TextEmbedder,
    temperature: f64,
    mode: EnsembleMode,
) -> Result<Matrix> {
    if img.cols() != embedder.dim() {
        return Err(Error::shape("hybrid_prompt_scores", embedder.dim(), img.cols()));
    }
    prompt_ensemble(img, &embed_variants(prompt_set, embedder), temperature, mode)
}

/// Uniform mean of per-view score matrices.
pub fn tta_scores(view_scores: &[Matrix]) -> Result<Matrix> {
    tta_average(view_scores)
}

pub fn zeroshot_evaluate(probabilities: &Matrix, labels: &Matrix) -> Result<EvalReport> {
    evaluate(probabilities, labels, &EvalConfig::probabilities())
}
