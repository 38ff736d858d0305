use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use cxrlt_core::dataio::{
    self, read_checkpoint, read_emb1, read_labels_csv, read_scores_csv, scores_csv_string, labels_csv_string,
    write_checkpoint, LabelTable, RunConfig,
};
use cxrlt_core::dualbranch::{
    build_proxy_split, default_proxy_folds, train, validate_folds, DualBranchModel, ProxyFoldSpec, ProxyGroup,
    ProxySplit, TrainingSet, ValidationSet,
};
use cxrlt_core::ensemble::{
    grid_search_weights, predict_projection, routed_predict, train_linear_router, BranchLogits, EnsembleWeights,
    LinearRouter, Objective, Projection,
};
use cxrlt_core::metrics::{evaluate, mece, reliability_bins, EvalConfig, ReliabilityBin, ScoreKind};
use cxrlt_core::numerics::{l2_normalize_rows, Matrix, SeededRng};
use cxrlt_core::synthdata::{
    gen_projection_split, gen_zeroshot_benchmark, gen_longtail, ProjectionSplitSpec, SynthSpec,
};
use cxrlt_core::zeroshot::{hybrid_prompt_scores, ClassPrompts, EnsembleMode, PromptSet, StubEmbedder, TextEmbedder};
use serde::Serialize;

use crate::{
    CalibrateArgs, Command, EnsembleCommand, EnsembleSearchArgs, MetricsArgs, ModeArg, ObjectiveArg, PromptSource,
    ProxySplitArgs, RouteArgs, SynthArgs, SynthKind, TrainDualArgs, TrainRouterArgs, ZeroshotArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Inputs that parse but do not fit together.
    #[error("{0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Input { path: String, source: cxrlt_core::Error },
    #[error("{0}")]
    Data(#[from] cxrlt_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input<T>(path: &Path, r: cxrlt_core::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Input { path: path.display().to_string(), source })
}

fn read_text(path: &Path) -> Result<String> {
    input(path, fs::read_to_string(path).map_err(Into::into))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Input {
        path: path.display().to_string(),
        source: cxrlt_core::Error::Format(dataio::FormatError::Parse { line: e.line() as u64, message: e.to_string() }),
    })
}

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(p) => input(p, fs::write(p, content).map_err(Into::into)),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Metrics(a) => metrics(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Ensemble(EnsembleCommand::Search(a)) => ensemble_search(a),
        Command::TrainRouter(a) => train_router(a),
        Command::Route(a) => route(a),
        Command::Zeroshot(a) => zeroshot(a),
        Command::TrainDual(a) => train_dual(a),
        Command::ProxySplit(a) => proxy_split(a),
        Command::Synth(a) => synth(a),
    }
}

/// Reorders `scores` to the id and class order of `labels`.
fn align(scores: &LabelTable, labels: &LabelTable, what: &str) -> Result<Matrix> {
    let col_of: HashMap<&str, usize> = scores.class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let row_of: HashMap<&str, usize> = scores.ids.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    if scores.ids.len() != labels.ids.len() || scores.class_names.len() != labels.class_names.len() {
        return Err(CliError::Mismatch(format!(
            "{what}: {} rows x {} classes do not match labels {} x {}",
            scores.ids.len(),
            scores.class_names.len(),
            labels.ids.len(),
            labels.class_names.len()
        )));
    }
    let cols = labels
        .class_names
        .iter()
        .map(|c| col_of.get(c.as_str()).copied().ok_or_else(|| CliError::Mismatch(format!("{what}: no column {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let rows = labels
        .ids
        .iter()
        .map(|id| row_of.get(id.as_str()).copied().ok_or_else(|| CliError::Mismatch(format!("{what}: no row {id:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.values.select_rows(&rows).select_cols(&cols))
}

fn select_columns(labels: &LabelTable, wanted: &[String]) -> Result<Vec<usize>> {
    if wanted.is_empty() {
        return Ok((0..labels.class_names.len()).collect());
    }
    wanted
        .iter()
        .map(|w| {
            labels
                .class_names
                .iter()
                .position(|c| c == w)
                .ok_or_else(|| CliError::Usage(format!("unknown class {w:?} in --columns")))
        })
        .collect()
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let labels = input(&a.labels, read_labels_csv(&a.labels))?;
    let scores = input(&a.scores, read_scores_csv(&a.scores))?;
    let aligned = align(&scores, &labels, &a.scores.display().to_string())?;
    let cols = select_columns(&labels, &a.columns)?;
    let cfg = EvalConfig {
        n_bins: a.bins,
        threshold: a.threshold,
        class_thresholds: None,
        score_kind: if a.probabilities { ScoreKind::Probabilities } else { ScoreKind::Logits },
    };
    let report = evaluate(&aligned.select_cols(&cols), &labels.values.select_cols(&cols), &cfg)?;
    emit(a.output.out.as_deref(), &to_json(&report))
}

#[derive(Serialize)]
struct ClassCalibration {
    class: String,
    ece: f64,
    bins: Vec<ReliabilityBin>,
}

#[derive(Serialize)]
struct CalibrationReport {
    n_bins: usize,
    mece: f64,
    classes: Vec<ClassCalibration>,
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let labels = input(&a.labels, read_labels_csv(&a.labels))?;
    let scores = input(&a.scores, read_scores_csv(&a.scores))?;
    let mut probs = align(&scores, &labels, &a.scores.display().to_string())?;
    if a.logits {
        probs = cxrlt_core::losses::sigmoid(&probs);
    }
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let (m, per_class) = mece(&probs, &labels.values, a.bins)?;
    let classes = (0..probs.cols())
        .map(|c| {
            Ok(ClassCalibration {
                class: labels.class_names[c].clone(),
                ece: per_class[c],
                bins: reliability_bins(&probs.column(c), &labels.values.column(c), a.bins)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    emit(a.output.out.as_deref(), &to_json(&CalibrationReport { n_bins: a.bins, mece: m, classes }))
}

fn objective(o: ObjectiveArg) -> Objective {
    match o {
        ObjectiveArg::Map => Objective::Map,
        ObjectiveArg::Mauc => Objective::Mauc,
        ObjectiveArg::NegBce => Objective::NegBce,
    }
}

fn load_members(paths: &[PathBuf], labels: &LabelTable) -> Result<Vec<Matrix>> {
    paths
        .iter()
        .map(|p| {
            let t = input(p, read_scores_csv(p))?;
            align(&t, labels, &p.display().to_string())
        })
        .collect()
}

fn member_name(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn ensemble_search(a: EnsembleSearchArgs) -> Result<()> {
    cxrlt_core::ensemble::lattice_divisions(a.step).map_err(|e| CliError::Usage(format!("--step: {e}")))?;
    let obj = objective(a.objective);
    let labels = input(&a.labels, read_labels_csv(&a.labels))?;
    let members = load_members(&a.members, &labels)?;
    let ap = grid_search_weights(&members, &labels.values, a.step, obj)?;
    log::info!("AP/PA: {} lattice points, best {:.6}", ap.evaluated, ap.score);
    let lateral = match (&a.lateral_labels, a.lateral_members.is_empty()) {
        (None, true) => None,
        (Some(lp), false) => {
            if a.lateral_members.len() != a.members.len() {
                return Err(CliError::Usage("--lateral-members must list as many files as --members".into()));
            }
            let ll = input(lp, read_labels_csv(lp))?;
            let lm = load_members(&a.lateral_members, &ll)?;
            Some(grid_search_weights(&lm, &ll.values, a.step, obj)?.weights)
        }
        _ => return Err(CliError::Usage("--lateral-members and --lateral-labels go together".into())),
    };
    let weights = EnsembleWeights {
        ap_pa: Some(ap.weights),
        lateral,
        members: a.members.iter().map(|p| member_name(p)).collect(),
        step: a.step,
        objective: obj,
    };
    emit(a.output.out.as_deref(), &to_json(&weights))
}

fn projection_labels(table: &LabelTable, path: &Path) -> Result<Vec<Projection>> {
    if table.class_names != ["lateral"] {
        return Err(CliError::Usage(format!("{}: expected header `id,lateral`", path.display())));
    }
    Ok(table
        .values
        .as_slice()
        .iter()
        .map(|&v| if v == 1.0 { Projection::Lateral } else { Projection::ApPa })
        .collect())
}

fn train_router(a: TrainRouterArgs) -> Result<()> {
    let features = input(&a.features, read_emb1(&a.features))?;
    let table = input(&a.projections, read_labels_csv(&a.projections))?;
    let labels = projection_labels(&table, &a.projections)?;
    let router = train_linear_router(&features, &labels, a.epochs, a.lr, a.seed)?;
    log::info!("router training accuracy {:.4}", cxrlt_core::ensemble::router_accuracy(&features, &labels, &router)?);
    emit(a.output.out.as_deref(), &to_json(&router))
}

fn route(a: RouteArgs) -> Result<()> {
    let features = input(&a.features, read_emb1(&a.features))?;
    let router: LinearRouter = parse_json(&a.router)?;
    let weights: EnsembleWeights = parse_json(&a.weights)?;
    input(&a.weights, weights.validate())?;
    let first = a
        .ap_pa
        .first()
        .or(a.lateral.first())
        .ok_or_else(|| CliError::Usage("give at least one --ap-pa or --lateral member".into()))?;
    let reference = input(first, read_scores_csv(first))?;
    let load = |paths: &[PathBuf]| -> Result<Vec<Matrix>> {
        paths
            .iter()
            .map(|p| {
                let t = input(p, read_scores_csv(p))?;
                align(&t, &reference, &p.display().to_string())
            })
            .collect()
    };
    let branches = BranchLogits { ap_pa: load(&a.ap_pa)?, lateral: load(&a.lateral)? };
    if features.rows() != reference.ids.len() {
        return Err(CliError::Mismatch(format!(
            "{}: {} feature rows but {} logit rows",
            a.features.display(),
            features.rows(),
            reference.ids.len()
        )));
    }
    let decisions = predict_projection(&features, &router)?.projections;
    let fused = routed_predict(&branches, &decisions, &weights)?;
    let table = LabelTable::new(reference.ids.clone(), reference.class_names.clone(), fused)?;
    emit(a.output.out.as_deref(), &scores_csv_string(&table)?)
}

/// Text embedder followed by a checkpoint's text projection.
struct ProjectedEmbedder<'a> {
    inner: &'a dyn TextEmbedder,
    w_txt: &'a Matrix,
}

impl TextEmbedder for ProjectedEmbedder<'_> {
    fn dim(&self) -> usize {
        self.w_txt.cols()
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let raw = Matrix::row_vector(&self.inner.embed(text)).expect("finite embedding");
        let z = raw.matmul(self.w_txt).expect("embedder matches checkpoint");
        l2_normalize_rows(&z).expect("one row").matrix.into_vec()
    }
}

fn restrict_prompts(set: PromptSet, source: PromptSource) -> Result<PromptSet> {
    let classes = set.classes().to_vec();
    let prompts = set
        .prompts()
        .iter()
        .zip(&classes)
        .map(|(p, c)| match source {
            PromptSource::Hybrid => Ok(p.clone()),
            PromptSource::Names => Ok(ClassPrompts { descriptions: vec![], ..p.clone() }),
            PromptSource::Descriptions => {
                if p.descriptions.is_empty() {
                    return Err(CliError::Usage(format!("class {c:?} has no descriptions")));
                }
                Ok(ClassPrompts { names: p.descriptions.clone(), descriptions: vec![], negatives: p.negatives.clone() })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSet::new(classes, prompts)?)
}

fn zeroshot(a: ZeroshotArgs) -> Result<()> {
    let images = input(&a.images, read_emb1(&a.images))?;
    let set = input(&a.prompts, PromptSet::from_json(&read_text(&a.prompts)?))?;
    let set = restrict_prompts(set, a.source)?;
    let mode = match a.mode {
        ModeArg::Prob => EnsembleMode::Prob,
        ModeArg::Embed => EnsembleMode::Embed,
    };
    let scores = match &a.checkpoint {
        Some(path) => {
            let model = input(path, read_checkpoint(path))?;
            if images.cols() != model.img_dim() {
                return Err(CliError::Mismatch(format!(
                    "{}: {} columns, checkpoint expects {}",
                    a.images.display(),
                    images.cols(),
                    model.img_dim()
                )));
            }
            let embedder = StubEmbedder::new(model.txt_dim(), a.embed_seed)?;
            let projected = ProjectedEmbedder { inner: &embedder, w_txt: &model.w_txt };
            let img = model.project_images(&images)?;
            hybrid_prompt_scores(&img, &set, &projected, a.temperature.unwrap_or(model.temperature()), mode)?
        }
        None => {
            let embedder = StubEmbedder::new(images.cols(), a.embed_seed)?;
            let img = l2_normalize_rows(&images)?.matrix;
            let t = a.temperature.unwrap_or(cxrlt_core::zeroshot::DEFAULT_TEMPERATURE);
            hybrid_prompt_scores(&img, &set, &embedder, t, mode)?
        }
    };
    let table = LabelTable::with_index_ids(set.classes().to_vec(), scores)?;
    emit(a.output.out.as_deref(), &scores_csv_string(&table)?)
}

fn train_dual(a: TrainDualArgs) -> Result<()> {
    let features = input(&a.features, read_emb1(&a.features))?;
    let labels = input(&a.labels, read_labels_csv(&a.labels))?;
    let descriptions: Vec<String> = parse_json(&a.descriptions)?;
    if descriptions.len() != labels.class_names.len() {
        return Err(CliError::Mismatch(format!(
            "{}: {} descriptions for {} label columns",
            a.descriptions.display(),
            descriptions.len(),
            labels.class_names.len()
        )));
    }
    if features.rows() != labels.ids.len() {
        return Err(CliError::Mismatch(format!(
            "{} has {} rows but {} has {}",
            a.features.display(),
            features.rows(),
            a.labels.display(),
            labels.ids.len()
        )));
    }
    let run_cfg = match &a.config {
        Some(p) => input(p, RunConfig::load(p))?,
        None => RunConfig::default(),
    };
    let mut cfg = run_cfg.train_config();
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.lr_max = a.lr.unwrap_or(cfg.lr_max);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let embedder = StubEmbedder::new(a.text_dim, a.embed_seed).map_err(|e| CliError::Usage(format!("--text-dim: {e}")))?;
    let class_text = embedder.embed_all(&descriptions)?;
    let split: Option<ProxySplit> = a.split.as_deref().map(parse_json).transpose()?;

    let (train_img, train_labels, train_desc, train_text, val_labels, val_text);
    match &split {
        Some(s) => {
            let n = features.rows();
            let k = labels.class_names.len();
            if s.train_indices.iter().chain(&s.eval_indices).any(|&i| i >= n)
                || s.retained_classes.iter().chain(&s.heldout_classes).any(|&c| c >= k)
            {
                return Err(CliError::Mismatch("split indices exceed the data".into()));
            }
            let leaked = s
                .train_indices
                .iter()
                .any(|&i| s.heldout_classes.iter().any(|&c| labels.values.get(i, c) != 0.0));
            if leaked {
                return Err(CliError::Mismatch("split trains on samples positive for held-out classes".into()));
            }
            train_img = features.select_rows(&s.train_indices);
            train_labels = s.train_labels(&labels.values);
            train_desc = s.retained_classes.iter().map(|&c| descriptions[c].clone()).collect::<Vec<_>>();
            train_text = class_text.select_rows(&s.retained_classes);
            val_labels = Some(labels.values.select_rows(&s.eval_indices).select_cols(&s.heldout_classes));
            val_text = Some(class_text.select_rows(&s.heldout_classes));
        }
        None => {
            train_img = features.clone();
            train_labels = labels.values.clone();
            train_desc = descriptions.clone();
            train_text = class_text.clone();
            val_labels = None;
            val_text = None;
        }
    }
    let val_img = split.as_ref().map(|s| features.select_rows(&s.eval_indices));
    let val = match (&val_img, &val_labels, &val_text) {
        (Some(img), Some(l), Some(t)) => Some(ValidationSet { img_features: img, labels: l, class_text: t }),
        _ => None,
    };
    let data = TrainingSet {
        img_features: &train_img,
        labels: &train_labels,
        descriptions: &train_desc,
        class_text: &train_text,
        embedder: &embedder,
    };
    let init = DualBranchModel::random(features.cols(), a.text_dim, run_cfg.training.joint_dim, cfg.seed)?;
    let out = train(&init, &data, val.as_ref(), &cfg)?;
    if let Some((e, m)) = out.trace.best_epoch() {
        log::info!("best held-out mAP {m:.4} at epoch {e}");
    }
    input(&a.checkpoint, write_checkpoint(&a.checkpoint, &out.model))?;
    if let Some(p) = &a.ema_checkpoint {
        input(p, write_checkpoint(p, &out.ema))?;
    }
    if let Some(p) = &a.trace {
        input(p, fs::write(p, out.trace.to_csv()).map_err(Into::into))?;
    }
    Ok(())
}

fn proxy_split(a: ProxySplitArgs) -> Result<()> {
    let labels = input(&a.labels, read_labels_csv(&a.labels))?;
    let folds: Vec<ProxyFoldSpec> = match &a.folds {
        Some(p) => parse_json(p)?,
        None => default_proxy_folds(),
    };
    if let Some(p) = &a.folds {
        input(p, validate_folds(&folds))?;
    }
    let group = a
        .group
        .as_deref()
        .map(|g| g.parse::<ProxyGroup>().map_err(|e| CliError::Usage(format!("--group: {e}"))))
        .transpose()?;
    let splits = folds
        .iter()
        .filter(|f| group.is_none_or(|g| g == f.group_id))
        .map(|f| input(&a.labels, build_proxy_split(&labels.values, f)))
        .collect::<Result<Vec<_>>>()?;
    let json = match (group, splits.as_slice()) {
        (Some(_), [one]) => to_json(one),
        (Some(g), _) => return Err(CliError::Usage(format!("no fold for group {g}"))),
        (None, all) => to_json(&all),
    };
    emit(a.output.out.as_deref(), &json)
}

fn write_file(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    input(&p, fs::write(&p, bytes).map_err(Into::into))
}

fn index_table(class_names: Vec<String>, values: Matrix) -> Result<LabelTable> {
    Ok(LabelTable::with_index_ids(class_names, values)?)
}

fn projection_table(projections: &[Projection]) -> Result<String> {
    let v = projections.iter().map(|&p| if p == Projection::Lateral { 1.0 } else { 0.0 }).collect();
    let table = index_table(vec!["lateral".into()], Matrix::new(projections.len(), 1, v)?)?;
    Ok(labels_csv_string(&table)?)
}

const STREAM_MEMBERS: u64 = 9;

/// Member logits `strength · (2y − 1) + N(0, 1)`; members are stronger on
/// their own branch's projection and weaken with member index.
fn member_logits(labels: &Matrix, projections: &[Projection], branch: Projection, member: usize, rng: &mut SeededRng) -> Matrix {
    let mut data = Vec::with_capacity(labels.as_slice().len());
    for (i, row) in labels.iter_rows().enumerate() {
        let strength = if projections[i] == branch { 2.0 - 0.4 * member as f64 } else { 0.5 };
        for &y in row {
            data.push(strength * (2.0 * y - 1.0) + rng.normal());
        }
    }
    Matrix::new(labels.rows(), labels.cols(), data).expect("finite logits")
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_samples: a.n,
        n_classes: a.classes,
        zipf_exponent: a.zipf,
        feature_dim: a.dim,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    input(&a.out_dir, fs::create_dir_all(&a.out_dir).map_err(Into::into))?;
    let dir = a.out_dir.as_path();
    let names = spec.class_names();
    match a.kind {
        SynthKind::Longtail => {
            let d = gen_longtail(&spec)?;
            write_file(dir, "features.emb1", dataio::encode_emb1(&d.features)?)?;
            write_file(dir, "labels.csv", labels_csv_string(&index_table(names, d.labels)?)?)?;
        }
        SynthKind::Projection | SynthKind::Members => {
            let d = gen_projection_split(&spec, &ProjectionSplitSpec::default())?;
            write_file(dir, "features.emb1", dataio::encode_emb1(&d.features)?)?;
            write_file(dir, "projections.csv", projection_table(&d.projections)?)?;
            if a.kind == SynthKind::Members {
                let root = SeededRng::new(a.seed).derive(STREAM_MEMBERS);
                for (b, branch) in [Projection::ApPa, Projection::Lateral].into_iter().enumerate() {
                    for m in 0..a.members {
                        let mut rng = root.derive((b * 1000 + m) as u64);
                        let logits = member_logits(&d.labels, &d.projections, branch, m, &mut rng);
                        let table = index_table(names.clone(), logits)?;
                        write_file(dir, &format!("{branch}_{m}.csv"), scores_csv_string(&table)?)?;
                    }
                }
            }
            write_file(dir, "labels.csv", labels_csv_string(&index_table(names, d.labels)?)?)?;
        }
        SynthKind::Zeroshot => {
            let b = gen_zeroshot_benchmark(&spec)?;
            write_file(dir, "features.emb1", dataio::encode_emb1(&b.data.features)?)?;
            write_file(dir, "labels.csv", labels_csv_string(&index_table(names.clone(), b.data.labels)?)?)?;
            write_file(dir, "descriptions.json", to_json(&b.descriptions))?;
            let prompts = PromptSet::from_names_and_descriptions(&names, &b.descriptions)?;
            write_file(dir, "prompts.json", prompts.to_json() + "\n")?;
            if spec.n_classes == cxrlt_core::dualbranch::PROXY_LABEL_SPACE {
                write_file(dir, "folds.json", to_json(&default_proxy_folds()))?;
            }
        }
    }
    Ok(())
}
