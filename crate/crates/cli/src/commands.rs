use crate::config::{RunConfig, SEED_ENV};
use crate::GlobalArgs;
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use tractshape::autodiff::AutodiffError;
use tractshape::geometry::FiberCluster;
use tractshape::lasso::{downstream_csv, downstream_eval, downstream_table, subject_scores, FeatureMatrix, LassoError};
use tractshape::model::{predict, Checkpoint, ModelError};
use tractshape::oracle::compute_shape_vector;
use tractshape::sampler::random_sample;
use tractshape::synth::generate_dataset;
use tractshape::trainer::{
    self, eval_sample_seed, history_csv, load_labeled, split_dataset, MetricsError, ShapeTable, TrainConfig,
    TrainError,
};
use tractshape::tract_io::{read_manifest, read_shape_csv, read_tck, write_shape_csv, DatasetManifest, ShapeRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn code(self) -> u8 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

type CliResult<T = ()> = Result<T, CliError>;

fn fail(kind: ErrorKind, message: impl Display) -> CliError {
    CliError {
        kind,
        message: message.to_string(),
    }
}

fn data(e: impl Display) -> CliError {
    fail(ErrorKind::Data, e)
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        ModelError::Autodiff(AutodiffError::NonFiniteValue { .. }) => ErrorKind::Numeric,
        ModelError::InvalidConfig(_) => ErrorKind::Usage,
        ModelError::ZeroVariance { .. } => ErrorKind::Numeric,
        _ => ErrorKind::Data,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::NonFiniteLoss { .. } | TrainError::Metrics(MetricsError::ZeroVariance(_)) => ErrorKind::Numeric,
            TrainError::InvalidConfig(_) => ErrorKind::Usage,
            TrainError::Model(m) => model_kind(m),
            _ => ErrorKind::Data,
        };
        fail(kind, e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        fail(model_kind(&e), e)
    }
}

impl From<LassoError> for CliError {
    fn from(e: LassoError) -> Self {
        let kind = match e {
            LassoError::Metrics(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        };
        fail(kind, e)
    }
}

/// Loads the config file, applies the seed and thread count.
pub fn prepare(global: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| fail(ErrorKind::Usage, e))?,
        None => RunConfig::default(),
    };
    cfg.resolve_seed(global.seed, std::env::var(SEED_ENV).ok())
        .map_err(|e| fail(ErrorKind::Usage, e))?;
    if let Some(n) = global.threads {
        if n == 0 {
            return Err(fail(ErrorKind::Usage, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fail(ErrorKind::Usage, e))?;
    }
    Ok(cfg)
}

fn echo(cfg: &RunConfig) {
    eprintln!("effective config: {}", serde_json::to_string(cfg).expect("config serializes"));
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn load_manifest(path: &Path) -> CliResult<DatasetManifest> {
    read_manifest(path).map_err(data)
}

fn load_shape_table(path: Option<&Path>) -> CliResult<Option<ShapeTable>> {
    let Some(path) = path else { return Ok(None) };
    let rows = read_shape_csv(path).map_err(data)?;
    Ok(Some(
        rows.into_iter()
            .map(|r| ((r.subject_id, r.cluster_id), r.shape))
            .collect(),
    ))
}

fn positive(name: &str, v: f64) -> CliResult {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(fail(ErrorKind::Usage, format!("{name} must be positive, got {v}")))
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    clusters_per_subject: Option<usize>,
    /// Streamlines per cluster (every bundle kind)
    #[arg(long)]
    streamlines: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn synth(mut cfg: RunConfig, a: SynthArgs) -> CliResult {
    if let Some(n) = a.subjects {
        cfg.synth.n_subjects = n;
    }
    if let Some(n) = a.clusters_per_subject {
        cfg.synth.clusters_per_subject = n;
    }
    if let Some(n) = a.streamlines {
        cfg.synth.templates.iter_mut().for_each(|t| t.n_streamlines = n);
    }
    echo(&cfg);
    let manifest = generate_dataset(&cfg.synth, &a.out_dir).map_err(|e| match e {
        tractshape::synth::SynthError::InvalidSpec(_) => fail(ErrorKind::Usage, e),
        _ => data(e),
    })?;
    println!(
        "wrote {} clusters for {} subjects to {}",
        manifest.n_clusters(),
        manifest.subjects.len(),
        a.out_dir.join("manifest.json").display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ShapesArgs {
    /// A .tck file or a dataset manifest (.json)
    #[arg(long)]
    input: PathBuf,
    /// Isotropic voxel edge, mm [default: 1.0]
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Clusters of a manifest, or the single cluster of a TCK file.
fn load_clusters(input: &Path) -> CliResult<Vec<FiberCluster>> {
    if input.extension().is_some_and(|e| e == "json") {
        let manifest = load_manifest(input)?;
        let entries: Vec<_> = manifest.entries().collect();
        entries
            .par_iter()
            .map(|(s, e)| manifest.load_cluster(s, e).map_err(data))
            .collect()
    } else {
        Ok(vec![read_tck(input).map_err(data)?])
    }
}

fn oracle_rows(clusters: &[FiberCluster], voxel_size: f64) -> CliResult<Vec<ShapeRow>> {
    let mut rows = clusters
        .par_iter()
        .map(|c| {
            Ok(ShapeRow {
                subject_id: c.subject_id.clone(),
                cluster_id: c.id.clone(),
                shape: compute_shape_vector(c, voxel_size)
                    .map_err(|e| data(format!("{}/{}: {e}", c.subject_id, c.id)))?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    rows.sort_by(|a, b| (&a.subject_id, &a.cluster_id).cmp(&(&b.subject_id, &b.cluster_id)));
    Ok(rows)
}

/// Shape CSVs keep the bare header; provenance goes to `<out>.meta.json`.
fn write_shape_table(rows: &[ShapeRow], out: &Path, cfg: &RunConfig, source: serde_json::Value) -> CliResult {
    write_shape_csv(rows, out).map_err(data)?;
    let meta = serde_json::json!({
        "tool": "tractshape",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "source": source,
        "rows": rows.len(),
    });
    let mut meta_path = out.as_os_str().to_owned();
    meta_path.push(".meta.json");
    write_text(Path::new(&meta_path), &format!("{}\n", serde_json::to_string_pretty(&meta).unwrap()))
}

pub fn shapes(mut cfg: RunConfig, a: ShapesArgs) -> CliResult {
    if let Some(v) = a.voxel_size {
        cfg.voxel_size = v;
    }
    positive("--voxel-size", cfg.voxel_size)?;
    echo(&cfg);
    let clusters = load_clusters(&a.input)?;
    let rows = oracle_rows(&clusters, cfg.voxel_size)?;
    write_shape_table(&rows, &a.out, &cfg, serde_json::json!({ "input": a.input }))?;
    println!("wrote {} shape rows to {}", rows.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Oracle shape CSV used as targets; falls back to manifest ground truth
    #[arg(long)]
    shapes: Option<PathBuf>,
    /// Receives model.ckpt, history.csv and split.json
    #[arg(long)]
    out_dir: PathBuf,
    /// Hyperparameter preset applied before the other flags
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> CliResult {
    match a.preset {
        Some(Preset::Desk) => cfg.train = TrainConfig { seed: cfg.seed, ..TrainConfig::desk() },
        Some(Preset::Full) => cfg.train = TrainConfig { seed: cfg.seed, ..TrainConfig::full() },
        None => {}
    }
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.lr = a.lr.unwrap_or(t.lr);
    t.alpha = a.alpha.unwrap_or(t.alpha);
    t.n_points = a.n_points.unwrap_or(t.n_points);
    cfg.train.validate()?;
    echo(&cfg);

    let manifest = load_manifest(&a.manifest)?;
    let shapes = load_shape_table(a.shapes.as_deref())?;
    let split = split_dataset(&manifest, cfg.train.train_fraction, cfg.seed)?;
    let labeled = load_labeled(&manifest, &split.train, shapes.as_ref())?;
    log::info!("training on {} clusters from {} subjects", labeled.len(), split.train.len());
    let outcome = trainer::train(&cfg.train, &labeled)?;

    let ckpt = a.out_dir.join("model.ckpt");
    std::fs::create_dir_all(&a.out_dir).map_err(|e| data_err(&a.out_dir, e))?;
    outcome.checkpoint.save(&ckpt)?;
    write_text(&a.out_dir.join("history.csv"), &history_csv(&outcome.history, &cfg.provenance()))?;
    let split_json = serde_json::json!({
        "tool": "tractshape",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "train": split.train,
        "test": split.test,
    });
    write_text(&a.out_dir.join("split.json"), &format!("{}\n", serde_json::to_string_pretty(&split_json).unwrap()))?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} clusters: final L_total {:.6}; wrote {}",
        cfg.train.epochs,
        labeled.len(),
        last.total,
        ckpt.display()
    );
    Ok(())
}

fn data_err(path: &Path, e: impl Display) -> CliError {
    data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    Train,
    Test,
    All,
}

/// Subjects of `subset` under the split recorded in the checkpoint.
fn subset_subjects(manifest: &DatasetManifest, ckpt: &Checkpoint, subset: Subset) -> CliResult<Vec<String>> {
    if subset == Subset::All {
        return Ok(manifest.subject_ids());
    }
    let tc: TrainConfig = serde_json::from_value(ckpt.train_config.clone())
        .map_err(|e| data(format!("checkpoint training config: {e}")))?;
    let split = split_dataset(manifest, tc.train_fraction, tc.seed)?;
    Ok(if subset == Subset::Train { split.train } else { split.test })
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    shapes: Option<PathBuf>,
    /// Subjects to score, using the split stored with the checkpoint
    #[arg(long, value_enum, default_value = "test")]
    subset: Subset,
    /// Metrics CSV
    #[arg(long)]
    out: PathBuf,
    /// Optional per-cluster predictions CSV
    #[arg(long)]
    predictions: Option<PathBuf>,
}

pub fn eval(cfg: RunConfig, a: EvalArgs) -> CliResult {
    echo(&cfg);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let shapes = load_shape_table(a.shapes.as_deref())?;
    let subjects = subset_subjects(&manifest, &ckpt, a.subset)?;
    let labeled = load_labeled(&manifest, &subjects, shapes.as_ref())?;
    let evaluation = trainer::evaluate(&ckpt, &labeled, cfg.seed)?;
    write_text(&a.out, &evaluation.report.to_csv(&cfg.provenance()))?;
    if let Some(path) = &a.predictions {
        let mut rows: Vec<ShapeRow> = evaluation
            .predictions
            .iter()
            .map(|p| ShapeRow {
                subject_id: p.subject_id.clone(),
                cluster_id: p.cluster_id.clone(),
                shape: p.predicted,
            })
            .collect();
        rows.sort_by(|a, b| (&a.subject_id, &a.cluster_id).cmp(&(&b.subject_id, &b.cluster_id)));
        let source = serde_json::json!({ "checkpoint": a.checkpoint, "subset": a.subset.to_possible_value().map(|v| v.get_name().to_owned()) });
        write_shape_table(&rows, path, &cfg, source)?;
    }
    print!("{}", evaluation.report.to_table());
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Number of clusters timed, taken in manifest order
    #[arg(long, default_value_t = 100)]
    clusters: usize,
    #[arg(long, value_enum, default_value = "test")]
    subset: Subset,
    /// Summary CSV (method, mean, std)
    #[arg(long)]
    out: PathBuf,
    /// Optional per-cluster timing CSV
    #[arg(long)]
    per_cluster: Option<PathBuf>,
}

pub fn bench(mut cfg: RunConfig, a: BenchArgs) -> CliResult {
    if let Some(v) = a.voxel_size {
        cfg.voxel_size = v;
    }
    positive("--voxel-size", cfg.voxel_size)?;
    if a.repetitions == 0 {
        return Err(fail(ErrorKind::Usage, "--repetitions must be at least 1"));
    }
    echo(&cfg);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let subjects = subset_subjects(&manifest, &ckpt, a.subset)?;
    let wanted: Vec<_> = manifest
        .entries()
        .filter(|(s, _)| subjects.iter().any(|w| w == s))
        .take(a.clusters)
        .collect();
    let clusters = wanted
        .par_iter()
        .map(|(s, e)| manifest.load_cluster(s, e).map_err(data))
        .collect::<CliResult<Vec<_>>>()?;
    let report = trainer::bench(&ckpt, &clusters, cfg.voxel_size, a.repetitions, a.warmup, cfg.seed)
        .map_err(|e| match e {
            trainer::BenchError::Model(m) => CliError::from(m),
            other => data(other),
        })?;
    write_text(&a.out, &report.summary_csv(&cfg.provenance()))?;
    if let Some(path) = &a.per_cluster {
        write_text(path, &report.clusters_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Args, Debug)]
pub struct DownstreamArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Oracle shape CSV; computed from the clusters when absent
    #[arg(long)]
    shapes: Option<PathBuf>,
    /// Adds a row using features predicted by this checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn model_table(manifest: &DatasetManifest, ckpt: &Checkpoint, seed: u64) -> CliResult<ShapeTable> {
    let entries: Vec<_> = manifest.entries().collect();
    entries
        .par_iter()
        .map(|(s, e)| {
            let cluster = manifest.load_cluster(s, e).map_err(data)?;
            let sample = random_sample(&cluster, ckpt.n_points, eval_sample_seed(seed, &cluster));
            Ok(((s.to_string(), e.cluster_id.clone()), predict(&sample, ckpt)?))
        })
        .collect()
}

pub fn downstream(mut cfg: RunConfig, a: DownstreamArgs) -> CliResult {
    if let Some(v) = a.voxel_size {
        cfg.voxel_size = v;
    }
    positive("--voxel-size", cfg.voxel_size)?;
    echo(&cfg);
    let manifest = load_manifest(&a.manifest)?;
    let scores = subject_scores(&manifest)?;
    let oracle = match load_shape_table(a.shapes.as_deref())? {
        Some(t) => t,
        None => {
            let clusters = load_clusters(&a.manifest)?;
            oracle_rows(&clusters, cfg.voxel_size)?
                .into_iter()
                .map(|r| ((r.subject_id, r.cluster_id), r.shape))
                .collect()
        }
    };
    let mut results = vec![downstream_eval(
        "oracle",
        &FeatureMatrix::from_shapes(&manifest, &oracle)?,
        &scores,
        &cfg.lasso,
        cfg.seed,
    )?];
    if let Some(path) = &a.checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let table = model_table(&manifest, &ckpt, cfg.seed)?;
        results.push(downstream_eval(
            "model",
            &FeatureMatrix::from_shapes(&manifest, &table)?,
            &scores,
            &cfg.lasso,
            cfg.seed,
        )?);
    }
    write_text(&a.out, &downstream_csv(&results, &cfg.provenance()))?;
    print!("{}", downstream_table(&results));
    Ok(())
}
