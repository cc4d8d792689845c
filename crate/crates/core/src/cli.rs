//! Command-line front end: one JSON run configuration drives every command.
//!
//! Each artifact carries provenance (configuration hash, master seed, tool
//! version) and no timestamps, so reruns with the same configuration are
//! byte-identical at any `--jobs` setting.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{train_encoder, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::evaluation::{
    make_folds, prepare_open_set, run_binary, run_closed_set, run_pair_grid, sweep, threshold_grid,
    threshold_sweep, AugmentConfig, BinaryReport, ClassifierConfig, EvalReport, Fold, FoldPlan,
    PairGrid, Representation, SweepAxis, SweepContext, SweepReport, ThresholdCurve,
};
use crate::ingest::{
    load_manifest, write_binned_csv, BinnedMeta, Dataset, EntryKind, Manifest, ManifestEntry,
    TraceData,
};
use crate::preprocess::{preprocess_dataset, FeatureSet, PreprocessConfig};
use crate::seed::{derive_seed, Tag};
use crate::synthetic::{gen_synthetic_dataset, SyntheticSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Closed-set classification classes per fold.
    pub n_classify: usize,
    /// Open-set classes per fold, split evenly into known and unknown.
    pub open_set_classes: usize,
    /// Defaults to the first real platform.
    pub train_platform: Option<String>,
    /// Defaults to the second real platform (or the first if only one).
    pub test_platform: Option<String>,
    /// Evaluate only the first `max_folds` folds.
    pub max_folds: Option<usize>,
    pub threshold: f64,
    pub include_diagonal: bool,
    pub sweep: SweepAxis,
    pub augment: AugmentConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            n_classify: 10,
            open_set_classes: 20,
            train_platform: None,
            test_platform: None,
            max_folds: None,
            threshold: 0.8,
            include_diagonal: false,
            sweep: SweepAxis::TrainingClasses(vec![10, 20, 30]),
            augment: AugmentConfig::default(),
        }
    }
}

/// Everything one run needs. Exactly one of `manifest` and `synthetic`
/// must be given. Seeds inside the module configs are ignored: all streams
/// derive from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Relative paths resolve against the configuration file's directory.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn usage(path: &str, message: impl Into<String>) -> Error {
    Error::Usage {
        path: path.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses a configuration, reporting the offending field path on error.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            usage(&path, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| usage("seed", "a master seed is required"))
    }

    /// Applies the master seed to every module and checks the invariants.
    pub fn resolve(mut self) -> Result<Self> {
        let seed = self.seed()?;
        match (&self.manifest, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(usage(
                    "manifest",
                    "give either `manifest` or `synthetic`, not both",
                ))
            }
            (None, None) => {
                return Err(usage(
                    "manifest",
                    "a data source is required: `manifest` or `synthetic`",
                ))
            }
            _ => {}
        }
        if let Some(spec) = &mut self.synthetic {
            spec.seed = seed;
            spec.validate()
                .map_err(|e| usage("synthetic", e.to_string()))?;
        }
        self.encoder.seed = derive_seed(seed, &[Tag::Str("encoder")]);
        self.preprocess
            .validate()
            .map_err(|e| usage("preprocess", e.to_string()))?;
        self.encoder
            .validate()
            .map_err(|e| usage("encoder", e.to_string()))?;
        self.classifier
            .softmax
            .validate()
            .map_err(|e| usage("classifier.softmax", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(usage("evaluation.threshold", "must lie in [0, 1]"));
        }
        Ok(self)
    }

    /// SHA-256 of the resolved configuration without the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = None;
        let text = serde_json::to_string(&c)?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl Provenance {
    fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("config_hash".into(), self.config_hash.clone()),
            ("seed".into(), self.seed.to_string()),
            ("tool_version".into(), self.tool_version.clone()),
        ]
    }

    fn csv_header(&self) -> String {
        format!(
            "# config_hash={} seed={} tool_version={}\n",
            self.config_hash, self.seed, self.tool_version
        )
    }
}

#[derive(Debug, Serialize)]
struct Artifact<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Closed,
    Open,
    Grid,
    Sweep,
    Binary,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configuration's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configuration's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(Common),
    /// Write preprocessed feature vectors.
    Preprocess(Common),
    /// Train an encoder on the first fold's encoder classes.
    Train(Common),
    /// Export embeddings of every trace.
    Embed(Common),
    /// Run an evaluation protocol.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "closed")]
        mode: Mode,
    },
}

#[derive(Debug, Parser)]
#[command(
    name = "crossvid",
    version,
    about = "Cross-platform video identification from traffic traces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Parses arguments, runs the command and maps errors to exit codes:
/// 2 for usage errors, 1 for everything else.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli.command) {
        Ok(written) => {
            let mut stdout = std::io::stdout().lock();
            for p in written {
                if writeln!(stdout, "{}", p.display()).is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::Usage { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Runs one command and returns the files it wrote.
pub fn run(command: &Command) -> Result<Vec<PathBuf>> {
    let (common, mode) = match command {
        Command::Synth(c) | Command::Preprocess(c) | Command::Train(c) | Command::Embed(c) => {
            (c, None)
        }
        Command::Eval { common, mode } => (common, Some(*mode)),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    let cfg = cfg.resolve()?;
    let ctx = Context::new(cfg)?;
    let job = || match command {
        Command::Synth(_) => ctx.synth(),
        Command::Preprocess(_) => ctx.preprocess(),
        Command::Train(_) => ctx.train(),
        Command::Embed(_) => ctx.embed(),
        Command::Eval { .. } => ctx.eval(mode.expect("eval mode")),
    };
    match common.jobs {
        Some(0) => Err(usage("--jobs", "must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::argument(e.to_string()))?
            .install(job),
        None => job(),
    }
}

/// A resolved configuration plus its provenance and output directory.
pub struct Context {
    pub config: RunConfig,
    pub provenance: Provenance,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        let provenance = Provenance {
            config_hash: config.hash()?,
            seed: config.seed()?,
            tool_version: TOOL_VERSION.to_string(),
        };
        let out = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok(Context {
            config,
            provenance,
            out,
        })
    }

    fn seed(&self) -> u64 {
        self.provenance.seed
    }

    fn dataset(&self) -> Result<Dataset> {
        match (&self.config.manifest, &self.config.synthetic) {
            (Some(m), _) => load_manifest(m),
            (_, Some(s)) => gen_synthetic_dataset(s),
            _ => Err(usage("manifest", "no data source")),
        }
    }

    fn features(&self, dataset: &Dataset) -> Result<FeatureSet> {
        preprocess_dataset(dataset, &self.config.preprocess)
    }

    fn platform_pair(&self, dataset: &Dataset) -> Result<(String, String)> {
        let real: Vec<&String> = dataset
            .platforms()
            .iter()
            .filter(|p| *p != crate::ingest::VBR_PLATFORM)
            .collect();
        let ev = &self.config.evaluation;
        let pick = |given: &Option<String>, field: &str, fallback: Option<&&String>| match given {
            Some(p) if dataset.platforms().contains(p) => Ok(p.clone()),
            Some(p) => Err(usage(field, format!("unknown platform `{p}`"))),
            None => fallback
                .map(|p| (*p).clone())
                .ok_or_else(|| Error::data("dataset has no real platform")),
        };
        let train = pick(
            &ev.train_platform,
            "evaluation.train_platform",
            real.first(),
        )?;
        let test = pick(
            &ev.test_platform,
            "evaluation.test_platform",
            real.get(1).or(real.first()),
        )?;
        Ok((train, test))
    }

    fn folds(&self, dataset: &Dataset, n_classify: usize, open_set: bool) -> Result<Vec<Fold>> {
        let field = if open_set {
            "evaluation.open_set_classes"
        } else {
            "evaluation.n_classify"
        };
        let plan: FoldPlan = make_folds(dataset.classes(), n_classify, self.seed(), open_set)
            .map_err(|e| usage(field, e.to_string()))?;
        let n = self.config.evaluation.max_folds.unwrap_or(plan.folds.len());
        Ok(plan.folds.into_iter().take(n).collect())
    }

    /// Writes `bytes` and reads them back to confirm.
    fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let back = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if back != bytes {
            return Err(Error::data(format!(
                "{} did not read back intact",
                path.display()
            )));
        }
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, rel: &str, body: T) -> Result<PathBuf> {
        let artifact = Artifact {
            provenance: &self.provenance,
            body,
        };
        let text = serde_json::to_string_pretty(&artifact)? + "\n";
        serde_json::from_str::<serde_json::Value>(&text)?;
        self.write(rel, text.as_bytes())
    }

    fn write_csv(&self, rel: &str, body: &str) -> Result<PathBuf> {
        let text = self.provenance.csv_header() + body;
        self.write(rel, text.as_bytes())
    }

    fn binned_meta(&self, key: &crate::ingest::TraceKey, bin_s: f64) -> BinnedMeta {
        BinnedMeta {
            key: key.clone(),
            bin_s,
            extra: self.provenance.pairs(),
        }
    }

    /// Writes every synthetic trace as a binned CSV plus `manifest.json`.
    pub fn synth(&self) -> Result<Vec<PathBuf>> {
        if self.config.synthetic.is_none() {
            return Err(usage("synthetic", "`synth` needs a synthetic spec"));
        }
        let dataset = self.dataset()?;
        let mut manifest = Manifest {
            provenance: self.provenance.pairs().into_iter().collect(),
            ..Manifest::default()
        };
        let mut written = Vec::new();
        for (key, data) in dataset.iter() {
            let TraceData::Binned { bin_s, values } = data else {
                return Err(Error::data("synthetic traces are expected to be binned"));
            };
            let rel = PathBuf::from("data")
                .join(&key.platform)
                .join(format!("{}_t{}.csv", key.video_id, key.trial));
            let path = self.out.join(&rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_binned_csv(&self.binned_meta(key, *bin_s), values, &path)?;
            manifest
                .platforms
                .entry(key.platform.clone())
                .or_default()
                .entry(key.video_id.clone())
                .or_default()
                .push(ManifestEntry {
                    path: rel,
                    kind: EntryKind::Binned,
                    client: None,
                });
            written.push(path);
        }
        let path = self.out.join("manifest.json");
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        manifest.write(&path)?;
        load_manifest(&path)?;
        written.push(path);
        Ok(written)
    }

    /// Writes one feature CSV per trace under `features/`.
    pub fn preprocess(&self) -> Result<Vec<PathBuf>> {
        let dataset = self.dataset()?;
        let features = self.features(&dataset)?;
        let mut written = Vec::new();
        for f in features.iter() {
            let rel = PathBuf::from("features")
                .join(&f.key.platform)
                .join(format!("{}_t{}.csv", f.key.video_id, f.key.trial));
            let mut meta = self.binned_meta(&f.key, self.config.preprocess.bin_s);
            meta.extra.push((
                "normalized".into(),
                self.config.preprocess.normalize.to_string(),
            ));
            let text = crate::ingest::render_binned_csv(&meta, &f.values)?;
            written.push(self.write(rel, text.as_bytes())?);
        }
        Ok(written)
    }

    fn trained_encoder(
        &self,
        dataset: &Dataset,
        features: &FeatureSet,
    ) -> Result<(EncoderModel, Vec<f64>)> {
        let (train, test) = self.platform_pair(dataset)?;
        let fold = self
            .folds(dataset, self.config.evaluation.n_classify, false)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::data("no folds"))?;
        let trained = train_encoder(
            features,
            &fold.encoder_classes,
            (&train, &test),
            &self.config.encoder,
        )?;
        Ok((trained.model, trained.loss_history))
    }

    /// Trains on the first fold's encoder classes and writes the model and
    /// its loss history.
    pub fn train(&self) -> Result<Vec<PathBuf>> {
        let dataset = self.dataset()?;
        let features = self.features(&dataset)?;
        let (model, history) = self.trained_encoder(&dataset, &features)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in history.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l}");
        }
        Ok(vec![
            self.write_json("encoder.json", ModelBody { model: &model })?,
            self.write_csv("loss_history.csv", &csv)?,
        ])
    }

    /// Embeds every trace with the encoder from `train` (if present and
    /// produced by the same configuration) or a freshly trained one.
    pub fn embed(&self) -> Result<Vec<PathBuf>> {
        let dataset = self.dataset()?;
        let features = self.features(&dataset)?;
        let model = match self.saved_encoder()? {
            Some(m) => m,
            None => self.trained_encoder(&dataset, &features)?.0,
        };
        let mut csv = String::from("platform,video_id,trial");
        for i in 0..model.embedding_dim {
            let _ = write!(csv, ",e{i}");
        }
        csv.push('\n');
        for f in features.iter() {
            let e = model.embed(&f.values)?;
            let _ = write!(csv, "{},{},{}", f.key.platform, f.key.video_id, f.key.trial);
            for v in &e.0 {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
        Ok(vec![self.write_csv("embeddings.csv", &csv)?])
    }

    fn saved_encoder(&self) -> Result<Option<EncoderModel>> {
        #[derive(Deserialize)]
        struct Saved {
            provenance: Provenance,
            model: EncoderModel,
        }
        let path = self.out.join("encoder.json");
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(None);
        };
        let saved: Saved = serde_json::from_str(&text)?;
        Ok((saved.provenance == self.provenance).then_some(saved.model))
    }

    pub fn eval(&self, mode: Mode) -> Result<Vec<PathBuf>> {
        let dataset = self.dataset()?;
        let features = self.features(&dataset)?;
        let ev = &self.config.evaluation;
        let (train, test) = self.platform_pair(&dataset)?;
        let encoder = &self.config.encoder;
        let classifier = &self.config.classifier;
        match mode {
            Mode::Closed => {
                let folds = self.folds(&dataset, ev.n_classify, false)?;
                let mut reports = Vec::new();
                for fold in &folds {
                    for rep in [Representation::Raw, Representation::Embedding] {
                        reports.push(run_closed_set(
                            &features, &train, &test, fold, encoder, classifier, rep,
                        )?);
                    }
                }
                let summary = closed_summary(&reports);
                Ok(vec![self.write_json(
                    "closed_report.json",
                    ClosedBody { summary, reports },
                )?])
            }
            Mode::Open => {
                let folds = self.folds(&dataset, ev.open_set_classes, true)?;
                let softmax = &classifier.softmax;
                let mut reports = Vec::new();
                let mut curves = Vec::new();
                for fold in &folds {
                    for rep in [Representation::Raw, Representation::Embedding] {
                        let run = prepare_open_set(
                            &features, &train, &test, fold, encoder, softmax, rep,
                        )?;
                        reports.push(run.report(ev.threshold));
                        curves.push(FoldCurve {
                            fold: fold.id,
                            representation: rep,
                            curve: threshold_sweep(&run, &threshold_grid())?,
                        });
                    }
                }
                let mean = mean_curve(&curves, Representation::Embedding);
                Ok(vec![
                    self.write_json(
                        "open_report.json",
                        OpenBody {
                            threshold: ev.threshold,
                            reports,
                            curves: &curves,
                        },
                    )?,
                    self.write_csv("open_thresholds.csv", &mean.to_csv())?,
                ])
            }
            Mode::Grid => {
                let folds = self.folds(&dataset, ev.n_classify, false)?;
                let plan = FoldPlan {
                    seed: self.seed(),
                    folds,
                };
                let grid =
                    run_pair_grid(&features, &plan, encoder, classifier, ev.include_diagonal)?;
                Ok(vec![
                    self.write_json("grid_report.json", GridBody { grid: &grid })?,
                    self.write_csv("grid_raw.csv", &grid.raw.to_csv())?,
                    self.write_csv("grid_embedding.csv", &grid.embedding.to_csv())?,
                ])
            }
            Mode::Sweep => {
                let fold = self
                    .folds(&dataset, ev.n_classify, false)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::data("no folds"))?;
                let ctx = SweepContext {
                    dataset: &dataset,
                    preprocess: self.config.preprocess.clone(),
                    train_platform: train,
                    test_platform: test,
                    fold,
                    encoder: encoder.clone(),
                    classifier: classifier.clone(),
                    augment: ev.augment.clone(),
                };
                let report = sweep(&ctx, &ev.sweep)?;
                Ok(vec![
                    self.write_json("sweep_report.json", SweepBody { sweep: &report })?,
                    self.write_csv("sweep.csv", &report.to_csv())?,
                ])
            }
            Mode::Binary => {
                let folds = self.folds(&dataset, ev.n_classify, false)?;
                let mut reports = Vec::new();
                for fold in &folds {
                    for rep in [Representation::Raw, Representation::Embedding] {
                        reports.push(run_binary(
                            &features,
                            &train,
                            &test,
                            fold,
                            encoder,
                            &classifier.softmax,
                            rep,
                        )?);
                    }
                }
                Ok(vec![self.write_json(
                    "binary_report.json",
                    BinaryBody { reports },
                )?])
            }
        }
    }
}

#[derive(Serialize)]
struct ModelBody<'a> {
    model: &'a EncoderModel,
}

#[derive(Debug, Serialize)]
struct ClosedSummary {
    raw_mean_accuracy: f64,
    embedding_mean_accuracy: f64,
}

fn closed_summary(reports: &[EvalReport]) -> ClosedSummary {
    let mean_of = |rep| {
        let v: Vec<f64> = reports
            .iter()
            .filter(|r| r.representation == rep)
            .map(|r| r.accuracy)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    ClosedSummary {
        raw_mean_accuracy: mean_of(Representation::Raw),
        embedding_mean_accuracy: mean_of(Representation::Embedding),
    }
}

#[derive(Serialize)]
struct ClosedBody {
    summary: ClosedSummary,
    reports: Vec<EvalReport>,
}

#[derive(Serialize)]
struct FoldCurve {
    fold: usize,
    representation: Representation,
    curve: ThresholdCurve,
}

/// Pointwise mean of the curves of one representation across folds.
fn mean_curve(curves: &[FoldCurve], rep: Representation) -> ThresholdCurve {
    let chosen: Vec<&ThresholdCurve> = curves
        .iter()
        .filter(|c| c.representation == rep)
        .map(|c| &c.curve)
        .collect();
    let n = chosen.len().max(1) as f64;
    let points: Vec<_> = threshold_grid()
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let avg = |f: fn(&crate::evaluation::ThresholdPoint) -> f64| {
                chosen.iter().map(|c| f(&c.points[i])).sum::<f64>() / n
            };
            crate::evaluation::ThresholdPoint {
                threshold: t,
                precision: avg(|p| p.precision),
                recall: avg(|p| p.recall),
                accuracy: avg(|p| p.accuracy),
            }
        })
        .collect();
    let best = points
        .iter()
        .fold(
            &points[0],
            |b, p| if p.precision > b.precision { p } else { b },
        )
        .threshold;
    ThresholdCurve {
        points,
        best_precision_threshold: best,
    }
}

#[derive(Serialize)]
struct OpenBody<'a> {
    threshold: f64,
    reports: Vec<EvalReport>,
    curves: &'a [FoldCurve],
}

#[derive(Serialize)]
struct GridBody<'a> {
    grid: &'a PairGrid,
}

#[derive(Serialize)]
struct SweepBody<'a> {
    sweep: &'a SweepReport,
}

#[derive(Serialize)]
struct BinaryBody {
    reports: Vec<BinaryReport>,
}

/// Per-mode output files, for documentation and tests.
pub fn outputs_of(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Closed => &["closed_report.json"],
        Mode::Open => &["open_report.json", "open_thresholds.csv"],
        Mode::Grid => &["grid_report.json", "grid_raw.csv", "grid_embedding.csv"],
        Mode::Sweep => &["sweep_report.json", "sweep.csv"],
        Mode::Binary => &["binary_report.json"],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_json(text).and_then(RunConfig::resolve)
    }

    #[test]
    fn both_sources_is_a_usage_error() {
        let err = parse(r#"{"seed": 1, "manifest": "m.json", "synthetic": {}}"#).unwrap_err();
        assert!(matches!(err, Error::Usage { ref path, .. } if path == "manifest"));
        let err = parse(r#"{"seed": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Usage { .. }));
    }

    #[test]
    fn seed_is_mandatory() {
        let err = parse(r#"{"synthetic": {}}"#).unwrap_err();
        assert!(matches!(err, Error::Usage { ref path, .. } if path == "seed"));
    }

    #[test]
    fn bad_field_reports_its_path() {
        let err =
            RunConfig::from_json(r#"{"seed": 1, "encoder": {"arch": "transformer"}}"#).unwrap_err();
        match err {
            Error::Usage { path, .. } => assert_eq!(path, "encoder.arch"),
            other => panic!("unexpected {other:?}"),
        }
        let err =
            RunConfig::from_json(r#"{"seed": 1, "evaluation": {"nclassify": 3}}"#).unwrap_err();
        assert!(
            matches!(err, Error::Usage { ref path, .. } if path == "evaluation.nclassify" || path == "evaluation")
        );
    }

    #[test]
    fn hash_ignores_output_directory_but_not_seed() {
        let a = parse(r#"{"seed": 1, "synthetic": {}, "out": "x"}"#).unwrap();
        let b = parse(r#"{"seed": 1, "synthetic": {}, "out": "y"}"#).unwrap();
        let c = parse(r#"{"seed": 2, "synthetic": {}}"#).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn master_seed_reaches_every_module() {
        let a = parse(r#"{"seed": 5, "synthetic": {"seed": 99}}"#).unwrap();
        assert_eq!(a.synthetic.as_ref().unwrap().seed, 5);
        assert_eq!(a.encoder.seed, derive_seed(5, &[Tag::Str("encoder")]));
    }
}
