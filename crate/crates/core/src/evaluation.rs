//! Experimental protocols: cross-validation folds, closed-set and open-set
//! runs, platform-pair grids, threshold sweeps and parameter sweeps.
//!
//! Every run is a pure function of its inputs and seeds. Independent jobs
//! (grid cells, folds, sweep values) run in parallel and are merged in a
//! fixed order.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{
    make_binary_pairs, open_set_classify, predict_binary, train_binary, train_softmax_cnn,
    KnnModel, NmevModel, OpenSetLabel, PairLabel, SoftmaxConfig,
};
use crate::encoder::{train_encoder, Arch, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, TraceKey, VBR_PLATFORM};
use crate::preprocess::{
    augment_gaussian, finish_features, preprocess_dataset, trace_counts, FeatureSet,
    PreprocessConfig,
};
use crate::seed::{derive_seed, rng_for, Tag};

pub const UNKNOWN_LABEL: &str = "UNKNOWN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSplit {
    pub known: Vec<String>,
    pub unknown: Vec<String>,
}

/// One cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub id: usize,
    pub encoder_classes: Vec<String>,
    pub classify_classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_set: Option<OpenSplit>,
}

impl Fold {
    /// Rejects folds whose encoder and classification classes overlap, and
    /// open-set splits that do not partition the classification classes.
    pub fn validate(&self) -> Result<()> {
        let enc: BTreeSet<&String> = self.encoder_classes.iter().collect();
        if let Some(c) = self.classify_classes.iter().find(|c| enc.contains(c)) {
            return Err(Error::data(format!(
                "fold {}: class {c} is used both to train the encoder and to classify",
                self.id
            )));
        }
        if let Some(split) = &self.open_set {
            let mut parts: Vec<&String> = split.known.iter().chain(&split.unknown).collect();
            parts.sort();
            let mut all: Vec<&String> = self.classify_classes.iter().collect();
            all.sort();
            let disjoint = parts.windows(2).all(|w| w[0] != w[1]);
            if !disjoint || parts != all {
                return Err(Error::data(format!(
                    "fold {}: known/unknown split does not partition the classification classes",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Checks every fold and that the classification sets partition
    /// `all_classes`.
    pub fn validate(&self, all_classes: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for fold in &self.folds {
            fold.validate()?;
            for c in &fold.classify_classes {
                if !seen.insert(c) {
                    return Err(Error::data(format!("class {c} is classified in two folds")));
                }
            }
        }
        let universe: BTreeSet<&String> = all_classes.iter().collect();
        if seen != universe {
            return Err(Error::data(
                "classification sets do not cover the class universe",
            ));
        }
        Ok(())
    }
}

/// Shuffles the classes once and cuts them into folds of `n_classify`.
/// Each fold trains its encoder on all remaining classes. Open-set folds
/// split their classification classes in half, known then unknown.
pub fn make_folds(
    all_classes: &[String],
    n_classify: usize,
    seed: u64,
    open_set: bool,
) -> Result<FoldPlan> {
    if n_classify == 0 || all_classes.is_empty() || !all_classes.len().is_multiple_of(n_classify) {
        return Err(Error::argument(format!(
            "{n_classify} classification classes per fold do not divide {} classes",
            all_classes.len()
        )));
    }
    if open_set && !n_classify.is_multiple_of(2) {
        return Err(Error::argument(
            "open-set folds need an even number of classes",
        ));
    }
    let mut classes = all_classes.to_vec();
    classes.sort();
    classes.dedup();
    if classes.len() != all_classes.len() {
        return Err(Error::argument("duplicate class ids"));
    }
    classes.shuffle(&mut rng_for(seed, &[Tag::Str("folds")]));
    let folds = classes
        .chunks(n_classify)
        .enumerate()
        .map(|(id, chunk)| {
            let encoder_classes = classes
                .iter()
                .filter(|c| !chunk.contains(c))
                .cloned()
                .collect();
            let open = open_set.then(|| OpenSplit {
                known: chunk[..n_classify / 2].to_vec(),
                unknown: chunk[n_classify / 2..].to_vec(),
            });
            Fold {
                id,
                encoder_classes,
                classify_classes: chunk.to_vec(),
                open_set: open,
            }
        })
        .collect();
    let plan = FoldPlan { seed, folds };
    plan.validate(all_classes)?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and per-class precision/recall of a square confusion matrix
/// (rows: truth, columns: prediction). Classes never predicted get
/// precision 0; classes never present get recall 0.
pub fn metrics(confusion: &[Vec<usize>]) -> Metrics {
    let n = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let diag: usize = (0..n).map(|i| confusion[i][i]).sum();
    let precision = (0..n)
        .map(|j| ratio(confusion[j][j], confusion.iter().map(|r| r[j]).sum()))
        .collect();
    let recall = (0..n)
        .map(|i| ratio(confusion[i][i], confusion[i].iter().sum()))
        .collect();
    Metrics {
        accuracy: ratio(diag, total),
        precision,
        recall,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Knn1,
    Knn10,
    Nmev,
    Cnn,
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Knn1 => "knn1",
            ClassifierKind::Knn10 => "knn10",
            ClassifierKind::Nmev => "nmev",
            ClassifierKind::Cnn => "cnn",
        })
    }
}

/// Which input the classifier sees: preprocessed traces or their
/// embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Raw,
    Embedding,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Raw => "raw",
            Representation::Embedding => "embedding",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub softmax: SoftmaxConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Knn1,
            softmax: SoftmaxConfig::default(),
        }
    }
}

/// Outcome of one closed-set or open-set evaluation.
///
/// `labels` names the rows and columns of `confusion`. Open-set reports
/// end with an `UNKNOWN` row and column; their precision and recall cover
/// the known classes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: usize,
    pub train_platform: String,
    pub test_platform: String,
    pub classifier: ClassifierKind,
    pub representation: Representation,
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub softmax: Option<SoftmaxConfig>,
}

type Labeled = (Vec<f64>, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    All,
    First,
    Second,
}

/// Traces of `classes` on `platform`, labeled by class position. When
/// training and testing share a platform, the first half of each class's
/// trials trains and the rest tests.
fn side(
    features: &FeatureSet,
    platform: &str,
    classes: &[String],
    part: Part,
) -> Result<Vec<Labeled>> {
    let mut out = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let traces = features.of(platform, class);
        if traces.is_empty() {
            return Err(Error::data(format!(
                "class {class} has no traces on platform {platform}"
            )));
        }
        let cut = traces.len().div_ceil(2);
        let chosen = match part {
            Part::All => &traces[..],
            Part::First => &traces[..cut],
            Part::Second => &traces[cut..],
        };
        if chosen.is_empty() {
            return Err(Error::data(format!(
                "class {class} needs at least two trials on {platform} to split train and test"
            )));
        }
        out.extend(chosen.iter().map(|f| (f.values.to_vec(), label)));
    }
    Ok(out)
}

fn check_test_platform(test_platform: &str) -> Result<()> {
    if test_platform == VBR_PLATFORM {
        return Err(Error::data("VBR can only serve as a training input"));
    }
    Ok(())
}

/// Training and testing samples of one platform pair over `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub classes: Vec<String>,
    pub train: Vec<(Vec<f64>, usize)>,
    pub test: Vec<(Vec<f64>, usize)>,
}

impl Split {
    pub fn new(
        features: &FeatureSet,
        train_platform: &str,
        test_platform: &str,
        classes: &[String],
    ) -> Result<Self> {
        check_test_platform(test_platform)?;
        let (a, b) = if train_platform == test_platform {
            (Part::First, Part::Second)
        } else {
            (Part::All, Part::All)
        };
        Ok(Split {
            classes: classes.to_vec(),
            train: side(features, train_platform, classes, a)?,
            test: side(features, test_platform, classes, b)?,
        })
    }

    /// The same split with every vector replaced by its embedding.
    pub fn embed(&self, model: &EncoderModel) -> Result<Split> {
        let map = |v: &[Labeled]| -> Result<Vec<Labeled>> {
            v.par_iter()
                .map(|(x, l)| Ok((model.embed(x)?.0, *l)))
                .collect()
        };
        Ok(Split {
            classes: self.classes.clone(),
            train: map(&self.train)?,
            test: map(&self.test)?,
        })
    }
}

type Predictor = Box<dyn Fn(&[f64]) -> Result<usize> + Sync>;

/// Fits the configured classifier on `split.train` and returns the
/// confusion matrix over `split.test`.
pub fn classify_split(
    split: &Split,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = split.train.iter().cloned().unzip();
    let n = split.classes.len();
    let predict: Predictor = match config.kind {
        ClassifierKind::Knn1 | ClassifierKind::Knn10 => {
            let k = if config.kind == ClassifierKind::Knn1 {
                1
            } else {
                10
            };
            let m = KnnModel::fit(xs, ys, k)?;
            Box::new(move |x| m.predict(x))
        }
        ClassifierKind::Nmev => {
            let m = NmevModel::fit(&xs, &ys)?;
            Box::new(move |x| m.predict(x))
        }
        ClassifierKind::Cnn => {
            let m = train_softmax_cnn(&xs, &ys, n, &config.softmax, seed)?;
            Box::new(move |x| m.predict(x))
        }
    };
    let predictions: Vec<usize> = split
        .test
        .par_iter()
        .map(|(x, _)| predict(x))
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0; n]; n];
    for ((_, truth), p) in split.test.iter().zip(predictions) {
        confusion[*truth][p] += 1;
    }
    Ok(confusion)
}

/// Trains the fold's encoder on the training/testing platform pair.
pub fn train_fold_encoder(
    features: &FeatureSet,
    encoder_classes: &[String],
    train_platform: &str,
    test_platform: &str,
    config: &EncoderConfig,
) -> Result<EncoderModel> {
    Ok(train_encoder(
        features,
        encoder_classes,
        (train_platform, test_platform),
        config,
    )?
    .model)
}

fn classifier_seed(encoder: &EncoderConfig) -> u64 {
    derive_seed(encoder.seed, &[Tag::Str("classifier")])
}

/// Closed-set evaluation with separate feature sets for encoder training
/// and for classification (sweeps thin out or augment the former).
#[allow(clippy::too_many_arguments)]
fn closed_set_with(
    encoder_features: &FeatureSet,
    features: &FeatureSet,
    train_platform: &str,
    test_platform: &str,
    fold: &Fold,
    encoder: &EncoderConfig,
    classifier: &ClassifierConfig,
    representation: Representation,
) -> Result<EvalReport> {
    fold.validate()?;
    let raw = Split::new(
        features,
        train_platform,
        test_platform,
        &fold.classify_classes,
    )?;
    let split = match representation {
        Representation::Raw => raw,
        Representation::Embedding => {
            let model = train_fold_encoder(
                encoder_features,
                &fold.encoder_classes,
                train_platform,
                test_platform,
                encoder,
            )?;
            raw.embed(&model)?
        }
    };
    let confusion = classify_split(&split, classifier, classifier_seed(encoder))?;
    let m = metrics(&confusion);
    Ok(EvalReport {
        fold: fold.id,
        train_platform: train_platform.to_string(),
        test_platform: test_platform.to_string(),
        classifier: classifier.kind,
        representation,
        labels: fold.classify_classes.clone(),
        confusion,
        accuracy: m.accuracy,
        mean_precision: mean(&m.precision),
        mean_recall: mean(&m.recall),
        precision: m.precision,
        recall: m.recall,
        threshold: None,
        encoder: (representation == Representation::Embedding).then(|| encoder.clone()),
        softmax: (classifier.kind == ClassifierKind::Cnn).then(|| classifier.softmax.clone()),
    })
}

/// Trains an encoder on the fold's encoder classes (embedding variant
/// only), fits the classifier on the classification classes from
/// `train_platform` and scores it on the same classes from `test_platform`.
pub fn run_closed_set(
    features: &FeatureSet,
    train_platform: &str,
    test_platform: &str,
    fold: &Fold,
    encoder: &EncoderConfig,
    classifier: &ClassifierConfig,
    representation: Representation,
) -> Result<EvalReport> {
    closed_set_with(
        features,
        features,
        train_platform,
        test_platform,
        fold,
        encoder,
        classifier,
        representation,
    )
}

/// A trained open-set model's softmax outputs on its test set, ready to be
/// thresholded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetRun {
    pub fold: usize,
    pub train_platform: String,
    pub test_platform: String,
    pub representation: Representation,
    pub known: Vec<String>,
    pub probs: Vec<Vec<f64>>,
    /// Known class index, or `None` for traces of unknown classes.
    pub truth: Vec<Option<usize>>,
    pub encoder: Option<EncoderConfig>,
    pub softmax: SoftmaxConfig,
}

/// Keeps the first `n` samples in round-robin trial order, so truncation
/// removes late trials across all classes rather than whole classes.
fn round_robin(samples: Vec<Labeled>, n: usize) -> Vec<Labeled> {
    let mut rank = vec![0usize; samples.len()];
    let mut counter = std::collections::BTreeMap::new();
    for (i, (_, l)) in samples.iter().enumerate() {
        let c = counter.entry(*l).or_insert(0usize);
        rank[i] = *c;
        *c += 1;
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by_key(|&i| (rank[i], samples[i].1));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

/// Trains the encoder (embedding variant) and a softmax CNN with one more
/// output than known classes, then scores known and unknown test traces
/// in equal numbers.
pub fn prepare_open_set(
    features: &FeatureSet,
    train_platform: &str,
    test_platform: &str,
    fold: &Fold,
    encoder: &EncoderConfig,
    softmax: &SoftmaxConfig,
    representation: Representation,
) -> Result<OpenSetRun> {
    fold.validate()?;
    check_test_platform(test_platform)?;
    let split = fold
        .open_set
        .as_ref()
        .ok_or_else(|| Error::argument(format!("fold {} has no known/unknown split", fold.id)))?;
    let (a, b) = if train_platform == test_platform {
        (Part::First, Part::Second)
    } else {
        (Part::All, Part::All)
    };
    let train = side(features, train_platform, &split.known, a)?;
    let known_test = side(features, test_platform, &split.known, b)?;
    let unknown_test = side(features, test_platform, &split.unknown, b)?;
    let n = known_test.len().min(unknown_test.len());
    let known_test = round_robin(known_test, n);
    let unknown_test = round_robin(unknown_test, n);

    let model = match representation {
        Representation::Raw => None,
        Representation::Embedding => Some(train_fold_encoder(
            features,
            &fold.encoder_classes,
            train_platform,
            test_platform,
            encoder,
        )?),
    };
    let project = |v: Vec<Labeled>| -> Result<Vec<Labeled>> {
        match &model {
            None => Ok(v),
            Some(m) => v
                .into_par_iter()
                .map(|(x, l)| Ok((m.embed(&x)?.0, l)))
                .collect(),
        }
    };
    let train = project(train)?;
    let known_test = project(known_test)?;
    let unknown_test = project(unknown_test)?;

    let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = train.into_iter().unzip();
    let cnn = train_softmax_cnn(
        &xs,
        &ys,
        split.known.len() + 1,
        softmax,
        classifier_seed(encoder),
    )?;
    let mut probs = Vec::new();
    let mut truth = Vec::new();
    for (x, l) in &known_test {
        probs.push(cnn.predict_proba(x)?);
        truth.push(Some(*l));
    }
    for (x, _) in &unknown_test {
        probs.push(cnn.predict_proba(x)?);
        truth.push(None);
    }
    Ok(OpenSetRun {
        fold: fold.id,
        train_platform: train_platform.to_string(),
        test_platform: test_platform.to_string(),
        representation,
        known: split.known.clone(),
        probs,
        truth,
        encoder: (representation == Representation::Embedding).then(|| encoder.clone()),
        softmax: softmax.clone(),
    })
}

impl OpenSetRun {
    /// Confusion over known classes plus `UNKNOWN` at one threshold.
    /// Predictions of the untrained extra output count as `UNKNOWN`.
    pub fn report(&self, threshold: f64) -> EvalReport {
        let k = self.known.len();
        let mut confusion = vec![vec![0; k + 1]; k + 1];
        for (p, t) in self.probs.iter().zip(&self.truth) {
            let row = t.unwrap_or(k);
            let col = match open_set_classify(p, threshold) {
                OpenSetLabel::Known(c) if c < k => c,
                _ => k,
            };
            confusion[row][col] += 1;
        }
        let m = metrics(&confusion);
        let precision = m.precision[..k].to_vec();
        let recall = m.recall[..k].to_vec();
        let mut labels = self.known.clone();
        labels.push(UNKNOWN_LABEL.to_string());
        EvalReport {
            fold: self.fold,
            train_platform: self.train_platform.clone(),
            test_platform: self.test_platform.clone(),
            classifier: ClassifierKind::Cnn,
            representation: self.representation,
            labels,
            confusion,
            accuracy: m.accuracy,
            mean_precision: mean(&precision),
            mean_recall: mean(&recall),
            precision,
            recall,
            threshold: Some(threshold),
            encoder: self.encoder.clone(),
            softmax: Some(self.softmax.clone()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_open_set(
    features: &FeatureSet,
    train_platform: &str,
    test_platform: &str,
    fold: &Fold,
    encoder: &EncoderConfig,
    softmax: &SoftmaxConfig,
    representation: Representation,
    threshold: f64,
) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::argument("threshold must lie in [0, 1]"));
    }
    let run = prepare_open_set(
        features,
        train_platform,
        test_platform,
        fold,
        encoder,
        softmax,
        representation,
    )?;
    Ok(run.report(threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub points: Vec<ThresholdPoint>,
    /// Lowest threshold reaching the highest known-class mean precision.
    pub best_precision_threshold: f64,
}

impl ThresholdCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,accuracy\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                p.threshold, p.precision, p.recall, p.accuracy
            );
        }
        out
    }

    pub fn at(&self, threshold: f64) -> Option<&ThresholdPoint> {
        self.points.iter().find(|p| p.threshold == threshold)
    }
}

/// 0.00, 0.05, ..., 1.00.
pub fn threshold_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

pub fn threshold_sweep(run: &OpenSetRun, thresholds: &[f64]) -> Result<ThresholdCurve> {
    if thresholds.is_empty() {
        return Err(Error::argument("empty threshold grid"));
    }
    let points: Vec<ThresholdPoint> = thresholds
        .iter()
        .map(|&t| {
            let r = run.report(t);
            ThresholdPoint {
                threshold: t,
                precision: r.mean_precision,
                recall: r.mean_recall,
                accuracy: r.accuracy,
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
    Ok(ThresholdCurve {
        points,
        best_precision_threshold: best,
    })
}

/// Mean accuracy per (training input, testing platform) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGridReport {
    pub representation: Representation,
    pub classifier: ClassifierKind,
    pub training_inputs: Vec<String>,
    pub testing_platforms: Vec<String>,
    /// `cells[i][j]`: mean over folds for training input `i` and testing
    /// platform `j`; `None` on the skipped diagonal.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Per-fold values behind every cell.
    pub fold_values: Vec<Vec<Vec<f64>>>,
    /// Mean over all off-diagonal cells whose training input is a real
    /// platform.
    pub cross_platform_mean: f64,
}

impl PairGridReport {
    fn cell(&self, train: &str, test: &str) -> Option<f64> {
        let i = self.training_inputs.iter().position(|p| p == train)?;
        let j = self.testing_platforms.iter().position(|p| p == test)?;
        self.cells[i][j]
    }

    /// Average of the two directions of a platform pair.
    pub fn pair_mean(&self, a: &str, b: &str) -> Option<f64> {
        Some((self.cell(a, b)? + self.cell(b, a)?) / 2.0)
    }

    /// Heatmap CSV: one row per training input, one column per testing
    /// platform, `NA` for skipped cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("training_input");
        for t in &self.testing_platforms {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for (name, row) in self.training_inputs.iter().zip(&self.cells) {
            out.push_str(name);
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGrid {
    pub raw: PairGridReport,
    pub embedding: PairGridReport,
}

/// Closed-set accuracy for every ordered (training input, testing
/// platform) pair and every fold, with and without the encoder.
///
/// VBR, when present, appears only as a training input. Each job seeds its
/// encoder from `(encoder.seed, training input, testing platform, fold)`.
pub fn run_pair_grid(
    features: &FeatureSet,
    plan: &FoldPlan,
    encoder: &EncoderConfig,
    classifier: &ClassifierConfig,
    include_diagonal: bool,
) -> Result<PairGrid> {
    let inputs = features.platforms();
    let testing: Vec<String> = inputs
        .iter()
        .filter(|p| *p != VBR_PLATFORM)
        .cloned()
        .collect();
    if testing.len() < 2 {
        return Err(Error::data("a platform grid needs at least two platforms"));
    }
    let mut jobs = Vec::new();
    for (i, train) in inputs.iter().enumerate() {
        for (j, test) in testing.iter().enumerate() {
            if train == test && !include_diagonal {
                continue;
            }
            for fold in &plan.folds {
                jobs.push((i, j, fold));
            }
        }
    }
    let results: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(i, j, fold)| {
            let (train, test) = (&inputs[i], &testing[j]);
            let cfg = EncoderConfig {
                seed: derive_seed(
                    encoder.seed,
                    &[
                        Tag::Str("grid"),
                        Tag::Str(train),
                        Tag::Str(test),
                        Tag::from(fold.id),
                    ],
                ),
                ..encoder.clone()
            };
            let raw = run_closed_set(
                features,
                train,
                test,
                fold,
                &cfg,
                classifier,
                Representation::Raw,
            )?;
            let emb = run_closed_set(
                features,
                train,
                test,
                fold,
                &cfg,
                classifier,
                Representation::Embedding,
            )?;
            Ok((raw.accuracy, emb.accuracy))
        })
        .collect::<Result<_>>()?;

    let build = |representation, pick: fn(&(f64, f64)) -> f64| {
        let mut fold_values = vec![vec![Vec::new(); testing.len()]; inputs.len()];
        for (&(i, j, _), r) in jobs.iter().zip(&results) {
            fold_values[i][j].push(pick(r));
        }
        let cells: Vec<Vec<Option<f64>>> = fold_values
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| (!v.is_empty()).then(|| mean(v)))
                    .collect()
            })
            .collect();
        let mut cross = Vec::new();
        for (i, row) in cells.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if inputs[i] != VBR_PLATFORM && inputs[i] != testing[j] {
                        cross.push(*v);
                    }
                }
            }
        }
        PairGridReport {
            representation,
            classifier: classifier.kind,
            training_inputs: inputs.clone(),
            testing_platforms: testing.clone(),
            cells,
            fold_values,
            cross_platform_mean: mean(&cross),
        }
    };
    Ok(PairGrid {
        raw: build(Representation::Raw, |r| r.0),
        embedding: build(Representation::Embedding, |r| r.1),
    })
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of encoder-training classes, taken from the front of the
    /// fold's encoder classes.
    TrainingClasses(Vec<usize>),
    /// Trials per class available to encoder training.
    TrialsPerClass(Vec<u32>),
    BinS(Vec<f64>),
    DurationS(Vec<f64>),
    /// Without, then with, augmented encoder-training traces.
    Augmentation,
    BaseModel(Vec<Arch>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::TrainingClasses(_) => "training_classes",
            SweepAxis::TrialsPerClass(_) => "trials_per_class",
            SweepAxis::BinS(_) => "bin_s",
            SweepAxis::DurationS(_) => "duration_s",
            SweepAxis::Augmentation => "augmentation",
            SweepAxis::BaseModel(_) => "base_model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Augmented copies added per class and platform.
    pub traces_per_class: usize,
    pub fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            traces_per_class: 5,
            fraction: 0.05,
        }
    }
}

/// Everything a sweep holds fixed.
#[derive(Debug, Clone)]
pub struct SweepContext<'a> {
    pub dataset: &'a Dataset,
    pub preprocess: PreprocessConfig,
    pub train_platform: String,
    pub test_platform: String,
    pub fold: Fold,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub raw_accuracy: f64,
    pub embedding_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,raw_accuracy,embedding_accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.axis, r.value, r.raw_accuracy, r.embedding_accuracy
            );
        }
        out
    }
}

/// Keeps only the first `n` trials of every class on every platform.
fn limit_trials(features: &FeatureSet, n: u32) -> Result<FeatureSet> {
    if n == 0 {
        return Err(Error::argument("trials per class must be at least 1"));
    }
    let mut rank = std::collections::BTreeMap::new();
    let mut out = FeatureSet::default();
    for f in features.iter() {
        let r = rank
            .entry((f.key.platform.clone(), f.key.video_id.clone()))
            .or_insert(0u32);
        if *r < n {
            out.insert(f.clone());
        }
        *r += 1;
    }
    Ok(out)
}

/// Adds `traces_per_class` noisy copies of the first trials of each class
/// on each listed platform. Noise is applied to counts, before
/// normalization; copies get fresh trial numbers after the real ones.
pub fn augment_features(
    dataset: &Dataset,
    features: &FeatureSet,
    classes: &[String],
    platforms: &[&str],
    preprocess: &PreprocessConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<FeatureSet> {
    let mut jobs = Vec::new();
    for platform in platforms {
        for class in classes {
            let trials = features.trials(platform, class);
            let Some(&last) = trials.last() else {
                return Err(Error::data(format!(
                    "class {class} has no traces on platform {platform}"
                )));
            };
            for j in 0..augment.traces_per_class {
                let source = TraceKey::new(*platform, class.as_str(), trials[j % trials.len()]);
                let target = TraceKey::new(*platform, class.as_str(), last + 1 + j as u32);
                jobs.push((source, target));
            }
        }
    }
    let extra = jobs
        .par_iter()
        .map(|(source, target)| {
            let data = dataset
                .get(source)
                .ok_or_else(|| Error::data(format!("trace {source} missing from dataset")))?;
            let counts = trace_counts(data, &source.platform, preprocess)?;
            let mut rng = rng_for(
                seed,
                &[
                    Tag::Str("augment"),
                    Tag::Str(&target.platform),
                    Tag::Str(&target.video_id),
                    Tag::from(target.trial),
                ],
            );
            let noisy = augment_gaussian(&counts, augment.fraction, &mut rng);
            finish_features(target.clone(), noisy, preprocess)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = features.clone();
    for f in extra {
        out.insert(f);
    }
    Ok(out)
}

/// One closed-set evaluation (raw and embedding) per axis value, every
/// other setting held fixed.
pub fn sweep(ctx: &SweepContext<'_>, axis: &SweepAxis) -> Result<SweepReport> {
    let base = preprocess_dataset(ctx.dataset, &ctx.preprocess)?;
    let values: Vec<String> = match axis {
        SweepAxis::TrainingClasses(v) => v.iter().map(|x| x.to_string()).collect(),
        SweepAxis::TrialsPerClass(v) => v.iter().map(|x| x.to_string()).collect(),
        SweepAxis::BinS(v) | SweepAxis::DurationS(v) => v.iter().map(|x| x.to_string()).collect(),
        SweepAxis::Augmentation => vec!["off".into(), "on".into()],
        SweepAxis::BaseModel(v) => v
            .iter()
            .map(|a| serde_json::to_value(a).map(|j| j.as_str().unwrap_or_default().to_string()))
            .collect::<std::result::Result<_, _>>()?,
    };
    let rows = (0..values.len())
        .into_par_iter()
        .map(|i| {
            let mut fold = ctx.fold.clone();
            let mut encoder = ctx.encoder.clone();
            let mut features = base.clone();
            let mut encoder_features = None;
            match axis {
                SweepAxis::TrainingClasses(v) => {
                    if v[i] > fold.encoder_classes.len() {
                        return Err(Error::argument(format!(
                            "{} training classes requested, fold has {}",
                            v[i],
                            fold.encoder_classes.len()
                        )));
                    }
                    fold.encoder_classes.truncate(v[i]);
                }
                SweepAxis::TrialsPerClass(v) => encoder_features = Some(limit_trials(&base, v[i])?),
                SweepAxis::BinS(v) => {
                    let cfg = PreprocessConfig {
                        bin_s: v[i],
                        ..ctx.preprocess.clone()
                    };
                    features = preprocess_dataset(ctx.dataset, &cfg)?;
                }
                SweepAxis::DurationS(v) => {
                    let cfg = PreprocessConfig {
                        duration_s: v[i],
                        ..ctx.preprocess.clone()
                    };
                    features = preprocess_dataset(ctx.dataset, &cfg)?;
                }
                SweepAxis::Augmentation => {
                    if i == 1 {
                        encoder_features = Some(augment_features(
                            ctx.dataset,
                            &base,
                            &fold.encoder_classes,
                            &[&ctx.train_platform, &ctx.test_platform],
                            &ctx.preprocess,
                            &ctx.augment,
                            ctx.encoder.seed,
                        )?);
                    }
                }
                SweepAxis::BaseModel(v) => encoder.arch = v[i],
            }
            let enc_features = encoder_features.as_ref().unwrap_or(&features);
            let run = |representation| {
                closed_set_with(
                    enc_features,
                    &features,
                    &ctx.train_platform,
                    &ctx.test_platform,
                    &fold,
                    &encoder,
                    &ctx.classifier,
                    representation,
                )
            };
            Ok(SweepRow {
                value: values[i].clone(),
                raw_accuracy: run(Representation::Raw)?.accuracy,
                embedding_accuracy: run(Representation::Embedding)?.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        axis: axis.name().to_string(),
        rows,
    })
}

/// Same/different pair classification across two platforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    pub fold: usize,
    pub train_platform: String,
    pub test_platform: String,
    pub representation: Representation,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Rows: truth (DIFFERENT, SAME); columns: prediction.
    pub confusion: [[usize; 2]; 2],
    pub accuracy: f64,
    pub same_precision: f64,
    pub same_recall: f64,
}

/// Trains the pair classifier on balanced pairs of the fold's encoder
/// classes and tests it on balanced pairs of its classification classes,
/// one side from each platform.
pub fn run_binary(
    features: &FeatureSet,
    train_platform: &str,
    test_platform: &str,
    fold: &Fold,
    encoder: &EncoderConfig,
    softmax: &SoftmaxConfig,
    representation: Representation,
) -> Result<BinaryReport> {
    fold.validate()?;
    let enc = Split::new(
        features,
        train_platform,
        test_platform,
        &fold.encoder_classes,
    )?;
    let cls = Split::new(
        features,
        train_platform,
        test_platform,
        &fold.classify_classes,
    )?;
    let (enc, cls) = match representation {
        Representation::Raw => (enc, cls),
        Representation::Embedding => {
            let model = train_fold_encoder(
                features,
                &fold.encoder_classes,
                train_platform,
                test_platform,
                encoder,
            )?;
            (enc.embed(&model)?, cls.embed(&model)?)
        }
    };
    let seed = classifier_seed(encoder);
    let train_pairs = make_binary_pairs(
        &enc.train,
        &enc.test,
        &mut rng_for(seed, &[Tag::Str("pairs-train")]),
    )?;
    let test_pairs = make_binary_pairs(
        &cls.train,
        &cls.test,
        &mut rng_for(seed, &[Tag::Str("pairs-test")]),
    )?;
    let model = train_binary(&train_pairs, softmax, seed)?;
    let predictions: Vec<PairLabel> = test_pairs
        .par_iter()
        .map(|p| predict_binary(&model, &p.features))
        .collect::<Result<_>>()?;
    let mut confusion = [[0usize; 2]; 2];
    for (p, pred) in test_pairs.iter().zip(predictions) {
        confusion[p.label.index()][pred.index()] += 1;
    }
    let m = metrics(&confusion.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    Ok(BinaryReport {
        fold: fold.id,
        train_platform: train_platform.to_string(),
        test_platform: test_platform.to_string(),
        representation,
        train_pairs: train_pairs.len(),
        test_pairs: test_pairs.len(),
        confusion,
        accuracy: m.accuracy,
        same_precision: m.precision[1],
        same_recall: m.recall[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Vec1D;
    use crate::preprocess::FeatureVector;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:03}")).collect()
    }

    #[test]
    fn fold_sizes_follow_the_protocol() {
        let all = names(100);
        let p = make_folds(&all, 20, 7, false).unwrap();
        assert_eq!(p.folds.len(), 5);
        assert!(p.folds.iter().all(|f| f.encoder_classes.len() == 80));
        let p = make_folds(&all, 10, 7, false).unwrap();
        assert_eq!(p.folds.len(), 10);
        assert!(p.folds.iter().all(|f| f.encoder_classes.len() == 90));
        assert!(make_folds(&all, 30, 7, false).is_err());
        assert_eq!(
            make_folds(&all, 20, 7, false).unwrap(),
            make_folds(&all, 20, 7, false).unwrap()
        );
    }

    #[test]
    fn open_set_folds_split_in_half() {
        let p = make_folds(&names(40), 20, 1, true).unwrap();
        for f in &p.folds {
            let s = f.open_set.as_ref().unwrap();
            assert_eq!((s.known.len(), s.unknown.len()), (10, 10));
        }
    }

    #[test]
    fn corrupted_fold_is_rejected() {
        let mut p = make_folds(&names(20), 10, 3, false).unwrap();
        let leaked = p.folds[0].classify_classes[0].clone();
        p.folds[0].encoder_classes.push(leaked);
        assert!(matches!(p.folds[0].validate(), Err(Error::Data(_))));
        assert!(p.validate(&names(20)).is_err());
    }

    #[test]
    fn metrics_examples() {
        let m = metrics(&[vec![1, 1], vec![0, 2]]);
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.precision, vec![1.0, 2.0 / 3.0]);
        assert_eq!(m.recall, vec![0.5, 1.0]);

        let perfect = metrics(&[vec![3, 0], vec![0, 4]]);
        assert_eq!(
            (
                perfect.accuracy,
                perfect.precision.clone(),
                perfect.recall.clone()
            ),
            (1.0, vec![1.0; 2], vec![1.0; 2])
        );

        let one = metrics(&[vec![2, 0, 0], vec![3, 0, 0], vec![1, 0, 0]]);
        assert_eq!(one.recall, vec![1.0, 0.0, 0.0]);
        assert_eq!(one.precision[1], 0.0);
    }

    fn toy_features(platforms: &[&str], classes: usize, trials: u32) -> FeatureSet {
        let mut fs = FeatureSet::default();
        for p in platforms {
            for c in 0..classes {
                for t in 0..trials {
                    let values: Vec<f64> = (0..12)
                        .map(|i| ((i * (c + 1)) % 7) as f64 / 7.0 + 0.001 * t as f64)
                        .collect();
                    fs.insert(FeatureVector {
                        key: TraceKey::new(*p, format!("v{c:03}"), t),
                        values: Vec1D::new(values).unwrap(),
                    });
                }
            }
        }
        fs
    }

    #[test]
    fn same_platform_1nn_on_clean_data_is_perfect() {
        let fs = toy_features(&["A"], 6, 4);
        let plan = make_folds(&names(6), 3, 2, false).unwrap();
        let r = run_closed_set(
            &fs,
            "A",
            "A",
            &plan.folds[0],
            &EncoderConfig::default(),
            &ClassifierConfig::default(),
            Representation::Raw,
        )
        .unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.confusion.iter().all(|row| row.iter().sum::<usize>() == 2));
    }

    #[test]
    fn vbr_cannot_be_tested_on() {
        let fs = toy_features(&["A", VBR_PLATFORM], 4, 1);
        assert!(Split::new(&fs, "A", VBR_PLATFORM, &names(4)).is_err());
    }

    fn toy_open_run(probs: Vec<Vec<f64>>, truth: Vec<Option<usize>>) -> OpenSetRun {
        OpenSetRun {
            fold: 0,
            train_platform: "A".into(),
            test_platform: "B".into(),
            representation: Representation::Raw,
            known: vec!["x".into(), "y".into()],
            probs,
            truth,
            encoder: None,
            softmax: SoftmaxConfig::default(),
        }
    }

    #[test]
    fn open_set_report_counts_unknown() {
        let run = toy_open_run(
            vec![
                vec![0.9, 0.05, 0.05],
                vec![0.4, 0.35, 0.25],
                vec![0.1, 0.85, 0.05],
                vec![0.6, 0.3, 0.1],
            ],
            vec![Some(0), Some(1), Some(1), None],
        );
        let r = run.report(0.5);
        assert_eq!(
            r.confusion,
            vec![vec![1, 0, 0], vec![0, 1, 1], vec![1, 0, 0]]
        );
        assert_eq!(r.labels.last().unwrap(), UNKNOWN_LABEL);
        assert_eq!(r.precision, vec![0.5, 1.0]);
        assert_eq!(r.recall, vec![1.0, 0.5]);
        assert_eq!(r.accuracy, 0.5);
        let curve = threshold_sweep(&run, &threshold_grid()).unwrap();
        assert_eq!(curve.points.len(), 21);
        assert_eq!(curve.points[0].recall, 0.75);
    }

    #[test]
    fn unknown_only_at_high_threshold() {
        let run = toy_open_run(vec![vec![0.5, 0.3, 0.2]; 4], vec![None; 4]);
        let r = run.report(1.0 - 1e-9);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn csv_shapes() {
        let report = PairGridReport {
            representation: Representation::Raw,
            classifier: ClassifierKind::Knn1,
            training_inputs: vec!["A".into(), "B".into(), VBR_PLATFORM.into()],
            testing_platforms: vec!["A".into(), "B".into()],
            cells: vec![
                vec![None, Some(0.5)],
                vec![Some(0.25), None],
                vec![Some(0.1), Some(0.2)],
            ],
            fold_values: vec![],
            cross_platform_mean: 0.375,
        };
        assert_eq!(
            report.to_csv(),
            "training_input,A,B\nA,NA,0.5\nB,0.25,NA\nVBR,0.1,0.2\n"
        );
        assert_eq!(report.pair_mean("A", "B"), Some(0.375));
    }

    proptest! {
        #[test]
        fn folds_partition_the_classes(k in 1usize..6, folds in 1usize..6, seed in any::<u64>()) {
            let all = names(k * folds);
            let plan = make_folds(&all, k, seed, false).unwrap();
            let mut seen: Vec<&String> = plan.folds.iter().flat_map(|f| &f.classify_classes).collect();
            prop_assert_eq!(seen.len(), all.len());
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), all.len());
            for f in &plan.folds {
                prop_assert!(f.encoder_classes.iter().all(|c| !f.classify_classes.contains(c)));
                prop_assert_eq!(f.encoder_classes.len() + k, all.len());
            }
        }

        #[test]
        fn recall_never_rises_with_threshold(
            raw in prop::collection::vec((prop::collection::vec(0.01f64..1.0, 3), 0usize..3), 1..40)
        ) {
            let probs: Vec<Vec<f64>> = raw
                .iter()
                .map(|(r, _)| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                })
                .collect();
            let truth = raw.iter().map(|(_, t)| (*t < 2).then_some(*t)).collect();
            let curve = threshold_sweep(&toy_open_run(probs, truth), &threshold_grid()).unwrap();
            for w in curve.points.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
            }
        }
    }
}
