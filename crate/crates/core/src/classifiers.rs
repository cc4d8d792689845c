//! Downstream classifiers over embeddings or raw feature vectors.
//!
//! Labels are dense class indices `0..n`. Callers map video ids to indices.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::nn::{add_grads, scale_grads, Grads, Network, NetworkBuilder};
use crate::numeric::squared_distance;
use crate::optim::sgd_step;
use crate::seed::{rng_for, Tag};

const CHUNK: usize = 8;

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_training_set(points: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    ensure_dims(points.len(), labels.len())?;
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::argument("zero-dimensional training points"));
    }
    for p in points {
        ensure_dims(dim, p.len())?;
    }
    Ok(dim)
}

/// Brute-force k-nearest-neighbour classifier with Euclidean distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl KnnModel {
    pub fn fit(points: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> Result<Self> {
        check_training_set(&points, &labels)?;
        if k == 0 {
            return Err(Error::argument("k must be at least 1"));
        }
        if k > points.len() {
            return Err(Error::argument(format!(
                "k = {k} exceeds the {} stored points",
                points.len()
            )));
        }
        Ok(KnnModel { k, points, labels })
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Majority label among the `k` nearest points.
    ///
    /// Neighbours at equal distance are ordered by label. Vote ties go to
    /// the label with the smaller summed distance, then the smaller label.
    pub fn predict(&self, query: &[f64]) -> Result<usize> {
        ensure_dims(self.dim(), query.len())?;
        let mut scored: Vec<(f64, usize)> = self
            .points
            .iter()
            .zip(&self.labels)
            .map(|(p, &l)| (squared_distance(p, query), l))
            .collect();
        let by_distance =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < scored.len() {
            scored.select_nth_unstable_by(self.k - 1, by_distance);
            scored.truncate(self.k);
        }
        scored.sort_by(by_distance);

        let mut votes: Vec<(usize, usize, f64)> = Vec::new();
        for (d2, label) in scored {
            let d = d2.sqrt();
            match votes.iter_mut().find(|v| v.0 == label) {
                Some(v) => {
                    v.1 += 1;
                    v.2 += d;
                }
                None => votes.push((label, 1, d)),
            }
        }
        let best = votes
            .into_iter()
            .min_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
            .map(|v| v.0)
            .expect("k >= 1");
        Ok(best)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

/// Nearest mean embedding vector: one centroid per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmevModel {
    pub means: Vec<Vec<f64>>,
}

impl NmevModel {
    /// Labels must cover `0..=max(labels)`; a class index without any
    /// point is an error.
    pub fn fit(points: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let dim = check_training_set(points, labels)?;
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut sums = vec![vec![0.0; dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        // Accumulate in label-sorted order of the values themselves so the
        // result does not depend on training order.
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            labels[a].cmp(&labels[b]).then_with(|| {
                points[a]
                    .iter()
                    .zip(&points[b])
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
        });
        for i in order {
            let l = labels[i];
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(&points[i]) {
                *s += x;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::data(format!("class {empty} has no training points")));
        }
        let means = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        Ok(NmevModel { means })
    }

    pub fn predict(&self, query: &[f64]) -> Result<usize> {
        ensure_dims(self.means[0].len(), query.len())?;
        let best = self
            .means
            .iter()
            .enumerate()
            .map(|(l, m)| (squared_distance(m, query), l))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|v| v.1)
            .expect("at least one class");
        Ok(best)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftmaxConfig {
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        SoftmaxConfig {
            hidden_dim: 128,
            dropout_rate: 0.1,
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.1,
        }
    }
}

impl SoftmaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::argument(
                "hidden_dim and batch_size must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::argument("dropout_rate must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::argument("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// 1-D CNN with a softmax output, trained on integer labels with
/// cross-entropy.
///
/// conv(8 filters, width 3) → ReLU → max-pool(2) → dense(hidden) → ReLU
/// → dense(hidden) → ReLU → dropout → dense(n_out) → softmax
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    pub n_out: usize,
    pub network: Network,
}

impl SoftmaxClassifier {
    pub fn new(input_len: usize, n_out: usize, config: &SoftmaxConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_out < 2 {
            return Err(Error::argument(
                "softmax classifier needs at least two outputs",
            ));
        }
        let mut rng = rng_for(seed, &[Tag::Str("softmax-init")]);
        let network = NetworkBuilder::new(input_len, &mut rng)
            .conv1d(8, 3)?
            .relu()
            .max_pool(2)?
            .dense(config.hidden_dim)
            .relu()
            .dense(config.hidden_dim)
            .relu()
            .dropout(config.dropout_rate)
            .dense(n_out)
            .build();
        Ok(SoftmaxClassifier { n_out, network })
    }

    pub fn input_len(&self) -> usize {
        self.network.input_len
    }

    /// Class probabilities with dropout off.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.network.infer(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

/// Mean cross-entropy of a batch and its parameter gradient. Dropout masks
/// for sample `i` come from `(mask_seed, i)`.
pub(crate) fn softmax_batch_gradients(
    model: &SoftmaxClassifier,
    inputs: &[&[f64]],
    labels: &[usize],
    mask_seed: u64,
) -> Result<(f64, Grads)> {
    ensure_dims(inputs.len(), labels.len())?;
    if inputs.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let net = &model.network;
    let partials: Vec<(f64, Grads)> = inputs
        .par_chunks(CHUNK)
        .zip(labels.par_chunks(CHUNK))
        .enumerate()
        .map(|(c, (xs, ys))| {
            let mut grads = net.zero_grads();
            let mut loss = 0.0;
            for (j, (x, &y)) in xs.iter().zip(ys).enumerate() {
                let mut rng = rng_for(mask_seed, &[Tag::from(c * CHUNK + j)]);
                let pass = net.forward(x, Some(&mut rng))?;
                let mut p = softmax(&pass.output);
                loss -= p[y].max(f64::MIN_POSITIVE).ln();
                p[y] -= 1.0;
                net.backward(&pass, &p, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = net.zero_grads();
    for (l, g) in &partials {
        total += l;
        add_grads(&mut grads, g);
    }
    let inv = 1.0 / inputs.len() as f64;
    scale_grads(&mut grads, inv);
    Ok((total * inv, grads))
}

/// Trains a [`SoftmaxClassifier`] with plain minibatch SGD.
pub fn train_softmax_cnn(
    inputs: &[Vec<f64>],
    labels: &[usize],
    n_out: usize,
    config: &SoftmaxConfig,
    seed: u64,
) -> Result<SoftmaxClassifier> {
    check_training_set(inputs, labels)?;
    if let Some(bad) = labels.iter().find(|&&l| l >= n_out) {
        return Err(Error::argument(format!(
            "label {bad} out of range for {n_out} outputs"
        )));
    }
    let mut model = SoftmaxClassifier::new(inputs[0].len(), n_out, config, seed)?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(
            seed,
            &[Tag::Str("softmax-shuffle"), Tag::from(epoch)],
        ));
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<&[f64]> = idx.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mask_seed = crate::seed::derive_seed(
                seed,
                &[Tag::Str("softmax-dropout"), Tag::from(epoch), Tag::from(bi)],
            );
            let (_, grads) = softmax_batch_gradients(&model, &xs, &ys, mask_seed)?;
            sgd_step(&mut model.network.params, &grads, config.learning_rate)?;
        }
    }
    Ok(model)
}

/// Open-set decision: a known class index, or unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpenSetLabel {
    Known(usize),
    Unknown,
}

/// Unknown exactly when the highest probability is below `threshold`;
/// otherwise the argmax class (lowest index among equal maxima).
pub fn open_set_classify(probs: &[f64], threshold: f64) -> OpenSetLabel {
    let best = argmax(probs);
    if probs[best] < threshold {
        OpenSetLabel::Unknown
    } else {
        OpenSetLabel::Known(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PairLabel {
    Different,
    Same,
}

impl PairLabel {
    pub fn index(self) -> usize {
        match self {
            PairLabel::Different => 0,
            PairLabel::Same => 1,
        }
    }
}

/// One sample from each side, concatenated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub features: Vec<f64>,
    pub label: PairLabel,
}

impl PairSample {
    pub fn new(a: &[f64], b: &[f64], label: PairLabel) -> Result<Self> {
        ensure_dims(a.len(), b.len())?;
        let mut features = a.to_vec();
        features.extend_from_slice(b);
        Ok(PairSample { features, label })
    }
}

/// Every same-video pair across the two sides, plus an equal number of
/// different-video pairs drawn without replacement.
pub fn make_binary_pairs<R: Rng + ?Sized>(
    side_a: &[(Vec<f64>, usize)],
    side_b: &[(Vec<f64>, usize)],
    rng: &mut R,
) -> Result<Vec<PairSample>> {
    let mut same = Vec::new();
    let mut different = Vec::new();
    for (i, (_, la)) in side_a.iter().enumerate() {
        for (j, (_, lb)) in side_b.iter().enumerate() {
            if la == lb {
                same.push((i, j));
            } else {
                different.push((i, j));
            }
        }
    }
    if same.is_empty() {
        return Err(Error::data("no same-video pairs across the two sides"));
    }
    if different.len() < same.len() {
        return Err(Error::data(
            "too few different-video pairs to balance the set",
        ));
    }
    let mut picked: Vec<(usize, usize)> =
        rand::seq::index::sample(rng, different.len(), same.len())
            .into_iter()
            .map(|k| different[k])
            .collect();
    picked.sort_unstable();
    let build = |(i, j): (usize, usize), label| PairSample::new(&side_a[i].0, &side_b[j].0, label);
    same.into_iter()
        .map(|p| build(p, PairLabel::Same))
        .chain(picked.into_iter().map(|p| build(p, PairLabel::Different)))
        .collect()
}

pub fn train_binary(
    pairs: &[PairSample],
    config: &SoftmaxConfig,
    seed: u64,
) -> Result<SoftmaxClassifier> {
    let inputs: Vec<Vec<f64>> = pairs.iter().map(|p| p.features.clone()).collect();
    let labels: Vec<usize> = pairs.iter().map(|p| p.label.index()).collect();
    train_softmax_cnn(&inputs, &labels, 2, config, seed)
}

pub fn predict_binary(model: &SoftmaxClassifier, pair: &[f64]) -> Result<PairLabel> {
    Ok(match model.predict(pair)? {
        1 => PairLabel::Same,
        _ => PairLabel::Different,
    })
}
