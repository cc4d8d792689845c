use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{triplet_batch_gradients, TripletInput};
use super::mining::{mine_offline_triplets, mine_semihard};
use super::{EncoderConfig, EncoderModel, Mining};
use crate::error::{Error, Result};
use crate::ingest::TraceKey;
use crate::nn::{add_grads, ForwardPass, Grads};
use crate::numeric::{euclidean_distance, Embedding};
use crate::optim::{adam_step, AdamState};
use crate::preprocess::FeatureSet;
use crate::seed::{derive_seed, rng_for, Tag};

const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedEncoder {
    pub model: EncoderModel,
    /// Mean training loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

fn vector<'a>(features: &'a FeatureSet, key: &TraceKey) -> Result<&'a [f64]> {
    features
        .get(key)
        .map(|f| f.values.as_slice())
        .ok_or_else(|| Error::data(format!("no features for {key}")))
}

/// Trains an encoder on `classes` streamed on the two given platforms.
///
/// Offline mining draws triplets in both directions (each platform serves
/// as anchor once) and keeps them fixed; batches are reshuffled per epoch.
/// Online mining reshuffles traces per epoch and selects semi-hard
/// triplets inside every batch, stopping early once an epoch yields no
/// loss.
pub fn train_encoder(
    features: &FeatureSet,
    classes: &[String],
    platforms: (&str, &str),
    config: &EncoderConfig,
) -> Result<TrainedEncoder> {
    config.validate()?;
    if classes.len() < 2 {
        return Err(Error::data("encoder training needs at least two classes"));
    }
    let probe = classes
        .iter()
        .flat_map(|c| features.of(platforms.0, c))
        .next()
        .ok_or_else(|| Error::data(format!("no traces on platform {}", platforms.0)))?;
    let model = EncoderModel::new(config, probe.values.len())?;
    match config.mining {
        Mining::OfflineExhaustive => train_offline(features, classes, platforms, config, model),
        Mining::OnlineSemihard => train_online(features, classes, platforms, config, model),
    }
}

fn train_offline(
    features: &FeatureSet,
    classes: &[String],
    (a, b): (&str, &str),
    config: &EncoderConfig,
    mut model: EncoderModel,
) -> Result<TrainedEncoder> {
    let mut rng = rng_for(config.seed, &[Tag::Str("mine")]);
    let mut triplets = mine_offline_triplets(features, a, b, classes, &mut rng)?;
    if a != b {
        triplets.extend(mine_offline_triplets(features, b, a, classes, &mut rng)?);
    }
    let inputs: Vec<TripletInput<'_>> = triplets
        .iter()
        .map(|t| {
            Ok(TripletInput {
                anchor: vector(features, &t.anchor)?,
                positive: vector(features, &t.positive)?,
                negative: vector(features, &t.negative)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new(&model.network.params);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..config.epochs() {
        order.shuffle(&mut rng_for(
            config.seed,
            &[Tag::Str("shuffle"), Tag::from(epoch)],
        ));
        let mut total = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TripletInput<'_>> = idx.iter().map(|&i| inputs[i]).collect();
            let mask_seed = derive_seed(
                config.seed,
                &[Tag::Str("dropout"), Tag::from(epoch), Tag::from(bi)],
            );
            let (loss, grads) = triplet_batch_gradients(&model, &batch, config.margin, mask_seed)?;
            total += loss * batch.len() as f64;
            adam_step(
                &mut model.network.params,
                &grads,
                &mut adam,
                config.learning_rate,
            )?;
        }
        history.push(total / inputs.len() as f64);
    }
    Ok(TrainedEncoder {
        model,
        loss_history: history,
    })
}

fn train_online(
    features: &FeatureSet,
    classes: &[String],
    (a, b): (&str, &str),
    config: &EncoderConfig,
    mut model: EncoderModel,
) -> Result<TrainedEncoder> {
    let platform_list: Vec<&str> = if a == b { vec![a] } else { vec![a, b] };
    let mut samples: Vec<(&[f64], usize, usize)> = Vec::new();
    for (pi, platform) in platform_list.iter().enumerate() {
        for (ci, class) in classes.iter().enumerate() {
            let traces = features.of(platform, class);
            if traces.is_empty() {
                return Err(Error::data(format!(
                    "class {class} has no traces on platform {platform}"
                )));
            }
            samples.extend(traces.iter().map(|f| (f.values.as_slice(), ci, pi)));
        }
    }

    let mut adam = AdamState::new(&model.network.params);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs() {
        order.shuffle(&mut rng_for(
            config.seed,
            &[Tag::Str("shuffle"), Tag::from(epoch)],
        ));
        let mut batch_losses = Vec::new();
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let mask_seed = derive_seed(
                config.seed,
                &[Tag::Str("dropout"), Tag::from(epoch), Tag::from(bi)],
            );
            let batch: Vec<_> = idx.iter().map(|&i| samples[i]).collect();
            if let Some((loss, grads)) = online_batch(&model, &batch, config.margin, mask_seed)? {
                adam_step(
                    &mut model.network.params,
                    &grads,
                    &mut adam,
                    config.learning_rate,
                )?;
                batch_losses.push(loss);
            } else {
                batch_losses.push(0.0);
            }
        }
        let mean = batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64;
        history.push(mean);
        if mean == 0.0 {
            break;
        }
    }
    Ok(TrainedEncoder {
        model,
        loss_history: history,
    })
}

/// Forward, mine and backpropagate one online batch. `None` when no
/// triplet was selected.
fn online_batch(
    model: &EncoderModel,
    batch: &[(&[f64], usize, usize)],
    margin: f64,
    mask_seed: u64,
) -> Result<Option<(f64, Grads)>> {
    let net = &model.network;
    let passes: Vec<ForwardPass> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x, _, _))| {
            let mut rng = rng_for(mask_seed, &[Tag::from(i)]);
            net.forward(x, Some(&mut rng))
        })
        .collect::<Result<_>>()?;
    let embeddings: Vec<Embedding> = passes.iter().map(|p| Embedding(p.output.clone())).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.1).collect();
    let platforms: Vec<usize> = batch.iter().map(|s| s.2).collect();
    let selected = mine_semihard(&embeddings, &labels, &platforms, margin)?;
    if selected.is_empty() {
        return Ok(None);
    }

    let dim = model.embedding_dim;
    let mut d_emb = vec![vec![0.0; dim]; batch.len()];
    let mut loss_sum = 0.0;
    let inv = 1.0 / selected.len() as f64;
    for s in &selected {
        let (ea, ep, en) = (
            &embeddings[s.anchor].0,
            &embeddings[s.positive].0,
            &embeddings[s.negative].0,
        );
        let dap = euclidean_distance(ea, ep)?;
        let dan = euclidean_distance(ea, en)?;
        let loss = dap - dan + margin;
        if loss <= 0.0 {
            continue;
        }
        loss_sum += loss;
        for k in 0..dim {
            let u_ap = if dap > 0.0 {
                (ea[k] - ep[k]) / dap
            } else {
                0.0
            };
            let u_an = if dan > 0.0 {
                (ea[k] - en[k]) / dan
            } else {
                0.0
            };
            d_emb[s.anchor][k] += inv * (u_ap - u_an);
            d_emb[s.positive][k] -= inv * u_ap;
            d_emb[s.negative][k] += inv * u_an;
        }
    }

    let partials: Vec<Grads> = passes
        .par_chunks(CHUNK)
        .zip(d_emb.par_chunks(CHUNK))
        .map(|(ps, ds)| {
            let mut g = net.zero_grads();
            for (p, d) in ps.iter().zip(ds) {
                if d.iter().any(|v| *v != 0.0) {
                    net.backward(p, d, &mut g)?;
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = net.zero_grads();
    for g in &partials {
        add_grads(&mut grads, g);
    }
    Ok(Some((loss_sum * inv, grads)))
}
