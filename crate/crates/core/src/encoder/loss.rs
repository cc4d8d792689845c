use rayon::prelude::*;

use super::EncoderModel;
use crate::error::{ensure_dims, Error, Result};
use crate::nn::{add_grads, scale_grads, Grads};
use crate::numeric::euclidean_distance;
use crate::seed::{rng_for, Tag};

/// Triplets per parallel work unit. Fixed so the reduction order, and
/// therefore the floating-point result, does not depend on thread count.
const CHUNK: usize = 8;

/// `max(d(a, p) - d(a, n) + margin, 0)` with Euclidean `d`.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<f64> {
    ensure_dims(anchor.len(), negative.len())?;
    let dap = euclidean_distance(anchor, positive)?;
    let dan = euclidean_distance(anchor, negative)?;
    Ok((dap - dan + margin).max(0.0))
}

/// Feature vectors of one training triplet.
#[derive(Debug, Clone, Copy)]
pub struct TripletInput<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

/// `(x - y) / |x - y|`, or zeros at `x == y` (subgradient 0).
fn unit_diff(x: &[f64], y: &[f64], dist: f64) -> Vec<f64> {
    if dist > 0.0 {
        x.iter().zip(y).map(|(a, b)| (a - b) / dist).collect()
    } else {
        vec![0.0; x.len()]
    }
}

fn triplet_contribution(
    model: &EncoderModel,
    t: &TripletInput<'_>,
    margin: f64,
    mask_seed: u64,
    index: usize,
    grads: &mut Grads,
) -> Result<f64> {
    let net = &model.network;
    let mut rng = rng_for(mask_seed, &[Tag::from(index)]);
    let pa = net.forward(t.anchor, Some(&mut rng))?;
    let pp = net.forward(t.positive, Some(&mut rng))?;
    let pn = net.forward(t.negative, Some(&mut rng))?;
    let (ea, ep, en) = (&pa.output, &pp.output, &pn.output);
    let dap = euclidean_distance(ea, ep)?;
    let dan = euclidean_distance(ea, en)?;
    let loss = dap - dan + margin;
    if loss <= 0.0 {
        return Ok(0.0);
    }
    let u_ap = unit_diff(ea, ep, dap);
    let u_an = unit_diff(ea, en, dan);
    let d_anchor: Vec<f64> = u_ap.iter().zip(&u_an).map(|(p, n)| p - n).collect();
    let d_positive: Vec<f64> = u_ap.iter().map(|v| -v).collect();
    net.backward(&pa, &d_anchor, grads)?;
    net.backward(&pp, &d_positive, grads)?;
    net.backward(&pn, &u_an, grads)?;
    Ok(loss)
}

/// Mean triplet loss of a batch and its gradient with respect to every
/// model parameter.
///
/// Dropout masks for triplet `i` come from a stream keyed on
/// `(mask_seed, i)`, so repeating a call reproduces the same masks.
pub fn triplet_batch_gradients(
    model: &EncoderModel,
    batch: &[TripletInput<'_>],
    margin: f64,
    mask_seed: u64,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::argument("empty triplet batch"));
    }
    let partials: Vec<(f64, Grads)> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = model.network.zero_grads();
            let mut loss = 0.0;
            let mut local = model.network.zero_grads();
            for (j, t) in chunk.iter().enumerate() {
                let l =
                    triplet_contribution(model, t, margin, mask_seed, c * CHUNK + j, &mut local)?;
                if l > 0.0 {
                    loss += l;
                    add_grads(&mut grads, &local);
                    local.iter_mut().for_each(|g| g.fill(0.0));
                }
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = model.network.zero_grads();
    for (loss, g) in &partials {
        total += loss;
        add_grads(&mut grads, g);
    }
    let inv = 1.0 / batch.len() as f64;
    scale_grads(&mut grads, inv);
    Ok((total * inv, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Arch, EncoderConfig};

    #[test]
    fn hand_computed_losses() {
        assert_eq!(
            triplet_loss(&[0.0, 0.0], &[3.0, 4.0], &[6.0, 8.0], 1.0).unwrap(),
            0.0
        );
        assert_eq!(
            triplet_loss(&[0.0, 0.0], &[0.0, 1.0], &[0.0, 1.5], 1.0).unwrap(),
            0.5
        );
        // anchor == positive reduces to max(margin - d(a, n), 0)
        assert_eq!(
            triplet_loss(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.25], 1.0).unwrap(),
            0.75
        );
        assert!(triplet_loss(&[0.0], &[0.0, 1.0], &[0.0], 1.0).is_err());
    }

    fn small_model(dropout: f64) -> EncoderModel {
        let cfg = EncoderConfig {
            arch: Arch::Mlp,
            embedding_dim: 4,
            hidden_dim: 16,
            dropout_rate: dropout,
            ..EncoderConfig::default()
        };
        EncoderModel::new(&cfg, 6).unwrap()
    }

    #[test]
    fn inactive_hinge_gives_zero_gradient() {
        let m = small_model(0.0);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let y = [0.9, 0.1, 0.8, 0.0, 0.7, 0.2];
        let t = TripletInput {
            anchor: &x,
            positive: &x,
            negative: &y,
        };
        // Margin small enough that d(a, n) > margin.
        let dan = euclidean_distance(&m.embed(&x).unwrap().0, &m.embed(&y).unwrap().0).unwrap();
        let (loss, g) = triplet_batch_gradients(&m, &[t], dan * 0.5, 0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_triplet_is_linear_in_the_mean() {
        let m = small_model(0.0);
        let a = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let p = [0.2, 0.2, 0.1, 0.5, 0.4, 0.6];
        let n = [0.1, 0.25, 0.3, 0.38, 0.5, 0.62];
        let t = TripletInput {
            anchor: &a,
            positive: &p,
            negative: &n,
        };
        let (l1, g1) = triplet_batch_gradients(&m, &[t], 1.0, 0).unwrap();
        let (l2, g2) = triplet_batch_gradients(&m, &[t, t], 1.0, 0).unwrap();
        assert!(l1 > 0.0);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    /// Mean triplet loss over a batch, evaluated without dropout.
    fn batch_loss(m: &EncoderModel, batch: &[TripletInput<'_>], margin: f64) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|t| {
                let e = |x: &[f64]| m.embed(x).unwrap().0;
                triplet_loss(&e(t.anchor), &e(t.positive), &e(t.negative), margin).unwrap()
            })
            .sum();
        total / batch.len() as f64
    }

    #[allow(clippy::needless_range_loop)]
    fn gradient_check(arch: Arch) {
        let cfg = EncoderConfig {
            arch,
            embedding_dim: 8,
            hidden_dim: 10,
            dropout_rate: 0.0,
            seed: 11,
            ..EncoderConfig::default()
        };
        let mut m = EncoderModel::new(&cfg, 12).unwrap();
        let vec = |k: usize| -> Vec<f64> {
            (0..12)
                .map(|i| ((i * 5 + k * 3) % 13) as f64 / 13.0 + 0.01 * k as f64)
                .collect()
        };
        let (xs, ys, zs, ws) = (vec(1), vec(2), vec(4), vec(7));
        let batch = [
            TripletInput {
                anchor: &xs,
                positive: &ys,
                negative: &zs,
            },
            TripletInput {
                anchor: &ws,
                positive: &xs,
                negative: &ys,
            },
        ];
        let margin = 5.0;
        let (loss, grads) = triplet_batch_gradients(&m, &batch, margin, 0).unwrap();
        assert!((loss - batch_loss(&m, &batch, margin)).abs() < 1e-12);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for p in 0..m.network.params.len() {
            for i in 0..m.network.params[p].values.len() {
                let orig = m.network.params[p].values[i];
                m.network.params[p].values[i] = orig + h;
                let up = batch_loss(&m, &batch, margin);
                m.network.params[p].values[i] = orig - h;
                let down = batch_loss(&m, &batch, margin);
                m.network.params[p].values[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[p][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "{arch:?}: worst relative error {worst}");
    }

    #[test]
    fn mlp_triplet_gradient_matches_finite_differences() {
        gradient_check(Arch::Mlp);
    }

    #[test]
    fn cnn_triplet_gradient_matches_finite_differences() {
        gradient_check(Arch::Cnn1d);
    }

    #[test]
    fn rnn_triplet_gradient_matches_finite_differences() {
        gradient_check(Arch::Rnn);
    }
}
