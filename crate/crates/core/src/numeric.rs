//! Vector types and the handful of numeric primitives the pipeline needs.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

/// A non-empty sequence of finite reals (packet counts, bytes or normalized
/// features, depending on where it sits in the pipeline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vec1D(Vec<f64>);

impl Vec1D {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::argument(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Vec1D(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.0.len()
    }
}

impl std::ops::Deref for Vec1D {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vec1D {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vec1D::new(values)
    }
}

impl From<Vec1D> for Vec<f64> {
    fn from(v: Vec1D) -> Self {
        v.0
    }
}

/// Output of an encoder: a fixed-dimension point in the learned space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dims(a.len(), b.len())?;
    Ok(squared_distance(a, b).sqrt())
}

/// Squared Euclidean distance without the length check. Callers guarantee
/// equal lengths.
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Endpoint-preserving linear interpolation of `v` onto `new_len` samples.
///
/// Output sample `j` sits at source position `j * (len - 1) / (new_len - 1)`.
/// A single-sample output takes the first input value.
pub fn resample_linear(v: &[f64], new_len: usize) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if new_len == 0 {
        return Err(Error::argument("resample length must be at least 1"));
    }
    if new_len == v.len() {
        return Ok(v.to_vec());
    }
    if new_len == 1 || v.len() == 1 {
        return Ok(vec![v[0]; new_len]);
    }
    let last = v.len() - 1;
    let denom = (new_len - 1) as f64;
    let out = (0..new_len)
        .map(|j| {
            if j == new_len - 1 {
                return v[last];
            }
            let pos = j as f64 * last as f64 / denom;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if frac == 0.0 || lo >= last {
                v[lo.min(last)]
            } else {
                v[lo] + (v[lo + 1] - v[lo]) * frac
            }
        })
        .collect();
    Ok(out)
}

/// Min-max normalization to `[0, 1]`. Constant input maps to all zeros.
pub fn minmax_normalize(v: &[f64]) -> Vec<f64> {
    let (min, max) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter()
        .map(|&x| ((x - min) / range).clamp(0.0, 1.0))
        .collect()
}
