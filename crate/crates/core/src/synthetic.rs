//! Synthetic multi-platform traffic derived from per-video VBR profiles.
//!
//! Each video gets a smooth, strictly positive bitrate profile. A platform
//! model re-chunks that profile into delivery bursts (one per segment),
//! scales and perturbs them, and adds the platform's own quirks: an initial
//! buffering phase that delivers content faster than real time, an early end
//! of transmission, re-encoding that reshapes the bitrate curve, a random
//! per-session start delay, and periodic non-video side traffic.
//!
//! All randomness is keyed on the master seed plus (class, platform, trial),
//! so a dataset is a pure function of its [`SyntheticSpec`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, TraceData, TraceKey, VBR_PLATFORM};
use crate::numeric::Vec1D;
use crate::seed::{rng_for, Tag};

/// Correlation time of the log-bitrate process, seconds.
const PROFILE_CORRELATION_S: f64 = 30.0;
/// Stationary standard deviation of the log-bitrate process.
const PROFILE_LOG_SIGMA: f64 = 0.6;
/// Moving-average window applied to the exponentiated process, seconds.
const PROFILE_SMOOTHING_S: f64 = 10.0;
/// Mean profile value per second of content.
const PROFILE_MEAN_RATE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Startup {
    /// Seconds of content delivered during the buffering phase.
    pub span_s: f64,
    /// How much faster than real time that content arrives.
    pub speedup: f64,
}

/// Periodic non-video fetches (ads, telemetry, thumbnails).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideTraffic {
    pub period_s: f64,
    pub offset_s: f64,
    /// Size of each fetch, in seconds' worth of the video's mean rate.
    pub mass_s: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformModel {
    pub segment_s: f64,
    pub gain: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub startup: Option<Startup>,
    #[serde(default)]
    pub truncate_s: Option<f64>,
    /// Re-encoding exponent: the platform's bitrate follows `profile^exponent`,
    /// rescaled to the same total.
    #[serde(default = "one")]
    pub encoding_exponent: f64,
    /// Upper bound of the uniform random start delay of each session.
    #[serde(default)]
    pub jitter_s: f64,
    #[serde(default)]
    pub side_traffic: Option<SideTraffic>,
}

impl PlatformModel {
    /// Plain chunked delivery: no startup, truncation or platform quirks.
    pub fn plain(segment_s: f64, gain: f64, noise_sigma: f64) -> Self {
        PlatformModel {
            segment_s,
            gain,
            noise_sigma,
            startup: None,
            truncate_s: None,
            encoding_exponent: 1.0,
            jitter_s: 0.0,
            side_traffic: None,
        }
    }

    /// Short segments, light noise, no startup burst. `variant` selects one of
    /// two presets that differ in gain, re-encoding and side traffic.
    pub fn easy(variant: usize) -> Self {
        let (gain, exponent, side) = if variant.is_multiple_of(2) {
            (
                1.0,
                1.0,
                SideTraffic {
                    period_s: 60.0,
                    offset_s: 20.0,
                    mass_s: 80.0,
                },
            )
        } else {
            (
                1.6,
                0.7,
                SideTraffic {
                    period_s: 90.0,
                    offset_s: 45.0,
                    mass_s: 80.0,
                },
            )
        };
        PlatformModel {
            encoding_exponent: exponent,
            jitter_s: 3.0,
            side_traffic: Some(side),
            ..PlatformModel::plain(5.0, gain, 0.05)
        }
    }

    /// Long segments, heavier noise, an initial buffering burst and an early
    /// end of transmission.
    pub fn hard() -> Self {
        PlatformModel {
            startup: Some(Startup {
                span_s: 100.0,
                speedup: 2.0,
            }),
            truncate_s: Some(520.0),
            encoding_exponent: 1.3,
            jitter_s: 3.0,
            ..PlatformModel::plain(25.0, 0.8, 0.1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ok = self.segment_s > 0.0
            && self.gain > 0.0
            && self.noise_sigma >= 0.0
            && self.encoding_exponent > 0.0
            && self.jitter_s >= 0.0;
        if let Some(s) = self.startup {
            ok &= s.span_s > 0.0 && s.speedup >= 1.0;
        }
        if let Some(t) = self.truncate_s {
            ok &= t > 0.0;
        }
        if let Some(s) = self.side_traffic {
            ok &= s.period_s > 0.0 && s.offset_s >= 0.0 && s.mass_s >= 0.0;
        }
        if ok {
            Ok(())
        } else {
            Err(Error::argument(format!("invalid platform model {self:?}")))
        }
    }

    fn delivery_time(&self, content_s: f64) -> f64 {
        match self.startup {
            Some(Startup { span_s, speedup }) if content_s < span_s => content_s / speedup,
            Some(Startup { span_s, speedup }) => content_s - span_s + span_s / speedup,
            None => content_s,
        }
    }
}

/// Missing fields fall back to [`SyntheticSpec::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub trials_per_class: u32,
    pub duration_s: f64,
    pub resolution_s: f64,
    pub platform_models: BTreeMap<String, PlatformModel>,
    pub seed: u64,
    /// Also emit the raw profiles under the `VBR` pseudo-platform.
    pub include_vbr: bool,
}

/// 40 classes, 5 trials, both easy platforms plus the hard one.
impl Default for SyntheticSpec {
    fn default() -> Self {
        let mut spec = SyntheticSpec::easy_pair(40, 5, 0);
        spec.platform_models
            .insert("P-hard".to_string(), PlatformModel::hard());
        spec
    }
}

impl SyntheticSpec {
    /// Two easy platforms, as used by the headline experiments.
    pub fn easy_pair(n_classes: usize, trials_per_class: u32, seed: u64) -> Self {
        SyntheticSpec {
            n_classes,
            trials_per_class,
            duration_s: 600.0,
            resolution_s: 1.0,
            platform_models: BTreeMap::from([
                ("P-easy-1".to_string(), PlatformModel::easy(0)),
                ("P-easy-2".to_string(), PlatformModel::easy(1)),
            ]),
            seed,
            include_vbr: true,
        }
    }

    /// One easy and one hard platform.
    pub fn easy_hard_pair(n_classes: usize, trials_per_class: u32, seed: u64) -> Self {
        SyntheticSpec {
            platform_models: BTreeMap::from([
                ("P-easy-1".to_string(), PlatformModel::easy(0)),
                ("P-hard".to_string(), PlatformModel::hard()),
            ]),
            ..SyntheticSpec::easy_pair(n_classes, trials_per_class, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::argument("n_classes must be at least 2"));
        }
        if self.trials_per_class < 1 {
            return Err(Error::argument("trials_per_class must be at least 1"));
        }
        if self.platform_models.is_empty() {
            return Err(Error::argument("at least one platform model is required"));
        }
        if self.platform_models.contains_key(VBR_PLATFORM) {
            return Err(Error::argument(
                "`VBR` is reserved for the profile pseudo-platform",
            ));
        }
        steps(self.duration_s, self.resolution_s)?;
        self.platform_models
            .values()
            .try_for_each(PlatformModel::validate)
    }
}

fn steps(duration_s: f64, resolution_s: f64) -> Result<usize> {
    let ratio = duration_s / resolution_s;
    if resolution_s > 0.0 && ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9 {
        Ok(ratio.round() as usize)
    } else {
        Err(Error::argument(format!(
            "resolution {resolution_s}s does not divide duration {duration_s}s"
        )))
    }
}

pub fn video_id(class_id: usize) -> String {
    format!("v{class_id:03}")
}

/// Smooth, strictly positive bitrate profile for one video: a moving
/// average of an exponentiated, mean-reverting random walk.
pub fn gen_vbr_profile(
    seed: u64,
    class_id: usize,
    duration_s: f64,
    resolution_s: f64,
) -> Result<Vec1D> {
    let n = steps(duration_s, resolution_s)?;
    let mut rng = rng_for(seed, &[Tag::Str("vbr"), Tag::from(class_id)]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let phi = (-resolution_s / PROFILE_CORRELATION_S).exp();
    let innovation = PROFILE_LOG_SIGMA * (1.0 - phi * phi).sqrt();
    let mut x = PROFILE_LOG_SIGMA * normal.sample(&mut rng);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            let v = x.exp();
            x = phi * x + innovation * normal.sample(&mut rng);
            v
        })
        .collect();

    let half = (PROFILE_SMOOTHING_S / resolution_s / 2.0).round() as usize;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in &raw {
        prefix.push(prefix.last().unwrap() + v);
    }
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();
    let mean = smooth.iter().sum::<f64>() / n as f64;
    let scale = PROFILE_MEAN_RATE * resolution_s / mean;
    Vec1D::new(smooth.into_iter().map(|v| v * scale).collect())
}

/// Content mass in `[start, end)` of a profile sampled every `resolution_s`.
fn integrate(profile: &[f64], resolution_s: f64, start: f64, end: f64) -> f64 {
    let first = (start / resolution_s).floor() as usize;
    let mut mass = 0.0;
    let mut i = first;
    while i < profile.len() && (i as f64) * resolution_s < end {
        let lo = start.max(i as f64 * resolution_s);
        let hi = end.min((i + 1) as f64 * resolution_s);
        if hi > lo {
            mass += profile[i] * ((hi - lo) / resolution_s);
        }
        i += 1;
    }
    mass
}

/// Delivers a profile through a platform model; the result is binned at the
/// profile's resolution.
pub fn apply_platform_model<R: Rng + ?Sized>(
    profile: &[f64],
    resolution_s: f64,
    model: &PlatformModel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    model.validate()?;
    if profile.is_empty() {
        return Err(Error::EmptyInput);
    }
    if profile.iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::argument("profile must be strictly positive"));
    }
    let n = profile.len();
    let duration_s = n as f64 * resolution_s;
    let total: f64 = profile.iter().sum();

    let encoded: Vec<f64> = if model.encoding_exponent == 1.0 {
        profile.to_vec()
    } else {
        let shaped: Vec<f64> = profile
            .iter()
            .map(|v| v.powf(model.encoding_exponent))
            .collect();
        let shaped_total: f64 = shaped.iter().sum();
        shaped.iter().map(|v| v * total / shaped_total).collect()
    };

    let delay = if model.jitter_s > 0.0 {
        rng.random_range(0.0..model.jitter_s)
    } else {
        0.0
    };
    let cutoff = model.truncate_s.unwrap_or(f64::INFINITY).min(duration_s);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0.0; n];

    let per_segment = model.segment_s / resolution_s;
    let whole = (per_segment - per_segment.round()).abs() < 1e-9 && per_segment >= 1.0;
    let n_segments = (duration_s / model.segment_s - 1e-9).ceil() as usize;
    for k in 0..n_segments {
        let content_start = k as f64 * model.segment_s;
        let burst = if whole {
            let m = per_segment.round() as usize;
            encoded[(k * m).min(n)..((k + 1) * m).min(n)].iter().sum()
        } else {
            integrate(
                &encoded,
                resolution_s,
                content_start,
                content_start + model.segment_s,
            )
        };
        let z: f64 = normal.sample(rng);
        let mass = (model.gain * burst * (1.0 + model.noise_sigma * z)).max(0.0);
        let t = model.delivery_time(content_start) + delay;
        if t < cutoff {
            out[(t / resolution_s).floor() as usize] += mass;
        }
    }

    if let Some(side) = model.side_traffic {
        let mass = model.gain * side.mass_s * total / duration_s;
        let mut t = side.offset_s + delay;
        while t < cutoff {
            out[(t / resolution_s).floor() as usize] += mass;
            t += side.period_s;
        }
    }
    Ok(out)
}

/// Traces for every (class, platform, trial), plus one `VBR` entry per
/// class holding the raw profile when `include_vbr` is set.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let profiles: Vec<Vec1D> = (0..spec.n_classes)
        .into_par_iter()
        .map(|c| gen_vbr_profile(spec.seed, c, spec.duration_s, spec.resolution_s))
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for c in 0..spec.n_classes {
        for platform in spec.platform_models.keys() {
            for trial in 0..spec.trials_per_class {
                jobs.push((c, platform.as_str(), trial));
            }
        }
    }
    let mut traces: Vec<(TraceKey, TraceData)> = jobs
        .par_iter()
        .map(|&(c, platform, trial)| {
            let model = &spec.platform_models[platform];
            let mut rng = rng_for(
                spec.seed,
                &[
                    Tag::Str("trace"),
                    Tag::Str(platform),
                    Tag::from(c),
                    Tag::from(trial),
                ],
            );
            let values = apply_platform_model(&profiles[c], spec.resolution_s, model, &mut rng)?;
            Ok((
                TraceKey::new(platform, video_id(c), trial),
                TraceData::Binned {
                    bin_s: spec.resolution_s,
                    values: Vec1D::new(values)?,
                },
            ))
        })
        .collect::<Result<_>>()?;
    if spec.include_vbr {
        for (c, profile) in profiles.into_iter().enumerate() {
            traces.push((
                TraceKey::new(VBR_PLATFORM, video_id(c), 0),
                TraceData::Binned {
                    bin_s: spec.resolution_s,
                    values: profile,
                },
            ));
        }
    }
    Dataset::from_traces(traces)
}
