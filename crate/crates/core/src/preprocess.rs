//! Turns traces into fixed-length feature vectors.
//!
//! Stage order: downlink packet binning (or re-binning of an already binned
//! series), platform-specific initial-burst extension, truncation/padding to
//! the configured duration, then min-max normalization.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, Direction, PacketRecord, TraceData, TraceKey, VBR_PLATFORM};
use crate::numeric::{minmax_normalize, resample_linear, Vec1D};

const SPAN_EPS: f64 = 1e-9;

/// Stretches the first `src_span_s` seconds of a trace over `dst_span_s`
/// seconds and scales them by `amplitude_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstExtensionRule {
    pub src_span_s: f64,
    pub dst_span_s: f64,
    pub amplitude_factor: f64,
}

impl BurstExtensionRule {
    /// First 100 s stretched to 200 s at half amplitude.
    pub const YOUTUBE: BurstExtensionRule = BurstExtensionRule {
        src_span_s: 100.0,
        dst_span_s: 200.0,
        amplitude_factor: 0.5,
    };

    /// First 520 s stretched to 600 s; amplitude kept.
    pub const RUMBLE: BurstExtensionRule = BurstExtensionRule {
        src_span_s: 520.0,
        dst_span_s: 600.0,
        amplitude_factor: 1.0,
    };

    pub fn validate(&self, duration_s: f64) -> Result<()> {
        let ok = self.src_span_s > 0.0
            && self.src_span_s <= self.dst_span_s
            && self.dst_span_s <= duration_s
            && self.amplitude_factor > 0.0
            && self.amplitude_factor.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::argument(format!(
                "invalid burst extension rule {self:?} for duration {duration_s}"
            )))
        }
    }
}

fn default_bin_s() -> f64 {
    10.0
}

fn default_duration_s() -> f64 {
    600.0
}

fn default_true() -> bool {
    true
}

fn default_rules() -> BTreeMap<String, BurstExtensionRule> {
    BTreeMap::from([
        ("YT".to_string(), BurstExtensionRule::YOUTUBE),
        ("RU".to_string(), BurstExtensionRule::RUMBLE),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default = "default_bin_s")]
    pub bin_s: f64,
    #[serde(default = "default_duration_s")]
    pub duration_s: f64,
    #[serde(default = "default_rules")]
    pub platform_rules: BTreeMap<String, BurstExtensionRule>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            bin_s: default_bin_s(),
            duration_s: default_duration_s(),
            platform_rules: default_rules(),
            normalize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_s > 0.0 && self.bin_s.is_finite()) {
            return Err(Error::argument(format!(
                "bin_s must be positive, got {}",
                self.bin_s
            )));
        }
        if self.duration_s.is_nan()
            || self.duration_s <= 0.0
            || span_bins(self.duration_s, self.bin_s).is_none()
        {
            return Err(Error::argument(format!(
                "duration_s {} is not a positive multiple of bin_s {}",
                self.duration_s, self.bin_s
            )));
        }
        for (platform, rule) in &self.platform_rules {
            rule.validate(self.duration_s)?;
            if span_bins(rule.src_span_s, self.bin_s).is_none()
                || span_bins(rule.dst_span_s, self.bin_s).is_none()
            {
                return Err(Error::argument(format!(
                    "burst rule for {platform} ({}s -> {}s) is not aligned to bin_s {}",
                    rule.src_span_s, rule.dst_span_s, self.bin_s
                )));
            }
        }
        Ok(())
    }

    /// Length of every feature vector this config produces.
    pub fn n_bins(&self) -> usize {
        (self.duration_s / self.bin_s).round() as usize
    }
}

/// Number of bins in `span_s` if it is a whole multiple of `bin_s`.
fn span_bins(span_s: f64, bin_s: f64) -> Option<usize> {
    let ratio = span_s / bin_s;
    let rounded = ratio.round();
    ((ratio - rounded).abs() <= SPAN_EPS * ratio.max(1.0) && rounded >= 1.0)
        .then_some(rounded as usize)
}

/// Fixed-length, optionally normalized per-bin downlink packet counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub key: TraceKey,
    pub values: Vec1D,
}

/// Counts downlink packets in half-open bins `[i*bin_s, (i+1)*bin_s)`.
/// Packets at or after `duration_s` are dropped.
pub fn bin_downlink_packets(packets: &[PacketRecord], bin_s: f64, duration_s: f64) -> Vec<f64> {
    let n = (duration_s / bin_s).round() as usize;
    let mut bins = vec![0.0; n];
    for p in packets {
        if p.direction != Direction::Downlink || p.time < 0.0 || p.time >= duration_s {
            continue;
        }
        let idx = (p.time / bin_s).floor() as usize;
        if let Some(slot) = bins.get_mut(idx) {
            *slot += 1.0;
        }
    }
    bins
}

/// Re-bins a series sampled at `src_bin_s` onto `bin_s` bins. Whole-multiple
/// ratios sum groups of source bins; other ratios split each source bin's
/// mass by time overlap.
pub fn rebin(values: &[f64], src_bin_s: f64, bin_s: f64) -> Result<Vec<f64>> {
    if !(src_bin_s > 0.0 && bin_s > 0.0) {
        return Err(Error::argument("bin sizes must be positive"));
    }
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(k) = span_bins(bin_s, src_bin_s) {
        return Ok(values.chunks(k).map(|c| c.iter().sum()).collect());
    }
    let total_s = values.len() as f64 * src_bin_s;
    let n = (total_s / bin_s).ceil() as usize;
    let mut out = vec![0.0; n.max(1)];
    for (i, &v) in values.iter().enumerate() {
        let start = i as f64 * src_bin_s;
        let end = start + src_bin_s;
        let first = (start / bin_s).floor() as usize;
        let mut j = first;
        while j < out.len() && (j as f64) * bin_s < end {
            let lo = start.max(j as f64 * bin_s);
            let hi = end.min((j + 1) as f64 * bin_s);
            if hi > lo {
                out[j] += v * (hi - lo) / src_bin_s;
            }
            j += 1;
        }
    }
    Ok(out)
}

/// Resamples the prefix spanning `src_span_s` onto `dst_span_s`, scales it,
/// appends the untouched remainder and truncates back to the input length.
pub fn extend_initial_burst(v: &[f64], rule: &BurstExtensionRule, bin_s: f64) -> Result<Vec<f64>> {
    let src = span_bins(rule.src_span_s, bin_s);
    let dst = span_bins(rule.dst_span_s, bin_s);
    let (Some(src), Some(dst)) = (src, dst) else {
        return Err(Error::argument(format!(
            "burst spans {}s/{}s are not multiples of bin size {bin_s}s",
            rule.src_span_s, rule.dst_span_s
        )));
    };
    if v.len() < src {
        return Err(Error::argument(format!(
            "trace of {} bins is shorter than the {src}-bin burst span",
            v.len()
        )));
    }
    let mut out = resample_linear(&v[..src], dst)?;
    for x in &mut out {
        *x *= rule.amplitude_factor;
    }
    out.extend_from_slice(&v[src..]);
    out.truncate(v.len());
    Ok(out)
}

pub fn truncate_or_pad(v: &[f64], target_len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().copied().take(target_len).collect();
    out.resize(target_len, 0.0);
    out
}

/// Replaces each element by a draw from `Normal(v_i, fraction * v_i)`,
/// clamped at zero. Zero elements stay zero.
pub fn augment_gaussian<R: Rng + ?Sized>(v: &[f64], fraction: f64, rng: &mut R) -> Vec<f64> {
    if fraction == 0.0 {
        return v.to_vec();
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    v.iter()
        .map(|&x| {
            if x == 0.0 {
                return 0.0;
            }
            let z: f64 = std_normal.sample(rng);
            (x + fraction * x.abs() * z).max(0.0)
        })
        .collect()
}

/// Binned, extended and length-fixed counts before normalization.
pub fn trace_counts(
    data: &TraceData,
    platform: &str,
    config: &PreprocessConfig,
) -> Result<Vec<f64>> {
    let binned = match data {
        TraceData::Packets(packets) => {
            // Bin far enough to cover a burst rule's source span.
            let cover = config
                .platform_rules
                .get(platform)
                .map_or(config.duration_s, |r| r.src_span_s.max(config.duration_s));
            bin_downlink_packets(packets, config.bin_s, cover)
        }
        TraceData::Binned { bin_s, values } => rebin(values, *bin_s, config.bin_s)?,
    };
    let extended = match config.platform_rules.get(platform) {
        Some(rule) => {
            let src = span_bins(rule.src_span_s, config.bin_s).unwrap_or(0);
            let padded = if binned.len() < src {
                truncate_or_pad(&binned, src)
            } else {
                binned
            };
            extend_initial_burst(&padded, rule, config.bin_s)?
        }
        None => binned,
    };
    Ok(truncate_or_pad(&extended, config.n_bins()))
}

/// Final stage: normalization if enabled.
pub fn finish_features(
    key: TraceKey,
    counts: Vec<f64>,
    config: &PreprocessConfig,
) -> Result<FeatureVector> {
    let values = if config.normalize {
        minmax_normalize(&counts)
    } else {
        counts
    };
    Ok(FeatureVector {
        key,
        values: Vec1D::new(values)?,
    })
}

pub fn preprocess_pipeline(
    key: &TraceKey,
    data: &TraceData,
    config: &PreprocessConfig,
) -> Result<FeatureVector> {
    config.validate()?;
    let counts = trace_counts(data, &key.platform, config)?;
    finish_features(key.clone(), counts, config)
}

/// Feature vectors of a whole dataset, keyed like the dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureSet {
    vectors: BTreeMap<TraceKey, FeatureVector>,
}

impl FeatureSet {
    pub fn new(vectors: impl IntoIterator<Item = FeatureVector>) -> Self {
        FeatureSet {
            vectors: vectors.into_iter().map(|f| (f.key.clone(), f)).collect(),
        }
    }

    pub fn get(&self, key: &TraceKey) -> Option<&FeatureVector> {
        self.vectors.get(key)
    }

    pub fn insert(&mut self, fv: FeatureVector) {
        self.vectors.insert(fv.key.clone(), fv);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureVector> {
        self.vectors.values()
    }

    /// Sorted trial numbers of one video on one platform.
    pub fn trials(&self, platform: &str, video_id: &str) -> Vec<u32> {
        self.vectors
            .keys()
            .filter(|k| k.platform == platform && k.video_id == video_id)
            .map(|k| k.trial)
            .collect()
    }

    /// Feature vectors of one video on one platform, in trial order.
    pub fn of(&self, platform: &str, video_id: &str) -> Vec<&FeatureVector> {
        self.vectors
            .values()
            .filter(|f| f.key.platform == platform && f.key.video_id == video_id)
            .collect()
    }

    /// Distinct platforms, real platforms first (sorted), `VBR` last.
    pub fn platforms(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.vectors.keys().map(|k| k.platform.as_str()).collect();
        let mut out: Vec<String> = set
            .iter()
            .filter(|p| **p != VBR_PLATFORM)
            .map(|p| p.to_string())
            .collect();
        if set.contains(VBR_PLATFORM) {
            out.push(VBR_PLATFORM.to_string());
        }
        out
    }

    pub fn input_len(&self) -> Option<usize> {
        self.vectors.values().next().map(|f| f.values.len())
    }
}

/// Runs the pipeline over every trace in parallel.
pub fn preprocess_dataset(dataset: &Dataset, config: &PreprocessConfig) -> Result<FeatureSet> {
    config.validate()?;
    let entries: Vec<_> = dataset.iter().collect();
    let vectors = entries
        .par_iter()
        .map(|(key, data)| {
            let counts = trace_counts(data, &key.platform, config)?;
            finish_features((*key).clone(), counts, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet::new(vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn down(t: f64) -> PacketRecord {
        PacketRecord {
            time: t,
            size: 1500,
            direction: Direction::Downlink,
        }
    }

    fn up(t: f64) -> PacketRecord {
        PacketRecord {
            time: t,
            size: 60,
            direction: Direction::Uplink,
        }
    }

    #[test]
    fn binning_examples() {
        let pk = [down(1.0), down(9.9), down(10.0), down(25.0)];
        assert_eq!(bin_downlink_packets(&pk, 10.0, 30.0), vec![2.0, 1.0, 1.0]);
        assert_eq!(
            bin_downlink_packets(&[up(1.0), up(2.0)], 10.0, 30.0),
            vec![0.0; 3]
        );
        assert_eq!(
            bin_downlink_packets(&[down(0.5)], 10.0, 40.0),
            vec![1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            bin_downlink_packets(&[down(30.0)], 10.0, 30.0),
            vec![0.0; 3]
        );
    }

    #[test]
    fn extension_examples() {
        let rule = BurstExtensionRule {
            src_span_s: 20.0,
            dst_span_s: 40.0,
            amplitude_factor: 0.5,
        };
        assert_eq!(
            extend_initial_burst(&[4.0, 4.0, 2.0, 2.0], &rule, 10.0).unwrap(),
            vec![2.0, 2.0, 2.0, 2.0]
        );
        let identity = BurstExtensionRule {
            src_span_s: 20.0,
            dst_span_s: 20.0,
            amplitude_factor: 1.0,
        };
        let v = [3.0, 1.0, 4.0, 1.0, 5.0];
        assert_eq!(
            extend_initial_burst(&v, &identity, 10.0).unwrap(),
            v.to_vec()
        );
        let odd = BurstExtensionRule {
            src_span_s: 15.0,
            ..rule
        };
        assert!(matches!(
            extend_initial_burst(&v, &odd, 10.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn youtube_rule_at_ten_second_bins() {
        let r = BurstExtensionRule::YOUTUBE;
        assert_eq!(span_bins(r.src_span_s, 10.0), Some(10));
        assert_eq!(span_bins(r.dst_span_s, 10.0), Some(20));
        assert_eq!(r.amplitude_factor, 0.5);
    }

    #[test]
    fn truncate_pad_examples() {
        assert_eq!(truncate_or_pad(&[1.0, 2.0, 3.0], 2), vec![1.0, 2.0]);
        assert_eq!(truncate_or_pad(&[1.0, 2.0], 4), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(truncate_or_pad(&[1.0, 2.0], 2), vec![1.0, 2.0]);
    }

    #[test]
    fn augmentation_identity_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = [0.0, 3.0, 100.0];
        assert_eq!(augment_gaussian(&v, 0.0, &mut rng), v.to_vec());
        for _ in 0..100 {
            assert_eq!(augment_gaussian(&v, 0.05, &mut rng)[0], 0.0);
        }
    }

    #[test]
    fn rebin_whole_and_fractional() {
        assert_eq!(
            rebin(&[1.0, 2.0, 3.0, 4.0, 5.0], 1.0, 2.0).unwrap(),
            vec![3.0, 7.0, 5.0]
        );
        let r = rebin(&[4.0, 4.0, 4.0], 4.0, 6.0).unwrap();
        assert_eq!(r.len(), 2);
        assert!((r[0] - 6.0).abs() < 1e-12 && (r[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        let bad = PreprocessConfig {
            duration_s: 605.0,
            ..PreprocessConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PreprocessConfig {
            bin_s: 0.0,
            ..PreprocessConfig::default()
        };
        assert!(bad.validate().is_err());
        let misaligned = PreprocessConfig {
            bin_s: 40.0,
            ..PreprocessConfig::default()
        };
        assert!(misaligned.validate().is_err());
    }

    #[test]
    fn pipeline_without_rule_is_bin_truncate_normalize() {
        let key = TraceKey::new("FB", "v", 0);
        let data = TraceData::Packets(vec![down(1.0), down(2.0), down(15.0), down(700.0)]);
        let cfg = PreprocessConfig::default();
        let fv = preprocess_pipeline(&key, &data, &cfg).unwrap();
        let mut expected = vec![0.0; 60];
        expected[0] = 1.0;
        expected[1] = 0.5;
        assert_eq!(fv.values.as_slice(), expected.as_slice());
    }

    #[test]
    fn pipeline_all_zero() {
        let key = TraceKey::new("FB", "v", 0);
        let data = TraceData::Packets(vec![up(1.0)]);
        let fv = preprocess_pipeline(&key, &data, &PreprocessConfig::default()).unwrap();
        assert!(fv.values.iter().all(|v| *v == 0.0));
        assert_eq!(fv.values.len(), 60);
    }

    proptest! {
        #[test]
        fn pipeline_length_and_mass(
            times in prop::collection::vec(0.0f64..900.0, 1..300),
            bin_idx in 0usize..3,
            platform in prop::sample::select(vec!["FB", "YT", "RU"]),
        ) {
            let bin_s = [5.0, 10.0, 20.0][bin_idx];
            let mut times = times;
            times.sort_by(f64::total_cmp);
            let packets: Vec<_> = times.iter().map(|t| down(*t)).collect();
            let cfg = PreprocessConfig { bin_s, ..PreprocessConfig::default() };
            let key = TraceKey::new(platform, "v", 0);
            let fv = preprocess_pipeline(&key, &TraceData::Packets(packets.clone()), &cfg).unwrap();
            prop_assert_eq!(fv.values.len(), cfg.n_bins());
            prop_assert!(fv.values.iter().all(|v| (0.0..=1.0).contains(v)));

            let bins = bin_downlink_packets(&packets, bin_s, 600.0);
            let inside = times.iter().filter(|t| **t < 600.0).count() as f64;
            prop_assert_eq!(bins.iter().sum::<f64>(), inside);
        }

        #[test]
        fn extension_keeps_length(
            v in prop::collection::vec(0.0f64..100.0, 60),
            src in 1usize..30,
            extra in 0usize..30,
            factor in 0.1f64..2.0,
        ) {
            let rule = BurstExtensionRule {
                src_span_s: src as f64 * 10.0,
                dst_span_s: (src + extra) as f64 * 10.0,
                amplitude_factor: factor,
            };
            prop_assert_eq!(extend_initial_burst(&v, &rule, 10.0).unwrap().len(), 60);
        }
    }
}
