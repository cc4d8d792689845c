//! Traffic exports, VBR segment files, binned traces and dataset manifests.
//!
//! Formats handled here:
//!
//! * packet logs: TSV or CSV, either `time_s, U|D, size_bytes` or
//!   `time_epoch, src, dst, size_bytes` with the client address supplied
//!   separately;
//! * binned traces: `# key=value` header lines (`platform`, `video_id`,
//!   `trial`, `bin_s`) followed by one value per line;
//! * VBR segments: `# segment_s=<real>` then `index,bytes` rows;
//! * manifests: `{"platforms": {<id>: {<video_id>: [{"path", "kind"}]}}}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Vec1D;

/// Name of the pseudo-platform holding per-video VBR byte series.
pub const VBR_PLATFORM: &str = "VBR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Downlink,
    Uplink,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Seconds since the first packet of the trace.
    pub time: f64,
    pub size: u64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceKey {
    pub platform: String,
    pub video_id: String,
    pub trial: u32,
}

impl TraceKey {
    pub fn new(platform: impl Into<String>, video_id: impl Into<String>, trial: u32) -> Self {
        TraceKey {
            platform: platform.into(),
            video_id: video_id.into(),
            trial,
        }
    }
}

impl std::fmt::Display for TraceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.platform, self.video_id, self.trial)
    }
}

/// Packet records of one streaming session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrace {
    pub key: TraceKey,
    pub packets: Vec<PacketRecord>,
}

impl RawTrace {
    pub fn downlink_count(&self) -> usize {
        self.packets
            .iter()
            .filter(|p| p.direction == Direction::Downlink)
            .count()
    }
}

/// What a dataset holds for one trace: packets, or an already binned series
/// (binned exports, synthetic traces and VBR segments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceData {
    Packets(Vec<PacketRecord>),
    Binned { bin_s: f64, values: Vec1D },
}

/// How a packet log tells downlink from uplink.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum ClientMarker {
    /// Only the tagged 3-column form is accepted.
    #[default]
    Tagged,
    /// 4-column rows are resolved against this client address.
    Address(String),
}

fn split_fields(line: &str) -> Vec<&str> {
    let sep = if line.contains('\t') { '\t' } else { ',' };
    line.split(sep).map(str::trim).collect()
}

fn parse_size(field: &str, line: usize) -> Result<u64> {
    let size: i64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid packet size `{field}`"),
    })?;
    u64::try_from(size).map_err(|_| Error::Parse {
        line,
        message: format!("negative packet size {size}"),
    })
}

fn parse_real(field: &str, line: usize, what: &str) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            message: format!("invalid {what} `{field}`"),
        }),
    }
}

/// Parses a packet-field export into a time-normalized trace.
///
/// Blank lines and lines starting with `#` are skipped. The first packet is
/// moved to `t = 0`.
pub fn parse_packet_log<R: BufRead>(
    reader: R,
    marker: &ClientMarker,
    key: TraceKey,
) -> Result<RawTrace> {
    let mut packets = Vec::new();
    let mut last_time = f64::NEG_INFINITY;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed);
        let (time, size, direction) = match fields.as_slice() {
            [t, dir, size] => {
                let direction = match *dir {
                    "D" | "d" => Direction::Downlink,
                    "U" | "u" => Direction::Uplink,
                    other => {
                        return Err(Error::Parse {
                            line: lineno,
                            message: format!("unknown direction `{other}`"),
                        })
                    }
                };
                (
                    parse_real(t, lineno, "time")?,
                    parse_size(size, lineno)?,
                    direction,
                )
            }
            [t, src, dst, size] => {
                let ClientMarker::Address(client) = marker else {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "4-column row but no client address was given".into(),
                    });
                };
                let direction = if dst == client {
                    Direction::Downlink
                } else if src == client {
                    Direction::Uplink
                } else {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("neither {src} nor {dst} is the client {client}"),
                    });
                };
                (
                    parse_real(t, lineno, "time")?,
                    parse_size(size, lineno)?,
                    direction,
                )
            }
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 3 or 4 fields, found {}", other.len()),
                })
            }
        };
        if time < last_time {
            return Err(Error::Parse {
                line: lineno,
                message: format!("time {time} goes backwards (previous {last_time})"),
            });
        }
        last_time = time;
        packets.push(PacketRecord {
            time,
            size,
            direction,
        });
    }
    let Some(origin) = packets.first().map(|p| p.time) else {
        return Err(Error::EmptyInput);
    };
    for p in &mut packets {
        p.time -= origin;
    }
    Ok(RawTrace { key, packets })
}

/// Per-segment byte counts of a video file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbrSeries {
    pub segment_s: f64,
    pub bytes: Vec1D,
}

fn header_pair(line: &str) -> Option<(&str, &str)> {
    let body = line.strip_prefix('#')?.trim();
    let (k, v) = body.split_once('=')?;
    Some((k.trim(), v.trim()))
}

pub fn parse_vbr_segments<R: BufRead>(reader: R) -> Result<VbrSeries> {
    let mut segment_s = None;
    let mut bytes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if let Some(("segment_s", v)) = header_pair(trimmed) {
                let s = parse_real(v, lineno, "segment_s")?;
                if s <= 0.0 {
                    return Err(Error::format(format!(
                        "segment_s must be positive, got {s}"
                    )));
                }
                segment_s = Some(s);
            }
            continue;
        }
        let fields = split_fields(trimmed);
        let [index, size] = fields.as_slice() else {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected `index,bytes`, found {} fields", fields.len()),
            });
        };
        let index: usize = index.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid segment index `{index}`"),
        })?;
        if index != bytes.len() {
            return Err(Error::format(format!(
                "segment index {index} at line {lineno}, expected {}",
                bytes.len()
            )));
        }
        let size = parse_real(size, lineno, "byte count")?;
        if size < 0.0 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("negative byte count {size}"),
            });
        }
        bytes.push(size);
    }
    let segment_s = segment_s.ok_or_else(|| Error::format("missing `# segment_s=` header"))?;
    if bytes.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(VbrSeries {
        segment_s,
        bytes: Vec1D::new(bytes)?,
    })
}

pub fn write_vbr_segments(series: &VbrSeries, path: &Path) -> Result<()> {
    let mut out = format!("# segment_s={}\n", series.segment_s);
    for (i, b) in series.bytes.iter().enumerate() {
        let _ = writeln!(out, "{i},{b}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Header of a binned trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedMeta {
    pub key: TraceKey,
    pub bin_s: f64,
    /// Additional `# key=value` lines, written after the fixed keys in order.
    #[serde(default)]
    pub extra: Vec<(String, String)>,
}

pub fn parse_binned_csv<R: BufRead>(reader: R) -> Result<(BinnedMeta, Vec1D)> {
    let mut fields: BTreeMap<&'static str, String> = BTreeMap::new();
    let mut extra = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            let Some((k, v)) = header_pair(trimmed) else {
                continue;
            };
            match k {
                "platform" => fields.insert("platform", v.to_string()),
                "video_id" => fields.insert("video_id", v.to_string()),
                "trial" => fields.insert("trial", v.to_string()),
                "bin_s" => fields.insert("bin_s", v.to_string()),
                _ => {
                    extra.push((k.to_string(), v.to_string()));
                    None
                }
            };
            continue;
        }
        values.push(parse_real(trimmed, lineno, "value")?);
    }
    let mut take = |k: &'static str| {
        fields
            .remove(k)
            .ok_or_else(|| Error::format(format!("missing header key `{k}`")))
    };
    let platform = take("platform")?;
    let video_id = take("video_id")?;
    let trial = take("trial")?;
    let bin_s = take("bin_s")?;
    let trial: u32 = trial
        .parse()
        .map_err(|_| Error::format(format!("invalid trial `{trial}`")))?;
    let bin_s: f64 = bin_s
        .parse()
        .ok()
        .filter(|b: &f64| b.is_finite() && *b > 0.0)
        .ok_or_else(|| Error::format(format!("invalid bin_s `{bin_s}`")))?;
    let meta = BinnedMeta {
        key: TraceKey {
            platform,
            video_id,
            trial,
        },
        bin_s,
        extra,
    };
    Ok((meta, Vec1D::new(values)?))
}

/// Renders a binned trace. Values use 17 significant digits so parsing the
/// text back yields the same doubles.
pub fn render_binned_csv(meta: &BinnedMeta, values: &[f64]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::argument("cannot write an empty trace"));
    }
    let mut out = String::with_capacity(values.len() * 24 + 128);
    let _ = writeln!(out, "# platform={}", meta.key.platform);
    let _ = writeln!(out, "# video_id={}", meta.key.video_id);
    let _ = writeln!(out, "# trial={}", meta.key.trial);
    let _ = writeln!(out, "# bin_s={}", meta.bin_s);
    for (k, v) in &meta.extra {
        let _ = writeln!(out, "# {k}={v}");
    }
    for v in values {
        let _ = writeln!(out, "{v:.16e}");
    }
    Ok(out)
}

pub fn write_binned_csv(meta: &BinnedMeta, values: &[f64], path: &Path) -> Result<()> {
    let text = render_binned_csv(meta, values)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Labeled traces indexed by (platform, video_id, trial).
///
/// Every platform in `platforms` carries every class in `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    traces: BTreeMap<TraceKey, TraceData>,
    classes: Vec<String>,
    platforms: Vec<String>,
}

impl Dataset {
    pub fn from_traces<I>(traces: I) -> Result<Self>
    where
        I: IntoIterator<Item = (TraceKey, TraceData)>,
    {
        let mut map = BTreeMap::new();
        for (key, data) in traces {
            if let TraceData::Packets(p) = &data {
                if p.is_empty() {
                    return Err(Error::data(format!("trace {key} has no packets")));
                }
            }
            if map.contains_key(&key) {
                return Err(Error::data(format!("duplicate trace key {key}")));
            }
            map.insert(key, data);
        }
        if map.is_empty() {
            return Err(Error::data("dataset has no traces"));
        }
        let classes: BTreeSet<&str> = map.keys().map(|k| k.video_id.as_str()).collect();
        let mut per_platform: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for k in map.keys() {
            per_platform
                .entry(k.platform.as_str())
                .or_default()
                .insert(k.video_id.as_str());
        }
        for (platform, present) in &per_platform {
            if let Some(missing) = classes.iter().find(|c| !present.contains(*c)) {
                return Err(Error::data(format!(
                    "class {missing} absent from platform {platform}"
                )));
            }
        }
        let mut platforms: Vec<String> = per_platform
            .keys()
            .filter(|p| **p != VBR_PLATFORM)
            .map(|p| p.to_string())
            .collect();
        if per_platform.contains_key(VBR_PLATFORM) {
            platforms.push(VBR_PLATFORM.to_string());
        }
        let classes = classes.into_iter().map(String::from).collect();
        Ok(Dataset {
            traces: map,
            classes,
            platforms,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Platform ids, real platforms first (sorted), `VBR` last when present.
    pub fn platforms(&self) -> &[String] {
        &self.platforms
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn get(&self, key: &TraceKey) -> Option<&TraceData> {
        self.traces.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TraceKey, &TraceData)> {
        self.traces.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    PacketLog,
    Binned,
    /// VBR segment file (`index,bytes`), only meaningful under `VBR`.
    Vbr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub kind: EntryKind,
    /// Client address for 4-column packet logs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub platforms: BTreeMap<String, BTreeMap<String, Vec<ManifestEntry>>>,
    /// Free-form `key -> value` notes about how the files were produced.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn load_entry(
    base: &Path,
    platform: &str,
    video_id: &str,
    index: usize,
    entry: &ManifestEntry,
) -> Result<(TraceKey, TraceData)> {
    let path = base.join(&entry.path);
    let context = |e: Error| Error::data(format!("{}: {e}", path.display()));
    let key = TraceKey::new(platform, video_id, index as u32);
    match entry.kind {
        EntryKind::PacketLog => {
            let marker = entry
                .client
                .clone()
                .map(ClientMarker::Address)
                .unwrap_or_default();
            let trace = parse_packet_log(open(&path)?, &marker, key).map_err(context)?;
            Ok((trace.key, TraceData::Packets(trace.packets)))
        }
        EntryKind::Binned => {
            let (meta, values) = parse_binned_csv(open(&path)?).map_err(context)?;
            if meta.key.platform != platform || meta.key.video_id != video_id {
                return Err(Error::data(format!(
                    "{}: header says {}/{} but manifest lists it under {platform}/{video_id}",
                    path.display(),
                    meta.key.platform,
                    meta.key.video_id
                )));
            }
            Ok((
                meta.key,
                TraceData::Binned {
                    bin_s: meta.bin_s,
                    values,
                },
            ))
        }
        EntryKind::Vbr => {
            let series = parse_vbr_segments(open(&path)?).map_err(context)?;
            Ok((
                key,
                TraceData::Binned {
                    bin_s: series.segment_s,
                    values: series.bytes,
                },
            ))
        }
    }
}

/// Loads every file a manifest references. Paths are relative to the
/// manifest's directory. Files are parsed in parallel; any failure aborts
/// the whole load.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    if manifest.platforms.is_empty() {
        return Err(Error::data("manifest lists no platforms"));
    }
    let mut jobs = Vec::new();
    for (platform, videos) in &manifest.platforms {
        if videos.is_empty() {
            return Err(Error::data(format!("platform {platform} has no videos")));
        }
        for (video_id, entries) in videos {
            if entries.is_empty() {
                return Err(Error::data(format!(
                    "video {video_id} on platform {platform} has no traces"
                )));
            }
            for (i, entry) in entries.iter().enumerate() {
                jobs.push((platform.as_str(), video_id.as_str(), i, entry));
            }
        }
    }
    let loaded: Vec<(TraceKey, TraceData)> = jobs
        .par_iter()
        .map(|(p, v, i, e)| load_entry(base, p, v, *i, e))
        .collect::<Result<_>>()?;
    Dataset::from_traces(loaded)
}
