//! Multi-level traffic aggregation.
//!
//! The trace is cut into `S = feature_len / 8` consecutive windows of fixed
//! length `t`. Each window contributes eight numbers, four per direction:
//!
//! | offset | field                         |
//! |--------|-------------------------------|
//! | 0 / 4  | packet count                  |
//! | 1 / 5  | mean inter-arrival time       |
//! | 2 / 6  | burst count                   |
//! | 3 / 7  | mean burst size               |
//!
//! Offsets 0..4 are outgoing, 4..8 incoming. Bursts are maximal runs of one
//! direction inside the window; a run crossing a window edge is cut in two.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trace::{Direction, PacketEvent, Trace};

/// Values per window.
pub const FIELDS_PER_SEGMENT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    /// Window length in seconds.
    pub interval: f64,
    /// Total feature length; a multiple of 8.
    pub feature_len: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            interval: 0.020,
            feature_len: 8000,
        }
    }
}

impl AggregationConfig {
    pub fn segments(&self) -> usize {
        self.feature_len / FIELDS_PER_SEGMENT
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.feature_len == 0 || !self.feature_len.is_multiple_of(FIELDS_PER_SEGMENT) {
            return Err(format!(
                "feature_len {} is not a positive multiple of 8",
                self.feature_len
            ));
        }
        if !(self.interval > 0.0 && self.interval.is_finite()) {
            return Err(format!("interval {} must be positive", self.interval));
        }
        Ok(())
    }
}

/// Segment-major feature vector, see the module docs for the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn segment(&self, s: usize) -> &[f64] {
        &self.0[s * FIELDS_PER_SEGMENT..(s + 1) * FIELDS_PER_SEGMENT]
    }
}

/// Splits the trace into the half-open windows `[s·t, (s+1)·t)`. Events at
/// or beyond `S·t` are discarded.
pub fn segment_trace<'a>(trace: &'a Trace, cfg: &AggregationConfig) -> Vec<&'a [PacketEvent]> {
    let n_seg = cfg.segments();
    let events = trace.events();
    let mut out = Vec::with_capacity(n_seg);
    let mut start = 0;
    for s in 0..n_seg {
        let mut end = start;
        while end < events.len() && segment_of(events[end].time, cfg.interval) == s {
            end += 1;
        }
        out.push(&events[start..end]);
        start = end;
    }
    out
}

/// Window index of a timestamp.
pub fn segment_of(time: f64, interval: f64) -> usize {
    (time / interval).floor() as usize
}

/// Burst count and mean burst size of `target` within `directions`.
pub fn burst_stats<I>(directions: I, target: Direction) -> (usize, f64)
where
    I: IntoIterator<Item = Direction>,
{
    let mut bursts = 0usize;
    let mut packets = 0usize;
    let mut prev: Option<Direction> = None;
    for d in directions {
        if d == target {
            packets += 1;
            if prev != Some(target) {
                bursts += 1;
            }
        }
        prev = Some(d);
    }
    if bursts == 0 {
        (0, 0.0)
    } else {
        (bursts, packets as f64 / bursts as f64)
    }
}

fn direction_fields(events: &[PacketEvent], d: Direction, out: &mut [f64]) {
    let mut count = 0usize;
    let mut gap_sum = 0.0;
    let mut last: Option<f64> = None;
    for e in events.iter().filter(|e| e.direction == d) {
        count += 1;
        if let Some(prev) = last {
            gap_sum += e.time - prev;
        }
        last = Some(e.time);
    }
    let (bursts, mean_burst) = burst_stats(events.iter().map(|e| e.direction), d);
    out[0] = count as f64;
    out[1] = if count >= 2 {
        gap_sum / (count - 1) as f64
    } else {
        0.0
    };
    out[2] = bursts as f64;
    out[3] = mean_burst;
}

pub fn aggregate_features(trace: &Trace, cfg: &AggregationConfig) -> FeatureVector {
    let mut values = vec![0.0; cfg.segments() * FIELDS_PER_SEGMENT];
    for (s, events) in segment_trace(trace, cfg).into_iter().enumerate() {
        if events.is_empty() {
            continue;
        }
        let block = &mut values[s * FIELDS_PER_SEGMENT..(s + 1) * FIELDS_PER_SEGMENT];
        direction_fields(events, Direction::Out, &mut block[..4]);
        direction_fields(events, Direction::In, &mut block[4..]);
    }
    FeatureVector(values)
}

/// Sidecar written next to a feature dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDumpMeta {
    pub n_sessions: usize,
    pub feature_len: usize,
    pub dtype: String,
    pub layout: String,
    pub aggregation: AggregationConfig,
}

/// Writes rows as little-endian `f32`, row-major, plus a JSON sidecar at
/// `<path>.json`.
pub fn write_feature_dump(
    path: &Path,
    rows: &[FeatureVector],
    cfg: &AggregationConfig,
) -> io::Result<()> {
    let mut buf = Vec::with_capacity(rows.len() * cfg.feature_len * 4);
    for row in rows {
        if row.0.len() != cfg.feature_len {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "row length differs from feature_len",
            ));
        }
        for &v in &row.0 {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    let meta = FeatureDumpMeta {
        n_sessions: rows.len(),
        feature_len: cfg.feature_len,
        dtype: "f32-le".into(),
        layout: "row-major [n_sessions x feature_len]".into(),
        aggregation: cfg.clone(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

pub fn read_feature_dump(path: &Path) -> io::Result<(Vec<FeatureVector>, FeatureDumpMeta)> {
    let meta: FeatureDumpMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    if bytes.len() != meta.n_sessions * meta.feature_len * 4 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "feature dump size does not match sidecar",
        ));
    }
    let rows = bytes
        .chunks_exact(meta.feature_len.max(1) * 4)
        .map(|row| {
            FeatureVector(
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
            )
        })
        .collect();
    Ok((rows, meta))
}
