//! Packet traces, multi-tab sessions and their on-disk formats.
//!
//! A trace is the signed direction sequence of one capture: every packet
//! carries a timestamp (seconds since the capture started) and a direction.
//! `+1` is outgoing (client to server) and `-1` is incoming. Packet sizes are
//! deliberately absent; Tor cells are fixed-size.
//!
//! The text format is one packet per line, `time<TAB>direction`, LF
//! terminated:
//!
//! ```text
//! 0	1
//! 0.0123	-1
//! ```

use std::fmt;
use std::fmt::Write as _;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::TraceError;

/// Packet direction relative to the client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Client to server, written as `1`.
    Out,
    /// Server to client, written as `-1`.
    In,
}

impl Direction {
    pub fn sign(self) -> i8 {
        match self {
            Direction::Out => 1,
            Direction::In => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(Direction::Out),
            -1 => Some(Direction::In),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::Out => Direction::In,
            Direction::In => Direction::Out,
        }
    }

    pub const BOTH: [Direction; 2] = [Direction::Out, Direction::In];
}

impl Serialize for Direction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.sign())
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Direction::from_sign(v)
            .ok_or_else(|| de::Error::custom(format!("direction {v} not in {{1, -1}}")))
    }
}

/// One packet of a trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PacketEvent {
    pub time: f64,
    pub direction: Direction,
    /// Set on packets injected by a defense.
    pub dummy: bool,
}

impl PacketEvent {
    pub fn real(time: f64, direction: Direction) -> Self {
        Self {
            time,
            direction,
            dummy: false,
        }
    }

    pub fn dummy(time: f64, direction: Direction) -> Self {
        Self {
            time,
            direction,
            dummy: true,
        }
    }
}

/// Ground-truth origin of a single-tab trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SiteLabel {
    Monitored(usize),
    Unmonitored,
}

impl Serialize for SiteLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SiteLabel::Monitored(i) => s.serialize_u64(*i as u64),
            SiteLabel::Unmonitored => s.serialize_str("unmonitored"),
        }
    }
}

impl<'de> Deserialize<'de> for SiteLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct LabelVisitor;

        impl Visitor<'_> for LabelVisitor {
            type Value = SiteLabel;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative site index or \"unmonitored\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<SiteLabel, E> {
                Ok(SiteLabel::Monitored(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<SiteLabel, E> {
                if v < 0 {
                    return Err(E::custom(format!("negative site index {v}")));
                }
                Ok(SiteLabel::Monitored(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<SiteLabel, E> {
                if v == "unmonitored" {
                    Ok(SiteLabel::Unmonitored)
                } else {
                    Err(E::custom(format!("unknown label {v:?}")))
                }
            }
        }

        d.deserialize_any(LabelVisitor)
    }
}

/// A time-ordered packet sequence with its site label.
///
/// Construction checks the invariants (finite non-negative times, never
/// decreasing), so every `Trace` value in the program is well-formed. An
/// empty trace is representable; [`parse_trace`] rejects it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    events: Vec<PacketEvent>,
    pub label: SiteLabel,
}

impl Trace {
    pub fn new(events: Vec<PacketEvent>, label: SiteLabel) -> Result<Self, TraceError> {
        let mut prev = 0.0f64;
        for (i, e) in events.iter().enumerate() {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(TraceError::BadTime {
                    index: i,
                    time: e.time,
                });
            }
            if e.time < prev {
                return Err(TraceError::NonMonotonicTime { line: i + 1 });
            }
            prev = e.time;
        }
        Ok(Self { events, label })
    }

    /// Builds a trace from events that may be out of order. The sort is
    /// stable, so ties keep their relative order.
    pub fn from_unsorted(
        mut events: Vec<PacketEvent>,
        label: SiteLabel,
    ) -> Result<Self, TraceError> {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Self::new(events, label)
    }

    pub fn empty(label: SiteLabel) -> Self {
        Self {
            events: Vec::new(),
            label,
        }
    }

    pub fn events(&self) -> &[PacketEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<PacketEvent> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time of the last packet, 0 for an empty trace.
    pub fn duration(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.time)
    }

    pub fn real_events(&self) -> impl Iterator<Item = &PacketEvent> {
        self.events.iter().filter(|e| !e.dummy)
    }

    pub fn dummy_count(&self) -> usize {
        self.events.iter().filter(|e| e.dummy).count()
    }

    pub fn directions(&self) -> impl Iterator<Item = Direction> + '_ {
        self.events.iter().map(|e| e.direction)
    }
}

/// Parses the two-column text format. Labels are not part of the format;
/// the returned trace is labelled [`SiteLabel::Unmonitored`] and callers
/// assign the real label from the dataset manifest.
pub fn parse_trace(text: &str) -> Result<Trace, TraceError> {
    let mut events = Vec::new();
    let mut prev = 0.0f64;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(t), Some(d), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(TraceError::MalformedLine { line: line_no });
        };
        let time: f64 = t
            .trim()
            .parse()
            .map_err(|_| TraceError::MalformedLine { line: line_no })?;
        if !time.is_finite() || time < 0.0 {
            return Err(TraceError::MalformedLine { line: line_no });
        }
        let direction = match d.trim() {
            "1" => Direction::Out,
            "-1" => Direction::In,
            _ => return Err(TraceError::MalformedLine { line: line_no }),
        };
        if time < prev {
            return Err(TraceError::NonMonotonicTime { line: line_no });
        }
        prev = time;
        events.push(PacketEvent::real(time, direction));
    }
    if events.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Ok(Trace {
        events,
        label: SiteLabel::Unmonitored,
    })
}

/// Writes the two-column text format. Times use the shortest decimal that
/// parses back to the same `f64`, so `parse_trace(&write_trace(t))` restores
/// every time and direction exactly. An empty trace writes as `""`, which the
/// parser then rejects.
pub fn write_trace(trace: &Trace) -> String {
    let mut out = String::with_capacity(trace.len() * 12);
    for e in &trace.events {
        writeln!(out, "{}\t{}", e.time, e.direction.sign()).expect("writing to a String");
    }
    out
}

/// Multi-hot ground truth: one slot per monitored site plus a final shared
/// slot for "some unmonitored site".
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn zeros(n_sites: usize) -> Self {
        Self(vec![0; n_sites + 1])
    }

    /// Wraps raw entries without checking that they are binary; see
    /// [`validate_session`].
    pub fn from_bits(bits: Vec<u8>) -> Self {
        Self(bits)
    }

    pub fn from_labels(n_sites: usize, labels: &[SiteLabel]) -> Result<Self, TraceError> {
        let mut v = Self::zeros(n_sites);
        for l in labels {
            v.set(*l)?;
        }
        Ok(v)
    }

    pub fn set(&mut self, label: SiteLabel) -> Result<(), TraceError> {
        let n_sites = self.n_sites();
        let slot = match label {
            SiteLabel::Monitored(i) if i < n_sites => i,
            SiteLabel::Monitored(i) => {
                return Err(TraceError::LabelOutOfRange { index: i, n_sites })
            }
            SiteLabel::Unmonitored => n_sites,
        };
        self.0[slot] = 1;
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_set(&self, slot: usize) -> bool {
        self.0.get(slot).is_some_and(|&b| b == 1)
    }

    pub fn unmonitored(&self) -> bool {
        self.0.last().is_some_and(|&b| b == 1)
    }

    /// Number of set slots.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn monitored_count(&self) -> usize {
        self.0[..self.n_sites()].iter().filter(|&&b| b == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

/// A merged multi-tab capture. The `label` of the inner trace is not
/// meaningful; ground truth lives in `labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub trace: Trace,
    pub labels: LabelVector,
    pub tab_count: usize,
    pub tab_offsets: Vec<f64>,
    pub defense: Option<String>,
}

/// An invariant a [`Session`] fails to hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    ZeroTabs,
    OffsetCountMismatch { offsets: usize, tabs: usize },
    FirstOffsetNotZero(f64),
    OffsetsNotIncreasing { index: usize },
    LabelNotBinary { slot: usize, value: u8 },
    LabelArity { expected: usize, actual: usize },
    TooManyLabels { set: usize, tabs: usize },
    TimeNotMonotonic { index: usize },
    NegativeTime { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroTabs => write!(f, "tab count is zero"),
            Violation::OffsetCountMismatch { offsets, tabs } => {
                write!(f, "{offsets} tab offsets for {tabs} tabs")
            }
            Violation::FirstOffsetNotZero(t) => write!(f, "first offset is {t}, not 0"),
            Violation::OffsetsNotIncreasing { index } => {
                write!(f, "offsets not increasing at index {index}")
            }
            Violation::LabelNotBinary { slot, value } => {
                write!(f, "label not binary: slot {slot} holds {value}")
            }
            Violation::LabelArity { expected, actual } => {
                write!(f, "label vector has {actual} slots, expected {expected}")
            }
            Violation::TooManyLabels { set, tabs } => {
                write!(f, "{set} labels set for {tabs} tabs")
            }
            Violation::TimeNotMonotonic { index } => {
                write!(f, "event times decrease at index {index}")
            }
            Violation::NegativeTime { index } => write!(f, "negative time at index {index}"),
        }
    }
}

/// Collects every invariant violation of `session`. `n_sites`, when given,
/// fixes the expected label arity (`n_sites + 1`).
pub fn validate_session(session: &Session, n_sites: Option<usize>) -> Vec<Violation> {
    let mut out = Vec::new();
    if session.tab_count == 0 {
        out.push(Violation::ZeroTabs);
    }
    if session.tab_offsets.len() != session.tab_count {
        out.push(Violation::OffsetCountMismatch {
            offsets: session.tab_offsets.len(),
            tabs: session.tab_count,
        });
    }
    if let Some(&first) = session.tab_offsets.first() {
        if first != 0.0 {
            out.push(Violation::FirstOffsetNotZero(first));
        }
    }
    for (i, w) in session.tab_offsets.windows(2).enumerate() {
        if w[1] <= w[0] {
            out.push(Violation::OffsetsNotIncreasing { index: i + 1 });
        }
    }
    for (slot, &value) in session.labels.bits().iter().enumerate() {
        if value > 1 {
            out.push(Violation::LabelNotBinary { slot, value });
        }
    }
    if let Some(n) = n_sites {
        if session.labels.len() != n + 1 {
            out.push(Violation::LabelArity {
                expected: n + 1,
                actual: session.labels.len(),
            });
        }
    }
    let set = session.labels.bits().iter().filter(|&&b| b != 0).count();
    if set > session.tab_count {
        out.push(Violation::TooManyLabels {
            set,
            tabs: session.tab_count,
        });
    }
    let mut prev = 0.0f64;
    for (i, e) in session.trace.events().iter().enumerate() {
        if e.time < 0.0 {
            out.push(Violation::NegativeTime { index: i });
        }
        if e.time < prev {
            out.push(Violation::TimeNotMonotonic { index: i });
        }
        prev = prev.max(e.time);
    }
    out
}

/// `manifest.json`: the single-tab traces of a dataset and their labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_sites: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: SiteLabel,
}
