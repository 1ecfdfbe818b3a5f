//! Append-only audit log with deterministic replay.
//!
//! One canonical JSON object per line (sorted keys, no whitespace).
//! `entry_seq` is dense from 1.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fsm::{Effect, Event, GuardContext, LegalProfile, TransitionModel, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Transition,
    Command,
    Ack,
    Request,
    Session,
    Transcript,
    Note,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub entry_seq: u64,
    pub at: u64,
    pub vehicle_id: Option<String>,
    pub kind: EntryKind,
    pub payload: Value,
}

impl LogEntry {
    /// Canonical single-line rendering, without the trailing newline.
    pub fn to_line(&self) -> String {
        let value = serde_json::to_value(self).expect("log entries always serialize");
        value.to_string()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Default)]
struct LogInner {
    entries: Vec<LogEntry>,
    file: Option<File>,
}

/// Thread-safe append-only log; appends are serialized through one lock.
#[derive(Default)]
pub struct EventLog {
    inner: Mutex<LogInner>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Log that also writes every entry through to `path` (truncated).
    pub fn create(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(Self {
            inner: Mutex::new(LogInner {
                entries: Vec::new(),
                file: Some(file),
            }),
        })
    }

    pub fn append<T: Serialize + ?Sized>(
        &self,
        at: u64,
        vehicle_id: Option<&str>,
        kind: EntryKind,
        payload: &T,
    ) -> Result<u64, StorageError> {
        let payload =
            serde_json::to_value(payload).map_err(|e| StorageError::MalformedPayload(e.to_string()))?;
        self.push(at, vehicle_id, kind, payload)
    }

    /// Appends a payload given as JSON text.
    pub fn append_raw(
        &self,
        at: u64,
        vehicle_id: Option<&str>,
        kind: EntryKind,
        payload_json: &str,
    ) -> Result<u64, StorageError> {
        let payload: Value = serde_json::from_str(payload_json)
            .map_err(|e| StorageError::MalformedPayload(e.to_string()))?;
        self.push(at, vehicle_id, kind, payload)
    }

    fn push(
        &self,
        at: u64,
        vehicle_id: Option<&str>,
        kind: EntryKind,
        payload: Value,
    ) -> Result<u64, StorageError> {
        let mut inner = self.inner.lock();
        let entry = LogEntry {
            entry_seq: inner.entries.len() as u64 + 1,
            at,
            vehicle_id: vehicle_id.map(str::to_string),
            kind,
            payload,
        };
        if let Some(file) = inner.file.as_mut() {
            let mut line = entry.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        let seq = entry.entry_seq;
        inner.entries.push(entry);
        Ok(seq)
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.inner.lock().entries.clone()
    }

    pub fn entries_from(&self, entry_seq: u64) -> Vec<LogEntry> {
        let inner = self.inner.lock();
        let start = entry_seq.saturating_sub(1) as usize;
        inner.entries.get(start..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn render_log(entries: &[LogEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<LogEntry>, StorageError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StorageError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogEntry>, StorageError> {
    parse_log(&std::fs::read_to_string(path)?)
}

const TIME_KEYS: [&str; 6] = ["at", "sent_at", "started_at", "ended_at", "created_at", "issued_at"];

fn zero_times(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, child) in map.iter_mut() {
                if TIME_KEYS.contains(&k.as_str()) && !child.is_null() {
                    *child = Value::from(0);
                } else {
                    zero_times(child);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(zero_times),
        _ => {}
    }
}

/// Zeroes every timestamp field so runs can be compared byte for byte.
pub fn normalize_timestamps(entries: &[LogEntry]) -> Vec<LogEntry> {
    entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.at = 0;
            zero_times(&mut e.payload);
            e
        })
        .collect()
}

/// Payload of a `Transition` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub vehicle_id: String,
    pub from: VehicleState,
    pub event: Event,
    pub ctx: GuardContext,
    pub next: VehicleState,
    pub effects: Vec<Effect>,
    pub profile: String,
    pub model: TransitionModel,
}

pub type FleetState = BTreeMap<String, VehicleState>;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("replay diverges at entry {entry_seq}: {detail}")]
    Divergence { entry_seq: u64, detail: String },
}

fn diverge(entry_seq: u64, detail: impl Into<String>) -> ReplayError {
    ReplayError::Divergence {
        entry_seq,
        detail: detail.into(),
    }
}

fn replay_inner(
    entries: &[LogEntry],
    upto: Option<u64>,
) -> Result<(FleetState, Vec<(u64, TransitionRecord)>), ReplayError> {
    let mut fleet = FleetState::new();
    let mut applied = Vec::new();
    for entry in entries {
        if upto.is_some_and(|u| entry.entry_seq > u) {
            break;
        }
        if entry.kind != EntryKind::Transition {
            continue;
        }
        let seq = entry.entry_seq;
        let rec: TransitionRecord = serde_json::from_value(entry.payload.clone())
            .map_err(|e| diverge(seq, format!("unreadable transition: {e}")))?;
        let current = fleet.get(&rec.vehicle_id).copied().unwrap_or(VehicleState::Initial);
        if current != rec.from {
            return Err(diverge(
                seq,
                format!("{} recorded from {} but model holds {}", rec.vehicle_id, rec.from, current),
            ));
        }
        let profile = LegalProfile::by_name(&rec.profile).map_err(|e| diverge(seq, e.to_string()))?;
        let result = rec
            .model
            .apply_event(rec.from, rec.event, &rec.ctx, &profile)
            .map_err(|e| diverge(seq, format!("{} rejected by model: {e}", rec.event)))?;
        if result.next != rec.next || result.effects != rec.effects {
            return Err(diverge(
                seq,
                format!(
                    "{} recorded {} {:?}, model gives {} {:?}",
                    rec.event, rec.next, rec.effects, result.next, result.effects
                ),
            ));
        }
        fleet.insert(rec.vehicle_id.clone(), result.next);
        applied.push((entry.at, rec));
    }
    Ok((fleet, applied))
}

/// Re-applies every `Transition` entry up to `upto` through the model and
/// returns the per-vehicle states. Vehicles start in `Initial`.
pub fn replay(entries: &[LogEntry], upto: Option<u64>) -> Result<FleetState, ReplayError> {
    replay_inner(entries, upto).map(|(fleet, _)| fleet)
}

/// The transition entries as re-derived by replay, renumbered from 1.
pub fn export_replayed(entries: &[LogEntry], upto: Option<u64>) -> Result<Vec<LogEntry>, ReplayError> {
    let (_, applied) = replay_inner(entries, upto)?;
    Ok(applied
        .into_iter()
        .enumerate()
        .map(|(i, (at, rec))| LogEntry {
            entry_seq: i as u64 + 1,
            at,
            vehicle_id: Some(rec.vehicle_id.clone()),
            kind: EntryKind::Transition,
            payload: serde_json::to_value(&rec).expect("record serializes"),
        })
        .collect())
}

/// Finds the first `Ack` entry whose command was not logged before it.
pub fn first_orphan_ack(entries: &[LogEntry]) -> Option<u64> {
    let mut commands = std::collections::HashSet::new();
    for e in entries {
        match e.kind {
            EntryKind::Command => {
                if let Some(id) = e.payload.get("msg_id").and_then(Value::as_u64) {
                    commands.insert(id);
                }
            }
            EntryKind::Ack => {
                let id = e.payload.get("ref_msg_id").and_then(Value::as_u64);
                if !id.is_some_and(|id| commands.contains(&id)) {
                    return Some(e.entry_seq);
                }
            }
            _ => {}
        }
    }
    None
}
