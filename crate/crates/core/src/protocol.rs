//! Newline-delimited JSON wire protocol between vehicles, the control
//! center and consoles.
//!
//! A frame is one UTF-8 JSON object followed by exactly one `\n`. Ordering
//! within a connection is carried by `seq`; `sent_at` is informational.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::fsm::{Effect, Event, GuardContext, Role, TransitionError, TransitionResult, VehicleState};
use crate::maneuver::{Decision, DriveFrame, ManeuverOption, ManeuverTranscript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub msg_id: u64,
    pub seq: u64,
    pub sent_at: u64,
    pub vehicle_id: String,
    pub body: MessageBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPosition {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub state: VehicleState,
    pub position: GeoPosition,
    /// Distance along the route in meters.
    pub route_position: f64,
    /// m/s
    pub speed: f64,
    pub link_quality: f64,
    pub guard: GuardContext,
    #[serde(default)]
    pub route_complete: bool,
}

/// Guard facts the sender asserts for one command; unset fields keep the
/// vehicle's live value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GuardOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_valid: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrc_reason_remaining: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator_attached: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ads_functions_available: Option<bool>,
}

impl GuardOverride {
    pub fn attached() -> Self {
        Self {
            operator_attached: Some(true),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, ctx: &GuardContext) -> GuardContext {
        GuardContext {
            trajectory_valid: self.trajectory_valid.unwrap_or(ctx.trajectory_valid),
            mrc_reason_remaining: self.mrc_reason_remaining.unwrap_or(ctx.mrc_reason_remaining),
            operator_attached: self.operator_attached.unwrap_or(ctx.operator_attached),
            link_quality: self.link_quality.unwrap_or(ctx.link_quality),
            ads_functions_available: self
                .ads_functions_available
                .unwrap_or(ctx.ads_functions_available),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckOutcome {
    Ok(TransitionResult),
    Error(TransitionError),
}

impl From<Result<TransitionResult, TransitionError>> for AckOutcome {
    fn from(r: Result<TransitionResult, TransitionError>) -> Self {
        match r {
            Ok(t) => AckOutcome::Ok(t),
            Err(e) => AckOutcome::Error(e),
        }
    }
}

impl AckOutcome {
    pub fn next_state(&self) -> Option<VehicleState> {
        match self {
            AckOutcome::Ok(t) => Some(t.next),
            AckOutcome::Error(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessageBody {
    /// First frame on a vehicle connection.
    Hello { profile: String, state: VehicleState },
    Telemetry(Telemetry),
    InteractionRequest { reason: String },
    MonitoringRequest { origin: Role, reason: String },
    Command {
        event: Event,
        #[serde(default, skip_serializing_if = "GuardOverride::is_empty")]
        ctx_override: GuardOverride,
    },
    CommandAck { ref_msg_id: u64, outcome: AckOutcome },
    /// Every transition the vehicle applied, commanded or local.
    TransitionReport {
        from: VehicleState,
        event: Event,
        ctx: GuardContext,
        next: VehicleState,
        #[serde(default)]
        effects: Vec<Effect>,
    },
    DriveFrame(DriveFrame),
    ManeuverProposal { options: Vec<ManeuverOption> },
    ManeuverDecision { proposal_id: u64, selected: Decision },
    ClassificationQuery { object: String },
    ClassificationAnswer { label: String },
    Transcript { transcript: ManeuverTranscript },
    /// Typed refusal of a non-command frame.
    Rejected { ref_msg_id: u64, reason: String },
    Heartbeat {},
}

impl MessageBody {
    pub fn type_name(&self) -> &'static str {
        match self {
            MessageBody::Hello { .. } => "hello",
            MessageBody::Telemetry(_) => "telemetry",
            MessageBody::InteractionRequest { .. } => "interaction_request",
            MessageBody::MonitoringRequest { .. } => "monitoring_request",
            MessageBody::Command { .. } => "command",
            MessageBody::CommandAck { .. } => "command_ack",
            MessageBody::TransitionReport { .. } => "transition_report",
            MessageBody::DriveFrame(_) => "drive_frame",
            MessageBody::ManeuverProposal { .. } => "maneuver_proposal",
            MessageBody::ManeuverDecision { .. } => "maneuver_decision",
            MessageBody::ClassificationQuery { .. } => "classification_query",
            MessageBody::ClassificationAnswer { .. } => "classification_answer",
            MessageBody::Transcript { .. } => "transcript",
            MessageBody::Rejected { .. } => "rejected",
            MessageBody::Heartbeat {} => "heartbeat",
        }
    }

    pub fn is_vehicle_scoped(&self) -> bool {
        !matches!(self, MessageBody::Heartbeat {})
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("encode error: {0}")]
pub struct EncodeError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("decode error at byte {position}: {reason}")]
pub struct DecodeError {
    pub position: usize,
    pub reason: String,
}

fn finite(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} is not finite"))
    }
}

fn unit(name: &str, v: f64) -> Result<(), String> {
    finite(name, v)?;
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} {v} outside [0, 1]"))
    }
}

impl Message {
    /// Checks the envelope and body invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.body.is_vehicle_scoped() && self.vehicle_id.is_empty() {
            return Err(format!("{} requires a vehicle_id", self.body.type_name()));
        }
        match &self.body {
            MessageBody::Telemetry(t) => {
                finite("lat", t.position.lat)?;
                finite("lon", t.position.lon)?;
                finite("route_position", t.route_position)?;
                finite("speed", t.speed)?;
                unit("link_quality", t.link_quality)?;
                unit("guard.link_quality", t.guard.link_quality)?;
            }
            MessageBody::Command { ctx_override, .. } => {
                if let Some(l) = ctx_override.link_quality {
                    unit("ctx_override.link_quality", l)?;
                }
            }
            MessageBody::TransitionReport { ctx, .. } => unit("ctx.link_quality", ctx.link_quality)?,
            MessageBody::DriveFrame(f) => f.validate()?,
            MessageBody::Transcript { transcript } => finite("distance_m", transcript.distance_m)?,
            _ => {}
        }
        Ok(())
    }
}

/// Serializes one frame, newline included.
pub fn encode(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    msg.validate().map_err(EncodeError)?;
    let mut out = serde_json::to_vec(msg).map_err(|e| EncodeError(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Parses one frame. A single trailing `\n` is accepted; `\r` never is.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let line = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    if let Some(pos) = line.iter().position(|b| *b == b'\n' || *b == b'\r') {
        return Err(DecodeError {
            position: pos,
            reason: "embedded line terminator".into(),
        });
    }
    let text = std::str::from_utf8(line).map_err(|e| DecodeError {
        position: e.valid_up_to(),
        reason: "invalid utf-8".into(),
    })?;
    let msg: Message = serde_json::from_str(text).map_err(|e| DecodeError {
        position: e.column().saturating_sub(1),
        reason: e.to_string(),
    })?;
    msg.validate().map_err(|reason| DecodeError {
        position: 0,
        reason,
    })?;
    Ok(msg)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("sequence regression: got {got} after {last}")]
    SeqRegression { last: u64, got: u64 },
    #[error("duplicate msg_id {msg_id}")]
    DuplicateMsgId { msg_id: u64 },
}

/// Receive-side checks for one connection.
#[derive(Debug, Clone, Default)]
pub struct InboundSession {
    last_seq: Option<u64>,
    seen: HashSet<u64>,
}

impl InboundSession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accept(&mut self, msg: &Message) -> Result<(), SessionError> {
        if self.seen.contains(&msg.msg_id) {
            return Err(SessionError::DuplicateMsgId { msg_id: msg.msg_id });
        }
        if let Some(last) = self.last_seq {
            if msg.seq <= last {
                return Err(SessionError::SeqRegression { last, got: msg.seq });
            }
        }
        self.last_seq = Some(msg.seq);
        self.seen.insert(msg.msg_id);
        Ok(())
    }
}

/// Send-side stamping for one connection.
#[derive(Debug, Clone, Default)]
pub struct Outbox {
    next_seq: u64,
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stamp(
        &mut self,
        msg_id: u64,
        vehicle_id: &str,
        body: MessageBody,
        sent_at: u64,
    ) -> Message {
        self.next_seq += 1;
        Message {
            msg_id,
            seq: self.next_seq,
            sent_at,
            vehicle_id: vehicle_id.to_string(),
            body,
        }
    }
}

/// Monotone msg_id source for one sender.
#[derive(Debug, Clone, Default)]
pub struct IdSource(u64);

impl IdSource {
    pub fn next_id(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkStatus {
    Alive,
    Degraded,
    Lost,
}

/// Classifies a link by time since last contact: alive below half the
/// timeout, degraded below the timeout, lost otherwise.
pub fn heartbeat_monitor(last_seen: u64, now: u64, timeout_ms: u64) -> LinkStatus {
    let silent = now.saturating_sub(last_seen);
    if silent.saturating_mul(2) < timeout_ms {
        LinkStatus::Alive
    } else if silent < timeout_ms {
        LinkStatus::Degraded
    } else {
        LinkStatus::Lost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatConfig {
    pub period_ms: u64,
    pub timeout_ms: u64,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            period_ms: 500,
            timeout_ms: 2000,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(seq: u64, body: MessageBody) -> Message {
        Message {
            msg_id: seq,
            seq,
            sent_at: 0,
            vehicle_id: "v1".into(),
            body,
        }
    }

    #[test]
    fn heartbeat_frame_is_bit_exact() {
        let bytes = encode(&msg(1, MessageBody::Heartbeat {})).unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            "{\"msg_id\":1,\"seq\":1,\"sent_at\":0,\"vehicle_id\":\"v1\",\"body\":{\"type\":\"heartbeat\"}}\n"
        );
    }

    #[test]
    fn telemetry_state_naming() {
        let t = Telemetry {
            state: VehicleState::MonitoredAutomatedDriving,
            position: GeoPosition { lat: 48.1, lon: 11.5 },
            route_position: 10.0,
            speed: 10.0,
            link_quality: 0.9,
            guard: GuardContext::default(),
            route_complete: false,
        };
        let bytes = encode(&msg(2, MessageBody::Telemetry(t))).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["body"]["type"], "telemetry");
        assert_eq!(v["body"]["state"], "monitored_automated_driving");
    }

    #[test]
    fn out_of_range_drive_frame_rejected() {
        let f = DriveFrame {
            steering: 2.0,
            ..DriveFrame::throttle(0.0)
        };
        assert!(encode(&msg(1, MessageBody::DriveFrame(f))).is_err());
        let nan = DriveFrame::throttle(f64::NAN);
        assert!(encode(&msg(1, MessageBody::DriveFrame(nan))).is_err());
    }

    #[test]
    fn unknown_body_type_rejected() {
        let raw = br#"{"msg_id":1,"seq":1,"sent_at":0,"vehicle_id":"v1","body":{"type":"warp_drive"}}"#;
        let err = decode(raw).unwrap_err();
        assert!(err.reason.contains("warp_drive"), "{err}");
    }

    #[test]
    fn unknown_fields_ignored_and_crlf_rejected() {
        let raw = b"{\"msg_id\":1,\"seq\":1,\"sent_at\":0,\"vehicle_id\":\"v1\",\"extra\":3,\"body\":{\"type\":\"heartbeat\",\"x\":1}}\n";
        assert_eq!(decode(raw).unwrap().body, MessageBody::Heartbeat {});
        let crlf = b"{\"msg_id\":1,\"seq\":1,\"sent_at\":0,\"vehicle_id\":\"v1\",\"body\":{\"type\":\"heartbeat\"}}\r\n";
        assert!(decode(crlf).is_err());
    }

    #[test]
    fn empty_vehicle_id_rejected_for_scoped_bodies() {
        let mut m = msg(1, MessageBody::InteractionRequest { reason: "x".into() });
        m.vehicle_id.clear();
        assert!(encode(&m).is_err());
        let mut hb = msg(1, MessageBody::Heartbeat {});
        hb.vehicle_id.clear();
        assert!(encode(&hb).is_ok());
    }

    #[test]
    fn seq_regression_and_duplicates() {
        let mut s = InboundSession::new();
        s.accept(&msg(5, MessageBody::Heartbeat {})).unwrap();
        let mut back = msg(4, MessageBody::Heartbeat {});
        back.msg_id = 40;
        assert_eq!(s.accept(&back), Err(SessionError::SeqRegression { last: 5, got: 4 }));
        let mut dup = msg(6, MessageBody::Heartbeat {});
        dup.msg_id = 5;
        assert_eq!(s.accept(&dup), Err(SessionError::DuplicateMsgId { msg_id: 5 }));
        let mut ok = msg(6, MessageBody::Heartbeat {});
        ok.msg_id = 6;
        assert!(s.accept(&ok).is_ok());
    }

    #[test]
    fn heartbeat_thresholds() {
        assert_eq!(heartbeat_monitor(0, 100, 1000), LinkStatus::Alive);
        assert_eq!(heartbeat_monitor(0, 499, 1000), LinkStatus::Alive);
        assert_eq!(heartbeat_monitor(0, 500, 1000), LinkStatus::Degraded);
        assert_eq!(heartbeat_monitor(0, 700, 1000), LinkStatus::Degraded);
        assert_eq!(heartbeat_monitor(0, 1000, 1000), LinkStatus::Lost);
        assert_eq!(heartbeat_monitor(0, 1500, 1000), LinkStatus::Lost);
    }

    #[test]
    fn override_applies_only_set_fields() {
        let o = GuardOverride::attached();
        let ctx = o.apply(&GuardContext {
            link_quality: 0.3,
            ..GuardContext::default()
        });
        assert!(ctx.operator_attached);
        assert_eq!(ctx.link_quality, 0.3);
        let cmd = msg(
            1,
            MessageBody::Command {
                event: Event::new(Role::RemoteOperator, crate::fsm::EventKind::ActivateAds),
                ctx_override: GuardOverride::default(),
            },
        );
        let text = String::from_utf8(encode(&cmd).unwrap()).unwrap();
        assert!(!text.contains("ctx_override"));
    }
}
