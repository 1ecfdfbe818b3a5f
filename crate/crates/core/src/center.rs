//! Control center: vehicle registry, request queue, operator sessions and
//! central profile enforcement.
//!
//! All state sits behind one lock so that claims are compare-and-set and
//! every audit entry is appended in the order its effect took place. The
//! center never talks to a socket; callers feed it inbound frames and send
//! the frames it hands back (see [`VehicleLink`] for the in-process form).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::eventlog::{EntryKind, EventLog, LogEntry, StorageError, TransitionRecord};
use crate::fsm::{
    Effect, Event, EventKind, EventOption, GuardContext, LegalProfile, Role,
    TransitionModel, VehicleState,
};
use crate::maneuver::{ManeuverOption, ManeuverTranscript};
use crate::protocol::{
    heartbeat_monitor, AckOutcome, GuardOverride, HeartbeatConfig, IdSource, InboundSession,
    LinkStatus, Message, MessageBody, Outbox, SessionError, Telemetry,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CenterConfig {
    pub profile: LegalProfile,
    pub model: TransitionModel,
    /// Start service on registration instead of queueing a connection test.
    pub auto_registration: bool,
    pub telemetry_gap_ms: u64,
    pub heartbeat: HeartbeatConfig,
}

impl CenterConfig {
    pub fn new(profile: LegalProfile) -> Self {
        Self {
            profile,
            model: TransitionModel::default(),
            auto_registration: false,
            telemetry_gap_ms: 3000,
            heartbeat: HeartbeatConfig::default(),
        }
    }

    pub fn with_auto_registration(mut self, on: bool) -> Self {
        self.auto_registration = on;
        self.model.system_start_service = on;
        self
    }

    pub fn with_fm_intervention(mut self, on: bool) -> Self {
        self.model.fm_intervention = on;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleOrigin {
    RemoteOperator,
    FleetManagerElevated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSession {
    pub session_id: String,
    pub operator_id: String,
    pub role_origin: RoleOrigin,
    pub vehicle_id: String,
    pub started_at: u64,
    pub ended_at: Option<u64>,
    /// Requests this session took over.
    pub requests: Vec<String>,
}

impl OperatorSession {
    pub fn is_open(&self) -> bool {
        self.ended_at.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestPriority {
    Mrm,
    Monitoring,
    ServiceStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Open,
    Claimed,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetRequest {
    pub request_id: String,
    pub vehicle_id: String,
    pub origin: Role,
    pub reason: String,
    pub priority: RequestPriority,
    pub created_at: u64,
    pub status: RequestStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reopened_from: Option<String>,
    #[serde(skip)]
    ordinal: u64,
}

impl FleetRequest {
    fn queue_key(&self) -> (RequestPriority, u64, u64) {
        (self.priority, self.created_at, self.ordinal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyFlag {
    TelemetryGap,
    LinkDegraded,
    StateMismatch,
}

impl AnomalyFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyFlag::TelemetryGap => "telemetry_gap",
            AnomalyFlag::LinkDegraded => "link_degraded",
            AnomalyFlag::StateMismatch => "state_mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingProposal {
    pub proposal_id: u64,
    pub options: Vec<ManeuverOption>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub vehicle_id: String,
    pub profile: String,
    pub last_state: VehicleState,
    pub last_telemetry: Option<Telemetry>,
    pub last_seen: u64,
    pub link: LinkStatus,
    pub anomaly_flags: BTreeSet<AnomalyFlag>,
    pub registered_at: u64,
    pub proposal: Option<PendingProposal>,
    pub query: Option<String>,
    pub last_transcript: Option<ManeuverTranscript>,
}

/// What the fleet manager board shows: no proposals, queries or transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub vehicle_id: String,
    pub state: VehicleState,
    pub link: LinkStatus,
    pub anomaly_flags: BTreeSet<AnomalyFlag>,
    pub route_position: Option<f64>,
    pub route_complete: bool,
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum ClaimTarget {
    Request { request_id: String },
    Vehicle { vehicle_id: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CenterError {
    #[error("vehicle {0} already registered")]
    DuplicateVehicle(String),
    #[error("unknown vehicle {0}")]
    UnknownVehicle(String),
    #[error("vehicle runs profile {got}, center enforces {expected}")]
    ProfileMismatch { expected: String, got: String },
    #[error("vehicle must connect in prepared state, reports {0}")]
    NotPrepared(VehicleState),
    #[error("vehicle {0} already has an open session")]
    VehicleBusy(String),
    #[error("operator {0} already has an open session")]
    OperatorBusy(String),
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("request {0} is not open")]
    RequestNotOpen(String),
    #[error("role {0} cannot open a session")]
    RoleNotPermitted(Role),
    #[error("no open session {0}")]
    NoSession(String),
    #[error("{event} forbidden by profile {profile}")]
    ForbiddenByProfile { profile: String, event: EventKind },
    #[error("{actor} may not issue {event}")]
    ActorNotPermitted { actor: Role, event: EventKind },
    #[error("release refused while an alternative maneuver is active")]
    ReleaseRefusedMidManeuver,
    #[error("frame not accepted in a session: {0}")]
    NotSessionFrame(&'static str),
    #[error("fleet manager intervention is disabled")]
    InterventionDisabled,
    #[error(transparent)]
    Link(#[from] SessionError),
    #[error("unexpected {0} frame from vehicle")]
    UnexpectedFrame(&'static str),
    #[error("vehicle did not acknowledge command {0}")]
    NoAck(u64),
    #[error("audit log: {0}")]
    Storage(String),
}

impl CenterError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            CenterError::DuplicateVehicle(_) => "duplicate_vehicle",
            CenterError::UnknownVehicle(_) => "unknown_vehicle",
            CenterError::ProfileMismatch { .. } => "profile_mismatch",
            CenterError::NotPrepared(_) => "not_prepared",
            CenterError::VehicleBusy(_) => "vehicle_busy",
            CenterError::OperatorBusy(_) => "operator_busy",
            CenterError::UnknownRequest(_) => "unknown_request",
            CenterError::RequestNotOpen(_) => "request_not_open",
            CenterError::RoleNotPermitted(_) => "role_not_permitted",
            CenterError::NoSession(_) => "no_session",
            CenterError::ForbiddenByProfile { .. } => "forbidden_by_profile",
            CenterError::ActorNotPermitted { .. } => "actor_not_permitted",
            CenterError::ReleaseRefusedMidManeuver => "release_refused_mid_maneuver",
            CenterError::NotSessionFrame(_) => "not_session_frame",
            CenterError::InterventionDisabled => "intervention_disabled",
            CenterError::Link(_) => "link",
            CenterError::UnexpectedFrame(_) => "unexpected_frame",
            CenterError::NoAck(_) => "no_ack",
            CenterError::Storage(_) => "storage",
        }
    }
}

impl From<StorageError> for CenterError {
    fn from(e: StorageError) -> Self {
        CenterError::Storage(e.to_string())
    }
}

/// Something the caller of [`ControlCenter::on_vehicle_message`] may need
/// to act on.
#[derive(Debug, Clone, PartialEq)]
pub enum Notice {
    Ack { ref_msg_id: u64, outcome: AckOutcome },
    RequestOpened(FleetRequest),
    SessionClosed(OperatorSession),
    FleetManagerNotified { vehicle_id: String },
    /// The vehicle reported a transition from a state the center did not hold.
    MirrorMismatch { vehicle_id: String, center: VehicleState, reported: VehicleState },
    Rejected { ref_msg_id: u64, reason: String },
}

/// Items fanned out to console streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stream", rename_all = "snake_case")]
pub enum StreamItem {
    Vehicle { message: Message },
    Log { entry: LogEntry },
}

pub type Observer = Box<dyn Fn(StreamItem) + Send + Sync>;

pub enum ReleaseStep {
    Closed(OperatorSession),
    /// Send this EndMonitoring command; the session closes on its report.
    EndMonitoring(Message),
}

#[derive(Default)]
struct LinkState {
    outbox: Outbox,
    inbound: InboundSession,
}

struct PendingCommand {
    session_id: Option<String>,
}

#[derive(Default)]
struct Inner {
    vehicles: BTreeMap<String, VehicleRecord>,
    links: BTreeMap<String, LinkState>,
    requests: BTreeMap<String, FleetRequest>,
    sessions: BTreeMap<String, OperatorSession>,
    session_by_vehicle: BTreeMap<String, String>,
    session_by_operator: BTreeMap<String, String>,
    suspended_fm: BTreeSet<String>,
    pending: BTreeMap<u64, PendingCommand>,
    next_request: u64,
    next_session: u64,
    ids: IdSource,
}

pub struct ControlCenter {
    config: CenterConfig,
    log: Arc<EventLog>,
    inner: Mutex<Inner>,
    observer: Option<Observer>,
}

impl ControlCenter {
    pub fn new(config: CenterConfig, log: Arc<EventLog>) -> Self {
        Self {
            config,
            log,
            inner: Mutex::new(Inner::default()),
            observer: None,
        }
    }

    pub fn with_observer(mut self, observer: Observer) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn config(&self) -> &CenterConfig {
        &self.config
    }

    pub fn log(&self) -> &Arc<EventLog> {
        &self.log
    }

    fn notify(&self, item: StreamItem) {
        if let Some(obs) = &self.observer {
            obs(item);
        }
    }

    fn audit<T: Serialize + ?Sized>(
        &self,
        at: u64,
        vehicle_id: Option<&str>,
        kind: EntryKind,
        payload: &T,
    ) -> Result<(), CenterError> {
        let seq = self.log.append(at, vehicle_id, kind, payload)?;
        if self.observer.is_some() {
            if let Some(entry) = self.log.entries_from(seq).into_iter().next() {
                self.notify(StreamItem::Log { entry });
            }
        }
        Ok(())
    }

    fn stamp(&self, inner: &mut Inner, vehicle_id: &str, body: MessageBody, now: u64) -> Message {
        let id = inner.ids.next_id();
        inner
            .links
            .entry(vehicle_id.to_string())
            .or_default()
            .outbox
            .stamp(id, vehicle_id, body, now)
    }

    #[allow(clippy::too_many_arguments)]
    fn open_request(
        &self,
        inner: &mut Inner,
        vehicle_id: &str,
        origin: Role,
        reason: &str,
        priority: RequestPriority,
        reopened_from: Option<String>,
        now: u64,
    ) -> Result<FleetRequest, CenterError> {
        inner.next_request += 1;
        let req = FleetRequest {
            request_id: format!("r{}", inner.next_request),
            vehicle_id: vehicle_id.to_string(),
            origin,
            reason: reason.to_string(),
            priority,
            created_at: now,
            status: RequestStatus::Open,
            reopened_from,
            ordinal: inner.next_request,
        };
        self.audit(now, Some(vehicle_id), EntryKind::Request, &json!({"action": "opened", "request": req}))?;
        inner.requests.insert(req.request_id.clone(), req.clone());
        Ok(req)
    }

    fn set_request_status(
        &self,
        inner: &mut Inner,
        request_id: &str,
        status: RequestStatus,
        now: u64,
    ) -> Result<(), CenterError> {
        let req = inner
            .requests
            .get_mut(request_id)
            .ok_or_else(|| CenterError::UnknownRequest(request_id.to_string()))?;
        if req.status >= status {
            return Ok(());
        }
        req.status = status;
        let action = match status {
            RequestStatus::Claimed => "claimed",
            _ => "resolved",
        };
        let payload = json!({"action": action, "request_id": request_id});
        let vid = req.vehicle_id.clone();
        self.audit(now, Some(&vid), EntryKind::Request, &payload)
    }

    /// Validates the handshake and creates the registry record. Returns the
    /// StartService command to send when auto-registration is on.
    pub fn register_vehicle(&self, hello: &Message, now: u64) -> Result<(VehicleRecord, Option<Message>), CenterError> {
        let MessageBody::Hello { profile, state } = &hello.body else {
            return Err(CenterError::UnexpectedFrame(hello.body.type_name()));
        };
        let vid = hello.vehicle_id.as_str();
        let mut inner = self.inner.lock();
        if inner.vehicles.contains_key(vid) {
            return Err(CenterError::DuplicateVehicle(vid.to_string()));
        }
        if *profile != self.config.profile.name {
            return Err(CenterError::ProfileMismatch {
                expected: self.config.profile.name.clone(),
                got: profile.clone(),
            });
        }
        if *state != VehicleState::Prepared {
            return Err(CenterError::NotPrepared(*state));
        }
        let mut link = LinkState::default();
        link.inbound.accept(hello)?;
        inner.links.insert(vid.to_string(), link);
        self.notify(StreamItem::Vehicle { message: hello.clone() });
        let record = VehicleRecord {
            vehicle_id: vid.to_string(),
            profile: profile.clone(),
            last_state: *state,
            last_telemetry: None,
            last_seen: now,
            link: LinkStatus::Alive,
            anomaly_flags: BTreeSet::new(),
            registered_at: now,
            proposal: None,
            query: None,
            last_transcript: None,
        };
        inner.vehicles.insert(vid.to_string(), record.clone());
        self.audit(now, Some(vid), EntryKind::Session, &json!({"action": "registered", "profile": profile}))?;
        let start = if self.config.auto_registration {
            let event = Event::new(Role::System, EventKind::StartService);
            let msg = self.stamp(&mut inner, vid, command_body(event, GuardOverride::default()), now);
            self.log_command(&mut inner, &msg, None, now)?;
            Some(msg)
        } else {
            self.open_request(&mut inner, vid, Role::Ads, "connection_test", RequestPriority::ServiceStart, None, now)?;
            None
        };
        Ok((record, start))
    }

    fn log_command(&self, inner: &mut Inner, msg: &Message, session: Option<&OperatorSession>, now: u64) -> Result<(), CenterError> {
        let MessageBody::Command { event, ctx_override } = &msg.body else {
            unreachable!("log_command takes commands");
        };
        let payload = json!({
            "msg_id": msg.msg_id,
            "event": event,
            "ctx_override": ctx_override,
            "session_id": session.map(|s| s.session_id.clone()),
            "operator_id": session.map(|s| s.operator_id.clone()),
        });
        self.audit(now, Some(&msg.vehicle_id), EntryKind::Command, &payload)?;
        inner.pending.insert(
            msg.msg_id,
            PendingCommand {
                session_id: session.map(|s| s.session_id.clone()),
            },
        );
        Ok(())
    }

    /// Opens a session for `operator_id`. Compare-and-set: fails if either
    /// side already holds an open session.
    pub fn claim(&self, operator_id: &str, target: &ClaimTarget, as_role: Role, now: u64) -> Result<OperatorSession, CenterError> {
        let role_origin = match as_role {
            Role::RemoteOperator => RoleOrigin::RemoteOperator,
            Role::FleetManager => RoleOrigin::FleetManagerElevated,
            other => return Err(CenterError::RoleNotPermitted(other)),
        };
        let mut inner = self.inner.lock();
        let (vehicle_id, request) = match target {
            ClaimTarget::Request { request_id } => {
                let req = inner
                    .requests
                    .get(request_id)
                    .ok_or_else(|| CenterError::UnknownRequest(request_id.clone()))?;
                if req.status != RequestStatus::Open {
                    return Err(CenterError::RequestNotOpen(request_id.clone()));
                }
                (req.vehicle_id.clone(), Some(request_id.clone()))
            }
            ClaimTarget::Vehicle { vehicle_id } => {
                if !inner.vehicles.contains_key(vehicle_id) {
                    return Err(CenterError::UnknownVehicle(vehicle_id.clone()));
                }
                (vehicle_id.clone(), None)
            }
        };
        if inner.session_by_vehicle.contains_key(&vehicle_id) {
            return Err(CenterError::VehicleBusy(vehicle_id));
        }
        if inner.session_by_operator.contains_key(operator_id) {
            return Err(CenterError::OperatorBusy(operator_id.to_string()));
        }
        inner.next_session += 1;
        let session_id = format!("s{}", inner.next_session);
        let mut linked: Vec<String> = request.into_iter().collect();
        linked.extend(
            inner
                .requests
                .values()
                .filter(|r| r.vehicle_id == vehicle_id && r.status == RequestStatus::Open)
                .filter(|r| !linked.contains(&r.request_id))
                .map(|r| r.request_id.clone())
                .collect::<Vec<_>>(),
        );
        let session = OperatorSession {
            session_id: session_id.clone(),
            operator_id: operator_id.to_string(),
            role_origin,
            vehicle_id: vehicle_id.clone(),
            started_at: now,
            ended_at: None,
            requests: linked.clone(),
        };
        self.audit(now, Some(&vehicle_id), EntryKind::Session, &json!({"action": "claimed", "session": session}))?;
        for r in &linked {
            self.set_request_status(&mut inner, r, RequestStatus::Claimed, now)?;
        }
        if role_origin == RoleOrigin::FleetManagerElevated {
            inner.suspended_fm.insert(operator_id.to_string());
        }
        inner.session_by_vehicle.insert(vehicle_id, session_id.clone());
        inner.session_by_operator.insert(operator_id.to_string(), session_id.clone());
        inner.sessions.insert(session_id, session.clone());
        Ok(session)
    }

    fn open_session<'a>(inner: &'a Inner, session_id: &str) -> Result<&'a OperatorSession, CenterError> {
        inner
            .sessions
            .get(session_id)
            .filter(|s| s.is_open())
            .ok_or_else(|| CenterError::NoSession(session_id.to_string()))
    }

    /// Checks and stamps a command for the session's vehicle and writes it
    /// to the audit log. Refusals are logged and never reach the vehicle.
    pub fn begin_command(&self, session_id: &str, event: Event, now: u64) -> Result<Message, CenterError> {
        let mut inner = self.inner.lock();
        let session = Self::open_session(&inner, session_id)?.clone();
        let refusal = if event.actor != Role::RemoteOperator
            || !self.config.model.actors_for(&event.kind).contains(&Role::RemoteOperator)
        {
            Some(CenterError::ActorNotPermitted {
                actor: event.actor,
                event: event.kind,
            })
        } else if self.config.profile.forbids(&event.kind) {
            Some(CenterError::ForbiddenByProfile {
                profile: self.config.profile.name.clone(),
                event: event.kind,
            })
        } else {
            None
        };
        if let Some(err) = refusal {
            let payload = json!({
                "refused_command": event,
                "session_id": session_id,
                "operator_id": session.operator_id,
                "reason": err.to_string(),
            });
            self.audit(now, Some(&session.vehicle_id), EntryKind::Note, &payload)?;
            return Err(err);
        }
        if event.kind == EventKind::StartMonitoring {
            let requested = session.requests.iter().any(|r| {
                inner
                    .requests
                    .get(r)
                    .is_some_and(|r| r.priority != RequestPriority::ServiceStart)
            });
            if !requested {
                let payload = json!({"note": "proactive_monitoring", "session_id": session_id});
                self.audit(now, Some(&session.vehicle_id), EntryKind::Note, &payload)?;
            }
        }
        let msg = self.stamp(&mut inner, &session.vehicle_id, command_body(event, GuardOverride::attached()), now);
        self.log_command(&mut inner, &msg, Some(&session), now)?;
        Ok(msg)
    }

    /// Remote-intervention command from a fleet manager outside any session.
    pub fn fm_command(&self, operator_id: &str, vehicle_id: &str, kind: EventKind, now: u64) -> Result<Message, CenterError> {
        if !self.config.model.fm_intervention {
            return Err(CenterError::InterventionDisabled);
        }
        let mut inner = self.inner.lock();
        if !inner.vehicles.contains_key(vehicle_id) {
            return Err(CenterError::UnknownVehicle(vehicle_id.to_string()));
        }
        if !self.config.model.actors_for(&kind).contains(&Role::FleetManager) {
            return Err(CenterError::ActorNotPermitted {
                actor: Role::FleetManager,
                event: kind,
            });
        }
        let event = Event::new(Role::FleetManager, kind);
        let msg = self.stamp(&mut inner, vehicle_id, command_body(event, GuardOverride::default()), now);
        let payload = json!({"note": "fm_intervention", "operator_id": operator_id});
        self.audit(now, Some(vehicle_id), EntryKind::Note, &payload)?;
        self.log_command(&mut inner, &msg, None, now)?;
        Ok(msg)
    }

    /// Decision, classification answer or drive frame from the session's
    /// console, stamped for its vehicle.
    pub fn session_message(&self, session_id: &str, body: MessageBody, now: u64) -> Result<Message, CenterError> {
        match &body {
            MessageBody::ManeuverDecision { .. }
            | MessageBody::ClassificationAnswer { .. }
            | MessageBody::DriveFrame(_)
            | MessageBody::Heartbeat {} => {}
            other => return Err(CenterError::NotSessionFrame(other.type_name())),
        }
        let mut inner = self.inner.lock();
        let vid = Self::open_session(&inner, session_id)?.vehicle_id.clone();
        Ok(self.stamp(&mut inner, &vid, body, now))
    }

    /// First half of a release. Closes the session directly unless the
    /// vehicle must first be told to end monitoring.
    pub fn release(&self, session_id: &str, now: u64) -> Result<ReleaseStep, CenterError> {
        let state = {
            let inner = self.inner.lock();
            let session = Self::open_session(&inner, session_id)?;
            inner.vehicles[&session.vehicle_id].last_state
        };
        match state {
            VehicleState::AlternativeManeuverActive(_) => Err(CenterError::ReleaseRefusedMidManeuver),
            VehicleState::MonitoredAutomatedDriving => self
                .begin_command(session_id, Event::new(Role::RemoteOperator, EventKind::EndMonitoring), now)
                .map(ReleaseStep::EndMonitoring),
            _ => {
                let mut inner = self.inner.lock();
                self.close_session(&mut inner, session_id, "released", now).map(ReleaseStep::Closed)
            }
        }
    }

    /// Second half of a release after the EndMonitoring ack: the session
    /// is normally closed already by the vehicle's report.
    pub fn complete_release(&self, session_id: &str, now: u64) -> Result<OperatorSession, CenterError> {
        let mut inner = self.inner.lock();
        match inner.sessions.get(session_id).cloned() {
            Some(s) if !s.is_open() => Ok(s),
            _ => self.close_session(&mut inner, session_id, "released", now),
        }
    }

    fn close_session(&self, inner: &mut Inner, session_id: &str, reason: &str, now: u64) -> Result<OperatorSession, CenterError> {
        let session = inner
            .sessions
            .get_mut(session_id)
            .filter(|s| s.is_open())
            .ok_or_else(|| CenterError::NoSession(session_id.to_string()))?;
        session.ended_at = Some(now);
        let session = session.clone();
        inner.session_by_vehicle.remove(&session.vehicle_id);
        inner.session_by_operator.remove(&session.operator_id);
        inner.suspended_fm.remove(&session.operator_id);
        self.audit(
            now,
            Some(&session.vehicle_id),
            EntryKind::Session,
            &json!({"action": "released", "session_id": session_id, "reason": reason}),
        )?;
        for r in &session.requests {
            self.set_request_status(inner, r, RequestStatus::Resolved, now)?;
        }
        let state = inner.vehicles.get(&session.vehicle_id).map(|v| v.last_state);
        if state == Some(VehicleState::ActivatedMrc) {
            let origin = session
                .requests
                .iter()
                .filter_map(|r| inner.requests.get(r))
                .min_by_key(|r| r.queue_key())
                .map(|r| r.request_id.clone());
            self.open_request(inner, &session.vehicle_id, Role::Ads, "mrc_unattended", RequestPriority::Mrm, origin, now)?;
        }
        Ok(session)
    }

    /// Ingests one frame from a registered (or registering) vehicle.
    pub fn on_vehicle_message(&self, msg: &Message, now: u64) -> Result<Vec<Notice>, CenterError> {
        if matches!(msg.body, MessageBody::Hello { .. }) {
            return Err(CenterError::UnexpectedFrame("hello"));
        }
        let mut inner = self.inner.lock();
        let vid = msg.vehicle_id.clone();
        if !inner.vehicles.contains_key(&vid) {
            return Err(CenterError::UnknownVehicle(vid));
        }
        inner.links.entry(vid.clone()).or_default().inbound.accept(msg)?;
        self.notify(StreamItem::Vehicle { message: msg.clone() });
        let mut notices = Vec::new();
        {
            let rec = inner.vehicles.get_mut(&vid).expect("checked above");
            rec.last_seen = now;
        }
        match &msg.body {
            MessageBody::Telemetry(t) => {
                inner.vehicles.get_mut(&vid).expect("registered").last_telemetry = Some(t.clone());
            }
            MessageBody::TransitionReport {
                from,
                event,
                ctx,
                next,
                effects,
            } => self.on_transition(&mut inner, &vid, *from, *event, *ctx, *next, effects, now, &mut notices)?,
            MessageBody::InteractionRequest { reason } => {
                let req = self.open_request(&mut inner, &vid, Role::Ads, reason, RequestPriority::Mrm, None, now)?;
                notices.push(Notice::RequestOpened(req));
            }
            MessageBody::MonitoringRequest { origin, reason } => {
                let req = self.open_request(&mut inner, &vid, *origin, reason, RequestPriority::Monitoring, None, now)?;
                notices.push(Notice::RequestOpened(req));
            }
            MessageBody::CommandAck { ref_msg_id, outcome } => {
                let pending = inner.pending.remove(ref_msg_id);
                let payload = json!({
                    "ref_msg_id": ref_msg_id,
                    "outcome": outcome,
                    "session_id": pending.and_then(|p| p.session_id),
                });
                self.audit(now, Some(&vid), EntryKind::Ack, &payload)?;
                notices.push(Notice::Ack {
                    ref_msg_id: *ref_msg_id,
                    outcome: outcome.clone(),
                });
            }
            MessageBody::ManeuverProposal { options } => {
                let rec = inner.vehicles.get_mut(&vid).expect("registered");
                rec.proposal = Some(PendingProposal {
                    proposal_id: msg.msg_id,
                    options: options.clone(),
                });
                rec.query = None;
            }
            MessageBody::ClassificationQuery { object } => {
                inner.vehicles.get_mut(&vid).expect("registered").query = Some(object.clone());
            }
            MessageBody::Transcript { transcript } => {
                self.audit(now, Some(&vid), EntryKind::Transcript, transcript)?;
                let rec = inner.vehicles.get_mut(&vid).expect("registered");
                rec.last_transcript = Some(transcript.clone());
                rec.proposal = None;
                rec.query = None;
            }
            MessageBody::Rejected { ref_msg_id, reason } => {
                let payload = json!({"vehicle_rejected": ref_msg_id, "reason": reason});
                self.audit(now, Some(&vid), EntryKind::Note, &payload)?;
                notices.push(Notice::Rejected {
                    ref_msg_id: *ref_msg_id,
                    reason: reason.clone(),
                });
            }
            MessageBody::Heartbeat {} => {}
            other => return Err(CenterError::UnexpectedFrame(other.type_name())),
        }
        Ok(notices)
    }

    #[allow(clippy::too_many_arguments)]
    fn on_transition(
        &self,
        inner: &mut Inner,
        vid: &str,
        from: VehicleState,
        event: Event,
        ctx: GuardContext,
        next: VehicleState,
        effects: &[Effect],
        now: u64,
        notices: &mut Vec<Notice>,
    ) -> Result<(), CenterError> {
        let record = TransitionRecord {
            vehicle_id: vid.to_string(),
            from,
            event,
            ctx,
            next,
            effects: effects.to_vec(),
            profile: self.config.profile.name.clone(),
            model: self.config.model,
        };
        self.audit(now, Some(vid), EntryKind::Transition, &record)?;
        let rec = inner.vehicles.get_mut(vid).expect("registered");
        // A field-operator prepare reported after the hello lands on the
        // state the hello already announced.
        let catch_up = rec.last_state == next && event.actor == Role::FieldOperator;
        if rec.last_state != from && !catch_up {
            notices.push(Notice::MirrorMismatch {
                vehicle_id: vid.to_string(),
                center: rec.last_state,
                reported: from,
            });
            let payload = json!({"mirror_mismatch": {"center": rec.last_state, "reported": from}});
            self.audit(now, Some(vid), EntryKind::Note, &payload)?;
        }
        let rec = inner.vehicles.get_mut(vid).expect("registered");
        rec.last_state = next;
        if !matches!(next, VehicleState::AlternativeManeuverActive(_)) {
            rec.proposal = None;
            rec.query = None;
        }
        if effects.contains(&Effect::NotifyFleetManager) {
            notices.push(Notice::FleetManagerNotified {
                vehicle_id: vid.to_string(),
            });
        }
        if next == VehicleState::UnmonitoredAutomatedDriving {
            if let Some(sid) = inner.session_by_vehicle.get(vid).cloned() {
                let closed = self.close_session(inner, &sid, "end_monitoring", now)?;
                notices.push(Notice::SessionClosed(closed));
            }
        }
        if from == VehicleState::Initial && next == VehicleState::Prepared && !self.config.auto_registration {
            let waiting = inner
                .requests
                .values()
                .any(|r| r.vehicle_id == vid && r.priority == RequestPriority::ServiceStart && r.status != RequestStatus::Resolved);
            if !waiting && inner.vehicles[vid].registered_at != now {
                let req = self.open_request(inner, vid, Role::Ads, "connection_test", RequestPriority::ServiceStart, None, now)?;
                notices.push(Notice::RequestOpened(req));
            }
        }
        Ok(())
    }

    /// Fleet-manager anomaly sweep. Opens at most one monitoring request per
    /// (vehicle, anomaly) while an earlier one is unresolved, and none for
    /// vehicles that already have an operator.
    pub fn fm_scan(&self, now: u64) -> Result<Vec<FleetRequest>, CenterError> {
        let mut inner = self.inner.lock();
        let mut opened = Vec::new();
        let vids: Vec<String> = inner.vehicles.keys().cloned().collect();
        for vid in vids {
            let flags = {
                let rec = inner.vehicles.get_mut(&vid).expect("listed");
                let mut flags = BTreeSet::new();
                if now.saturating_sub(rec.last_seen) > self.config.telemetry_gap_ms {
                    flags.insert(AnomalyFlag::TelemetryGap);
                }
                rec.link = heartbeat_monitor(rec.last_seen, now, self.config.heartbeat.timeout_ms);
                if rec.link != LinkStatus::Alive {
                    flags.insert(AnomalyFlag::LinkDegraded);
                }
                if rec.last_telemetry.as_ref().is_some_and(|t| t.state != rec.last_state) {
                    flags.insert(AnomalyFlag::StateMismatch);
                }
                rec.anomaly_flags = flags.clone();
                flags
            };
            if inner.session_by_vehicle.contains_key(&vid) {
                continue;
            }
            for flag in flags {
                let duplicate = inner.requests.values().any(|r| {
                    r.vehicle_id == vid && r.reason == flag.as_str() && r.status != RequestStatus::Resolved
                });
                if !duplicate {
                    let req = self.open_request(
                        &mut inner,
                        &vid,
                        Role::FleetManager,
                        flag.as_str(),
                        RequestPriority::Monitoring,
                        None,
                        now,
                    )?;
                    opened.push(req);
                }
            }
        }
        Ok(opened)
    }

    pub fn vehicle(&self, vehicle_id: &str) -> Option<VehicleRecord> {
        self.inner.lock().vehicles.get(vehicle_id).cloned()
    }

    pub fn vehicles(&self) -> Vec<VehicleRecord> {
        self.inner.lock().vehicles.values().cloned().collect()
    }

    pub fn fleet(&self) -> Vec<FleetEntry> {
        let inner = self.inner.lock();
        inner
            .vehicles
            .values()
            .map(|r| FleetEntry {
                vehicle_id: r.vehicle_id.clone(),
                state: r.last_state,
                link: r.link,
                anomaly_flags: r.anomaly_flags.clone(),
                route_position: r.last_telemetry.as_ref().map(|t| t.route_position),
                route_complete: r.last_telemetry.as_ref().is_some_and(|t| t.route_complete),
                session_id: inner.session_by_vehicle.get(&r.vehicle_id).cloned(),
            })
            .collect()
    }

    /// Every request in claim order: priority, then creation time.
    pub fn requests(&self) -> Vec<FleetRequest> {
        let mut all: Vec<_> = self.inner.lock().requests.values().cloned().collect();
        all.sort_by_key(FleetRequest::queue_key);
        all
    }

    pub fn open_requests(&self) -> Vec<FleetRequest> {
        self.requests()
            .into_iter()
            .filter(|r| r.status == RequestStatus::Open)
            .collect()
    }

    pub fn unresolved_requests(&self) -> Vec<FleetRequest> {
        self.requests()
            .into_iter()
            .filter(|r| r.status != RequestStatus::Resolved)
            .collect()
    }

    pub fn session(&self, session_id: &str) -> Option<OperatorSession> {
        self.inner.lock().sessions.get(session_id).cloned()
    }

    pub fn sessions(&self) -> Vec<OperatorSession> {
        self.inner.lock().sessions.values().cloned().collect()
    }

    pub fn open_sessions(&self) -> Vec<OperatorSession> {
        self.inner
            .lock()
            .sessions
            .values()
            .filter(|s| s.is_open())
            .cloned()
            .collect()
    }

    pub fn session_for_vehicle(&self, vehicle_id: &str) -> Option<OperatorSession> {
        let inner = self.inner.lock();
        let sid = inner.session_by_vehicle.get(vehicle_id)?;
        inner.sessions.get(sid).cloned()
    }

    pub fn session_for_operator(&self, operator_id: &str) -> Option<OperatorSession> {
        let inner = self.inner.lock();
        let sid = inner.session_by_operator.get(operator_id)?;
        inner.sessions.get(sid).cloned()
    }

    pub fn fm_duties_suspended(&self, operator_id: &str) -> bool {
        self.inner.lock().suspended_fm.contains(operator_id)
    }

    /// Events the session's operator could issue now, from the mirrored
    /// state and the last reported guard facts.
    pub fn valid_events(&self, session_id: &str) -> Result<Vec<EventOption>, CenterError> {
        let inner = self.inner.lock();
        let session = Self::open_session(&inner, session_id)?;
        let rec = &inner.vehicles[&session.vehicle_id];
        let mut ctx = rec.last_telemetry.as_ref().map(|t| t.guard).unwrap_or_default();
        ctx.operator_attached = true;
        Ok(self
            .config
            .model
            .valid_events(rec.last_state, &ctx, &self.config.profile)
            .into_iter()
            .filter(|o| o.actors.contains(&Role::RemoteOperator))
            .collect())
    }

    /// Session/state coupling at a quiescent point: the states requiring
    /// supervision have a session, unmonitored driving has none.
    pub fn check_session_invariants(&self) -> Result<(), String> {
        let inner = self.inner.lock();
        for (vid, rec) in &inner.vehicles {
            let has = inner.session_by_vehicle.contains_key(vid);
            if rec.last_state.requires_session() && !has {
                return Err(format!("{vid} in {} without a session", rec.last_state));
            }
            if rec.last_state == VehicleState::UnmonitoredAutomatedDriving && has {
                return Err(format!("{vid} unmonitored with an open session"));
            }
        }
        let mut ops = BTreeSet::new();
        let mut veh = BTreeSet::new();
        for s in inner.sessions.values().filter(|s| s.is_open()) {
            if !ops.insert(&s.operator_id) || !veh.insert(&s.vehicle_id) {
                return Err(format!("session {} breaks exclusivity", s.session_id));
            }
        }
        Ok(())
    }
}

fn command_body(event: Event, ctx_override: GuardOverride) -> MessageBody {
    MessageBody::Command { event, ctx_override }
}

/// Delivers frames to a vehicle and returns its replies synchronously.
pub trait VehicleLink {
    fn deliver(&mut self, msg: &Message, now: u64) -> Vec<Message>;
}

impl ControlCenter {
    /// Feeds vehicle frames in order.
    pub fn ingest(&self, msgs: Vec<Message>, now: u64) -> Result<Vec<Notice>, CenterError> {
        let mut notices = Vec::new();
        for msg in msgs {
            notices.extend(self.on_vehicle_message(&msg, now)?);
        }
        Ok(notices)
    }

    /// Sends `msg` and processes the replies.
    pub fn dispatch(&self, link: &mut dyn VehicleLink, msg: &Message, now: u64) -> Result<Vec<Notice>, CenterError> {
        let replies = link.deliver(msg, now);
        self.ingest(replies, now)
    }

    /// Registers a vehicle from its connection frames (hello first).
    pub fn connect(&self, link: &mut dyn VehicleLink, frames: Vec<Message>, now: u64) -> Result<VehicleRecord, CenterError> {
        let mut frames = frames.into_iter();
        let hello = frames.next().ok_or(CenterError::UnexpectedFrame("empty"))?;
        let (_, start) = self.register_vehicle(&hello, now)?;
        self.ingest(frames.collect(), now)?;
        if let Some(start) = start {
            self.dispatch(link, &start, now)?;
        }
        Ok(self.vehicle(&hello.vehicle_id).expect("just registered"))
    }

    /// Full command round trip; returns the vehicle's ack.
    pub fn issue_command(
        &self,
        link: &mut dyn VehicleLink,
        session_id: &str,
        event: Event,
        now: u64,
    ) -> Result<AckOutcome, CenterError> {
        let msg = self.begin_command(session_id, event, now)?;
        self.await_ack(link, &msg, now)
    }

    fn await_ack(&self, link: &mut dyn VehicleLink, msg: &Message, now: u64) -> Result<AckOutcome, CenterError> {
        self.dispatch(link, msg, now)?
            .into_iter()
            .find_map(|n| match n {
                Notice::Ack { ref_msg_id, outcome } if ref_msg_id == msg.msg_id => Some(outcome),
                _ => None,
            })
            .ok_or(CenterError::NoAck(msg.msg_id))
    }

    pub fn fm_intervene(
        &self,
        link: &mut dyn VehicleLink,
        operator_id: &str,
        vehicle_id: &str,
        kind: EventKind,
        now: u64,
    ) -> Result<AckOutcome, CenterError> {
        let msg = self.fm_command(operator_id, vehicle_id, kind, now)?;
        self.await_ack(link, &msg, now)
    }

    /// Release including the EndMonitoring round trip when needed.
    pub fn release_via(&self, link: &mut dyn VehicleLink, session_id: &str, now: u64) -> Result<OperatorSession, CenterError> {
        match self.release(session_id, now)? {
            ReleaseStep::Closed(s) => Ok(s),
            ReleaseStep::EndMonitoring(msg) => {
                self.await_ack(link, &msg, now)?;
                self.complete_release(session_id, now)
            }
        }
    }

    pub fn send_in_session(
        &self,
        link: &mut dyn VehicleLink,
        session_id: &str,
        body: MessageBody,
        now: u64,
    ) -> Result<Vec<Notice>, CenterError> {
        let msg = self.session_message(session_id, body, now)?;
        self.dispatch(link, &msg, now)
    }
}
