//! Simulated vehicle: executes the state diagram locally, drives along its
//! route and runs alternative maneuvers on behalf of a remote operator.

use crate::fsm::{
    Event, EventKind, GuardContext, LegalProfile, ManeuverMode, Role, TransitionError,
    TransitionModel, TransitionResult, VehicleState,
};
use crate::maneuver::{AssistanceSession, DriveSupervisor, FailureReason, ManeuverTranscript, Outcome};
use crate::protocol::{
    heartbeat_monitor, AckOutcome, GuardOverride, HeartbeatConfig, IdSource, InboundSession,
    LinkStatus, Message, MessageBody, Outbox, Telemetry,
};
use crate::scenario::{seconds_to_ms, Scenario, ScheduledKind, SimClock};
use crate::maneuver::BlockageSpec;

/// Period at which a console streams drive frames, seconds.
pub const FRAME_DT_S: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{vehicle_id}: vehicle holds {agent} but center mirrors {center}")]
pub struct DesyncError {
    pub vehicle_id: String,
    pub agent: VehicleState,
    pub center: VehicleState,
}

#[derive(Debug, Clone)]
enum ActiveManeuver {
    Assistance(AssistanceSession),
    Driving {
        supervisor: DriveSupervisor,
        last_frame_at: u64,
    },
}

#[derive(Debug, Clone)]
pub struct VehicleAgent {
    scenario: Scenario,
    model: TransitionModel,
    profile: LegalProfile,
    heartbeat: HeartbeatConfig,
    state: VehicleState,
    position: f64,
    link_quality: f64,
    odd_exit: bool,
    blocked_until: Option<u64>,
    blockage: Option<BlockageSpec>,
    outage_until: Option<u64>,
    mrc_reason_until: Option<u64>,
    fired: Vec<bool>,
    maneuver: Option<ActiveManeuver>,
    ids: IdSource,
    outbox: Outbox,
    inbound: InboundSession,
    last_telemetry_at: Option<u64>,
    route_complete_reported: bool,
    moving: bool,
    connected: bool,
    backlog: Vec<MessageBody>,
}

impl VehicleAgent {
    pub fn new(scenario: Scenario, model: TransitionModel, profile: LegalProfile) -> Self {
        let n = scenario.events.len();
        Self {
            link_quality: scenario.initial_link_quality,
            scenario,
            model,
            profile,
            heartbeat: HeartbeatConfig::default(),
            state: VehicleState::Initial,
            position: 0.0,
            odd_exit: false,
            blocked_until: None,
            blockage: None,
            outage_until: None,
            mrc_reason_until: None,
            fired: vec![false; n],
            maneuver: None,
            ids: IdSource::default(),
            outbox: Outbox::new(),
            inbound: InboundSession::new(),
            last_telemetry_at: None,
            route_complete_reported: false,
            moving: false,
            connected: false,
            backlog: Vec::new(),
        }
    }

    pub fn with_heartbeat(mut self, heartbeat: HeartbeatConfig) -> Self {
        self.heartbeat = heartbeat;
        self
    }

    pub fn vehicle_id(&self) -> &str {
        &self.scenario.vehicle_id
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> VehicleState {
        self.state
    }

    pub fn position(&self) -> f64 {
        self.position
    }

    pub fn link_quality(&self) -> f64 {
        self.link_quality
    }

    /// True while scheduled events remain unfired.
    pub fn has_pending_events(&self) -> bool {
        self.fired.iter().any(|f| !f)
    }

    pub fn route_complete(&self) -> bool {
        self.position >= self.scenario.route_length
    }

    pub fn profile(&self) -> &LegalProfile {
        &self.profile
    }

    pub fn maneuver_in_progress(&self) -> bool {
        self.maneuver.is_some()
    }

    /// Guard facts as the vehicle currently perceives them.
    pub fn guard_context(&self, now: u64) -> GuardContext {
        let computing = !matches!(
            self.state,
            VehicleState::Initial | VehicleState::Prepared | VehicleState::DeactivatedMrc
        );
        GuardContext {
            trajectory_valid: computing && !self.blocked_until.is_some_and(|u| now < u),
            mrc_reason_remaining: self.mrc_reason_until.is_some_and(|u| now < u),
            operator_attached: false,
            link_quality: self.link_quality,
            ads_functions_available: !self.outage_until.is_some_and(|u| now < u),
        }
    }

    pub fn telemetry(&self, now: u64) -> Telemetry {
        let fraction = self.position / self.scenario.route_length;
        Telemetry {
            state: self.state,
            position: self.scenario.route.interpolate(fraction),
            route_position: self.position,
            speed: if self.moving { self.scenario.cruise_speed } else { 0.0 },
            link_quality: self.link_quality,
            guard: self.guard_context(now),
            route_complete: self.route_complete(),
        }
    }

    /// Opens the connection: the hello frame followed by reports of
    /// transitions applied while disconnected.
    pub fn hello(&mut self, now: u64) -> Vec<Message> {
        self.connected = true;
        let body = MessageBody::Hello {
            profile: self.profile.name.clone(),
            state: self.state,
        };
        let mut out = vec![self.emit(body, now)];
        for body in std::mem::take(&mut self.backlog) {
            out.push(self.emit(body, now));
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// On-site action of the field operator. Reports are held back until
    /// the vehicle connects.
    pub fn field_operator(&mut self, kind: EventKind, now: u64) -> Result<Vec<Message>, TransitionError> {
        let from = self.state;
        let event = Event::new(Role::FieldOperator, kind);
        let ctx = self.guard_context(now);
        let r = self.model.apply_event(from, event, &ctx, &self.profile)?;
        self.state = r.next;
        let body = self.report(from, event, ctx, &r);
        if self.connected {
            Ok(vec![self.emit(body, now)])
        } else {
            self.backlog.push(body);
            Ok(Vec::new())
        }
    }

    pub fn heartbeat(&mut self, now: u64) -> Message {
        self.emit(MessageBody::Heartbeat {}, now)
    }

    pub fn check_mirror(&self, center_view: VehicleState) -> Result<(), DesyncError> {
        if center_view == self.state {
            Ok(())
        } else {
            Err(DesyncError {
                vehicle_id: self.scenario.vehicle_id.clone(),
                agent: self.state,
                center: center_view,
            })
        }
    }

    fn emit(&mut self, body: MessageBody, now: u64) -> Message {
        let id = self.ids.next_id();
        self.outbox.stamp(id, &self.scenario.vehicle_id, body, now)
    }

    fn report(&self, from: VehicleState, event: Event, ctx: GuardContext, r: &TransitionResult) -> MessageBody {
        MessageBody::TransitionReport {
            from,
            event,
            ctx,
            next: r.next,
            effects: r.effects.clone(),
        }
    }

    /// Applies a vehicle-originated event against the live context.
    fn apply_local(
        &mut self,
        actor: Role,
        kind: EventKind,
        now: u64,
        out: &mut Vec<Message>,
    ) -> Result<TransitionResult, TransitionError> {
        let from = self.state;
        let event = Event::new(actor, kind);
        let ctx = self.guard_context(now);
        let r = self.model.apply_event(from, event, &ctx, &self.profile)?;
        self.state = r.next;
        let body = self.report(from, event, ctx, &r);
        out.push(self.emit(body, now));
        Ok(r)
    }

    /// Advances one tick: time-triggered events, kinematics,
    /// position-triggered events, maneuver supervision, then telemetry.
    pub fn step(&mut self, clock: &SimClock) -> Vec<Message> {
        let now = clock.now_ms;
        let mut out = Vec::new();
        let entered = self.state;

        for i in 0..self.scenario.events.len() {
            let e = &self.scenario.events[i];
            if !self.fired[i] && e.at.is_some_and(|t| seconds_to_ms(t) <= now) {
                self.fired[i] = true;
                let kind = e.kind.clone();
                self.fire(kind, now, &mut out);
            }
        }

        let ctx = self.guard_context(now);
        self.moving = self.state.is_automated_driving()
            && ctx.trajectory_valid
            && self.position < self.scenario.route_length;
        if self.moving {
            self.position =
                (self.position + self.scenario.cruise_speed * clock.tick_s()).min(self.scenario.route_length);
        }

        for i in 0..self.scenario.events.len() {
            let e = &self.scenario.events[i];
            if !self.fired[i] && e.at_position.is_some_and(|p| self.position >= p) {
                self.fired[i] = true;
                let kind = e.kind.clone();
                self.fire(kind, now, &mut out);
            }
        }

        self.supervise(now, &mut out);

        if self.route_complete()
            && !self.route_complete_reported
            && self.state == VehicleState::UnmonitoredAutomatedDriving
        {
            self.route_complete_reported = true;
            let body = MessageBody::MonitoringRequest {
                origin: Role::Ads,
                reason: "route_complete".into(),
            };
            out.push(self.emit(body, now));
        }

        let period = seconds_to_ms(self.scenario.telemetry_period_s);
        if self.state != entered || self.last_telemetry_at.is_none_or(|t| now >= t + period) {
            self.last_telemetry_at = Some(now);
            let body = MessageBody::Telemetry(self.telemetry(now));
            out.push(self.emit(body, now));
        }
        out
    }

    fn fire(&mut self, kind: ScheduledKind, now: u64, out: &mut Vec<Message>) {
        match kind {
            ScheduledKind::AdsMrm {
                reason,
                reason_persists_s,
            } => {
                if !self.state.is_automated_driving() {
                    return;
                }
                if reason_persists_s > 0.0 {
                    self.mrc_reason_until = Some(now + seconds_to_ms(reason_persists_s));
                }
                if let Ok(r) = self.apply_local(Role::Ads, EventKind::TriggerMrm, now, out) {
                    if r.effects.contains(&crate::fsm::Effect::EmitInteractionRequest) {
                        let body = MessageBody::InteractionRequest { reason };
                        out.push(self.emit(body, now));
                    }
                }
            }
            ScheduledKind::AdsMonitoringRequest { reason } => {
                if self.state == VehicleState::UnmonitoredAutomatedDriving {
                    let body = MessageBody::MonitoringRequest {
                        origin: Role::Ads,
                        reason,
                    };
                    out.push(self.emit(body, now));
                }
            }
            ScheduledKind::OddExit {} => self.odd_exit = true,
            ScheduledKind::LinkQualityChange { value } => self.link_quality = value,
            ScheduledKind::TrajectoryBlocked {
                duration_s,
                blockage,
            } => {
                self.blocked_until = Some(now + seconds_to_ms(duration_s));
                self.blockage = Some(blockage);
            }
            ScheduledKind::AdsFunctionOutage { duration_s } => {
                self.outage_until = Some(now + seconds_to_ms(duration_s));
                if let Some(ActiveManeuver::Assistance(s)) = self.maneuver.as_mut() {
                    if let Ok(outcome) = s.fail(FailureReason::AdsFunctionsLost, now) {
                        self.finish_maneuver(outcome, now, out);
                    }
                }
            }
        }
    }

    fn supervise(&mut self, now: u64, out: &mut Vec<Message>) {
        let timeout_ms = seconds_to_ms(self.scenario.decision_timeout_s);
        let link_timeout = self.heartbeat.timeout_ms;
        let outcome = match self.maneuver.as_mut() {
            Some(ActiveManeuver::Assistance(s)) => s.check_timeout(now, timeout_ms),
            Some(ActiveManeuver::Driving {
                supervisor,
                last_frame_at,
            }) => {
                if heartbeat_monitor(*last_frame_at, now, link_timeout) == LinkStatus::Lost {
                    supervisor.link_lost(now).ok()
                } else {
                    None
                }
            }
            None => None,
        };
        if let Some(outcome) = outcome {
            self.finish_maneuver(outcome, now, out);
        }
    }

    fn finish_maneuver(&mut self, outcome: Outcome, now: u64, out: &mut Vec<Message>) {
        let Some(maneuver) = self.maneuver.take() else {
            return;
        };
        let transcript: ManeuverTranscript = match maneuver {
            ActiveManeuver::Assistance(s) => s.transcript,
            ActiveManeuver::Driving { supervisor, .. } => supervisor.transcript,
        };
        let distance = transcript.distance_m;
        out.push(self.emit(MessageBody::Transcript { transcript }, now));
        let kind = if outcome.is_success() {
            EventKind::ManeuverSucceeded
        } else {
            EventKind::ManeuverFailed
        };
        if self.apply_local(Role::System, kind, now, out).is_ok() && outcome.is_success() {
            self.blocked_until = None;
            self.blockage = None;
            self.odd_exit = false;
            self.position = (self.position + distance).min(self.scenario.route_length);
        }
    }

    /// Processes one inbound frame and returns the replies in send order.
    pub fn handle(&mut self, msg: &Message, now: u64) -> Vec<Message> {
        let entered = self.state;
        let mut out = self.handle_inner(msg, now);
        if self.state != entered {
            self.last_telemetry_at = Some(now);
            let body = MessageBody::Telemetry(self.telemetry(now));
            out.push(self.emit(body, now));
        }
        out
    }

    fn handle_inner(&mut self, msg: &Message, now: u64) -> Vec<Message> {
        let mut out = Vec::new();
        if let Err(e) = self.inbound.accept(msg) {
            let body = MessageBody::Rejected {
                ref_msg_id: msg.msg_id,
                reason: e.to_string(),
            };
            out.push(self.emit(body, now));
            return out;
        }
        let refuse = |reason: String| MessageBody::Rejected {
            ref_msg_id: msg.msg_id,
            reason,
        };
        match &msg.body {
            MessageBody::Command {
                event,
                ctx_override,
            } => self.execute_command(msg.msg_id, *event, ctx_override, now, &mut out),
            MessageBody::DriveFrame(frame) => {
                if let Err(e) = frame.validate() {
                    let body = refuse(e);
                    out.push(self.emit(body, now));
                    return out;
                }
                let result = match self.maneuver.as_mut() {
                    Some(ActiveManeuver::Driving {
                        supervisor,
                        last_frame_at,
                    }) => {
                        let link = heartbeat_monitor(*last_frame_at, now, self.heartbeat.timeout_ms);
                        *last_frame_at = now;
                        supervisor.feed(frame, link, now).map_err(|e| e.to_string())
                    }
                    _ => Err(format!("drive frame refused in state {}", self.state)),
                };
                match result {
                    Ok(Some(outcome)) => self.finish_maneuver(outcome, now, &mut out),
                    Ok(None) => {}
                    Err(reason) => {
                        let body = refuse(reason);
                        out.push(self.emit(body, now));
                    }
                }
            }
            MessageBody::ManeuverDecision {
                proposal_id,
                selected,
            } => {
                let result = match self.maneuver.as_mut() {
                    Some(ActiveManeuver::Assistance(s)) => {
                        s.decide(*proposal_id, *selected, now).map_err(|e| e.to_string())
                    }
                    _ => Err("no assistance maneuver in progress".to_string()),
                };
                match result {
                    Ok(outcome) => self.finish_maneuver(outcome, now, &mut out),
                    Err(reason) => {
                        let body = refuse(reason);
                        out.push(self.emit(body, now));
                    }
                }
            }
            MessageBody::ClassificationAnswer { label } => {
                let result = match self.maneuver.as_mut() {
                    Some(ActiveManeuver::Assistance(s)) => {
                        s.classify_object(label).map_err(|e| e.to_string())
                    }
                    _ => Err("no assistance maneuver in progress".to_string()),
                };
                match result {
                    Ok(_) => self.publish_proposal(now, &mut out),
                    Err(reason) => {
                        let body = refuse(reason);
                        out.push(self.emit(body, now));
                    }
                }
            }
            MessageBody::Heartbeat {} => {}
            other => {
                let body = refuse(format!("unexpected {} frame", other.type_name()));
                out.push(self.emit(body, now));
            }
        }
        out
    }

    fn execute_command(
        &mut self,
        msg_id: u64,
        event: Event,
        ctx_override: &GuardOverride,
        now: u64,
        out: &mut Vec<Message>,
    ) {
        let from = self.state;
        let ctx = ctx_override.apply(&self.guard_context(now));
        let result = self.model.apply_event(from, event, &ctx, &self.profile);
        if let Ok(r) = &result {
            self.state = r.next;
            let body = self.report(from, event, ctx, r);
            out.push(self.emit(body, now));
        }
        let next = result.as_ref().ok().map(|r| r.next);
        let body = MessageBody::CommandAck {
            ref_msg_id: msg_id,
            outcome: AckOutcome::from(result),
        };
        out.push(self.emit(body, now));
        if let Some(VehicleState::AlternativeManeuverActive(mode)) = next {
            self.start_maneuver(mode, now, out);
        }
    }

    fn start_maneuver(&mut self, mode: ManeuverMode, now: u64, out: &mut Vec<Message>) {
        let vid = self.scenario.vehicle_id.clone();
        match mode {
            ManeuverMode::RemoteAssistance(kind) => {
                let blockage = self.blockage.clone().unwrap_or_default();
                let session = AssistanceSession::start(&vid, kind, blockage, self.odd_exit, now);
                let query = session.pending_query().map(str::to_string);
                self.maneuver = Some(ActiveManeuver::Assistance(session));
                match query {
                    Some(object) => {
                        out.push(self.emit(MessageBody::ClassificationQuery { object }, now));
                    }
                    None => self.publish_proposal(now, out),
                }
            }
            ManeuverMode::RemoteDriving => {
                let transcript = ManeuverTranscript::new(vid, mode, now);
                let supervisor = DriveSupervisor::new(
                    transcript,
                    self.scenario.drive_v_max,
                    FRAME_DT_S,
                    self.scenario.clearance_distance,
                );
                self.maneuver = Some(ActiveManeuver::Driving {
                    supervisor,
                    last_frame_at: now,
                });
            }
        }
    }

    /// Sends a fresh option list; its msg_id doubles as the proposal id.
    fn publish_proposal(&mut self, now: u64, out: &mut Vec<Message>) {
        let id = self.ids.next_id();
        let result = match self.maneuver.as_mut() {
            Some(ActiveManeuver::Assistance(s)) => s.propose(id, now),
            _ => return,
        };
        match result {
            Ok(options) => {
                let body = MessageBody::ManeuverProposal { options };
                out.push(self.outbox.stamp(id, &self.scenario.vehicle_id, body, now));
            }
            Err(outcome) => self.finish_maneuver(outcome, now, out),
        }
    }
}
