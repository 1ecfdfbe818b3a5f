//! Headless end-to-end runs: one control center, simulated vehicles and
//! scripted operators on a shared stepped clock, with invariant monitors.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::agent::VehicleAgent;
use crate::center::{CenterConfig, CenterError, ClaimTarget, ControlCenter, Notice, RequestPriority, VehicleLink};
use crate::eventlog::{first_orphan_ack, replay, EntryKind, EventLog, LogEntry, TransitionRecord};
use crate::fsm::{Event, EventKind, LegalProfile, ManeuverMode, Role, VehicleState};
use crate::maneuver::DriveFrame;
use crate::policy::OperatorPolicy;
use crate::protocol::{AckOutcome, Message, MessageBody};
use crate::scenario::{seconds_to_ms, Scenario, SimClock};

/// Below this link quality drive frames to the vehicle are lost. Commands
/// travel on a reliable channel and always arrive.
pub const DRIVE_FRAME_DROP_QUALITY: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub profile: LegalProfile,
    pub policy: OperatorPolicy,
    pub seed: u64,
    pub operators: usize,
    pub require_resolution: bool,
    pub fm_intervention: bool,
    pub auto_registration: bool,
    pub tick_ms: u64,
    pub fm_scan_period_ms: u64,
    /// Overrides the scenarios' own horizons, seconds.
    pub horizon_s: Option<f64>,
}

impl SimConfig {
    pub fn new(profile: LegalProfile, policy: OperatorPolicy, seed: u64) -> Self {
        Self {
            profile,
            policy,
            seed,
            operators: 2,
            require_resolution: false,
            fm_intervention: false,
            auto_registration: false,
            tick_ms: 100,
            fm_scan_period_ms: 1000,
            horizon_s: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VehicleSummary {
    pub transitions: usize,
    pub mrms_triggered: usize,
    pub mrms_resolved: usize,
    pub maneuvers_started: usize,
    pub maneuvers_succeeded: usize,
    pub final_state: Option<VehicleState>,
    pub unresolved_requests: usize,
    pub route_position: f64,
    pub route_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub profile: String,
    pub policy: String,
    pub seed: u64,
    pub ended_at_ms: u64,
    pub vehicles: BTreeMap<String, VehicleSummary>,
    pub unresolved_requests: usize,
    pub forbidden_refusals: usize,
    pub violations: Vec<String>,
    pub exit_code: i32,
}

impl SimSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

pub struct SimReport {
    pub summary: SimSummary,
    pub entries: Vec<LogEntry>,
    pub final_states: BTreeMap<String, VehicleState>,
}

impl SimReport {
    pub fn exit_code(&self) -> i32 {
        self.summary.exit_code
    }

    pub fn first_violation(&self) -> Option<&str> {
        self.summary.violations.first().map(String::as_str)
    }
}

struct Agents(BTreeMap<String, VehicleAgent>);

impl VehicleLink for Agents {
    fn deliver(&mut self, msg: &Message, now: u64) -> Vec<Message> {
        let Some(agent) = self.0.get_mut(&msg.vehicle_id) else {
            return Vec::new();
        };
        if matches!(msg.body, MessageBody::DriveFrame(_)) && agent.link_quality() < DRIVE_FRAME_DROP_QUALITY {
            return Vec::new();
        }
        agent.handle(msg, now)
    }
}

#[derive(Default)]
struct Episode {
    attempts: u32,
    refused: Vec<ManeuverMode>,
    gave_up: bool,
}

struct Operator {
    id: String,
    session: Option<String>,
    monitored_since: Option<u64>,
}

struct Sim {
    cfg: SimConfig,
    center: ControlCenter,
    agents: Agents,
    clock: SimClock,
    rng: ChaCha8Rng,
    operators: Vec<Operator>,
    claim_due: BTreeMap<String, u64>,
    episodes: BTreeMap<String, Episode>,
    violations: Vec<String>,
}

/// Runs the scenarios to quiescence or their horizon, writing the audit
/// trail into `log`.
pub fn run_sim_with_log(scenarios: &[Scenario], cfg: &SimConfig, log: Arc<EventLog>) -> SimReport {
    let center_cfg = CenterConfig::new(cfg.profile.clone())
        .with_auto_registration(cfg.auto_registration)
        .with_fm_intervention(cfg.fm_intervention);
    let model = center_cfg.model;
    let center = ControlCenter::new(center_cfg, log);
    let agents = scenarios
        .iter()
        .map(|s| (s.vehicle_id.clone(), VehicleAgent::new(s.clone(), model, cfg.profile.clone())))
        .collect();
    let mut sim = Sim {
        cfg: cfg.clone(),
        center,
        agents: Agents(agents),
        clock: SimClock {
            now_ms: 0,
            tick_ms: cfg.tick_ms,
        },
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        operators: (1..=cfg.operators.max(1))
            .map(|i| Operator {
                id: format!("op{i}"),
                session: None,
                monitored_since: None,
            })
            .collect(),
        claim_due: BTreeMap::new(),
        episodes: BTreeMap::new(),
        violations: Vec::new(),
    };
    let horizon = cfg
        .horizon_s
        .unwrap_or_else(|| scenarios.iter().map(|s| s.horizon_s).fold(0.0, f64::max));
    sim.run(seconds_to_ms(horizon));
    sim.finish()
}

pub fn run_sim(scenarios: &[Scenario], cfg: &SimConfig) -> SimReport {
    run_sim_with_log(scenarios, cfg, Arc::new(EventLog::in_memory()))
}

impl Sim {
    fn violate(&mut self, name: &str, detail: impl std::fmt::Display) {
        self.violations.push(format!("{name}: {detail}"));
    }

    fn run(&mut self, horizon_ms: u64) {
        let vids: Vec<String> = self.agents.0.keys().cloned().collect();
        for vid in &vids {
            let agent = self.agents.0.get_mut(vid).expect("listed");
            if let Err(e) = agent.field_operator(EventKind::PrepareVehicle, 0) {
                self.violate("field_operator", e);
                continue;
            }
            let frames = agent.hello(0);
            if let Err(e) = self.center.connect(&mut self.agents, frames, 0) {
                self.violate("registration", e);
            }
        }
        while self.clock.now_ms < horizon_ms {
            self.clock.advance();
            let now = self.clock.now_ms;
            for vid in &vids {
                let msgs = self.agents.0.get_mut(vid).expect("listed").step(&self.clock);
                let result = self.center.ingest(msgs, now);
                self.absorb(result);
            }
            if now.is_multiple_of(self.cfg.fm_scan_period_ms) {
                if let Err(e) = self.center.fm_scan(now) {
                    self.violate("fm_scan", e);
                }
            }
            for i in 0..self.operators.len() {
                self.operate(i, now);
            }
            self.monitor();
            if !self.violations.is_empty() || self.quiescent() {
                break;
            }
        }
    }

    fn absorb(&mut self, result: Result<Vec<Notice>, CenterError>) {
        match result {
            Ok(notices) => {
                for n in notices {
                    if let Notice::MirrorMismatch {
                        vehicle_id,
                        center,
                        reported,
                    } = n
                    {
                        self.violate("mirror_parity", format!("{vehicle_id}: center {center}, vehicle {reported}"));
                    }
                }
            }
            Err(e) => self.violate("center", e),
        }
    }

    fn monitor(&mut self) {
        if let Err(e) = self.center.check_session_invariants() {
            self.violate("session_required", e);
        }
        let mismatches: Vec<String> = self
            .agents
            .0
            .values()
            .filter_map(|a| {
                let center = self.center.vehicle(a.vehicle_id())?.last_state;
                a.check_mirror(center).err().map(|e| e.to_string())
            })
            .collect();
        for m in mismatches {
            self.violate("mirror_parity", m);
        }
    }

    fn quiescent(&self) -> bool {
        self.center.open_sessions().is_empty()
            && self.center.unresolved_requests().is_empty()
            && self.agents.0.values().all(|a| {
                !a.maneuver_in_progress()
                    && (!a.state().is_automated_driving() || (a.route_complete() && !a.has_pending_events()))
            })
    }

    fn operate(&mut self, i: usize, now: u64) {
        if let Some(sid) = self.operators[i].session.clone() {
            if self.center.session(&sid).is_some_and(|s| s.is_open()) {
                self.work_session(i, &sid, now);
                return;
            }
            self.operators[i].session = None;
            self.operators[i].monitored_since = None;
        }
        let policy = self.cfg.policy;
        for req in self.center.open_requests() {
            if !policy.claims_incidents() && req.priority != RequestPriority::ServiceStart {
                continue;
            }
            if self.center.session_for_vehicle(&req.vehicle_id).is_some() {
                continue;
            }
            let due = match self.claim_due.get(&req.request_id) {
                Some(due) => *due,
                None => {
                    let jitter = if policy.claim_jitter_s > 0.0 {
                        self.rng.random_range(0.0..policy.claim_jitter_s)
                    } else {
                        0.0
                    };
                    let due = req.created_at + seconds_to_ms(policy.claim_delay_s + jitter);
                    self.claim_due.insert(req.request_id.clone(), due);
                    due
                }
            };
            if now < due {
                continue;
            }
            let target = ClaimTarget::Request {
                request_id: req.request_id.clone(),
            };
            let op_id = self.operators[i].id.clone();
            match self.center.claim(&op_id, &target, Role::RemoteOperator, now) {
                Ok(s) => {
                    self.operators[i].session = Some(s.session_id.clone());
                    self.work_session(i, &s.session_id, now);
                    return;
                }
                Err(CenterError::VehicleBusy(_) | CenterError::RequestNotOpen(_)) => continue,
                Err(e) => {
                    self.violate("claim", e);
                    return;
                }
            }
        }
    }

    fn command(&mut self, sid: &str, kind: EventKind, now: u64) -> Result<AckOutcome, CenterError> {
        let r = self
            .center
            .issue_command(&mut self.agents, sid, Event::new(Role::RemoteOperator, kind), now);
        if let Err(CenterError::NoAck(_) | CenterError::Storage(_)) = &r {
            self.violate("command_without_ack", r.as_ref().unwrap_err());
        }
        r
    }

    fn release(&mut self, i: usize, sid: &str, now: u64) {
        match self.center.release_via(&mut self.agents, sid, now) {
            Ok(_) => {
                self.operators[i].session = None;
                self.operators[i].monitored_since = None;
            }
            Err(e) => self.violate("release", e),
        }
    }

    fn work_session(&mut self, i: usize, sid: &str, now: u64) {
        let session = self.center.session(sid).expect("open session");
        let vid = session.vehicle_id.clone();
        let Some(record) = self.center.vehicle(&vid) else {
            return;
        };
        let policy = self.cfg.policy;
        let ctx = record.last_telemetry.as_ref().map(|t| t.guard).unwrap_or_default();
        match record.last_state {
            VehicleState::Initial => self.release(i, sid, now),
            VehicleState::Prepared => {
                let _ = self.command(sid, EventKind::StartService, now);
            }
            VehicleState::DeactivatedMrc => {
                if self.episodes.get(&vid).is_some_and(|e| e.gave_up) {
                    self.release(i, sid, now);
                } else {
                    let _ = self.command(sid, EventKind::ActivateAds, now);
                }
            }
            VehicleState::ActivatedMrc => {
                if ctx.trajectory_valid && !ctx.mrc_reason_remaining {
                    let _ = self.command(sid, EventKind::EngageAutomation, now);
                    return;
                }
                if ctx.trajectory_valid || !policy.claims_incidents() {
                    return;
                }
                let ep = self.episodes.entry(vid.clone()).or_default();
                if ep.attempts >= policy.max_attempts {
                    ep.gave_up = true;
                    let _ = self.command(sid, EventKind::DeactivateAds, now);
                    return;
                }
                let offered = self.center.valid_events(sid).unwrap_or_default();
                let Some(mode) = policy.choose_mode(ep.attempts, &offered, &ep.refused) else {
                    return;
                };
                match self.command(sid, EventKind::BeginAlternativeManeuver(mode), now) {
                    Ok(_) => self.episodes.entry(vid).or_default().attempts += 1,
                    Err(CenterError::ForbiddenByProfile { .. }) => {
                        self.episodes.entry(vid).or_default().refused.push(mode)
                    }
                    Err(_) => {}
                }
            }
            VehicleState::AlternativeManeuverActive(ManeuverMode::RemoteDriving) => {
                let frame = MessageBody::DriveFrame(DriveFrame::throttle(1.0));
                let r = self.center.send_in_session(&mut self.agents, sid, frame, now);
                self.absorb(r);
            }
            VehicleState::AlternativeManeuverActive(_) => {
                let body = if record.query.is_some() {
                    let label = self.ground_truth_label(&vid);
                    MessageBody::ClassificationAnswer { label }
                } else if let Some(p) = &record.proposal {
                    MessageBody::ManeuverDecision {
                        proposal_id: p.proposal_id,
                        selected: policy.decide(&p.options),
                    }
                } else {
                    return;
                };
                let r = self.center.send_in_session(&mut self.agents, sid, body, now);
                self.absorb(r);
            }
            VehicleState::MonitoredAutomatedDriving => {
                self.episodes.remove(&vid);
                let since = *self.operators[i].monitored_since.get_or_insert(now);
                if now >= since + seconds_to_ms(policy.monitor_hold_s) {
                    self.release(i, sid, now);
                }
            }
            VehicleState::UnmonitoredAutomatedDriving => {
                let _ = self.command(sid, EventKind::StartMonitoring, now);
            }
        }
    }

    /// The simulated operator sees the object as it is.
    fn ground_truth_label(&self, vid: &str) -> String {
        self.agents
            .0
            .get(vid)
            .and_then(|a| {
                a.scenario().events.iter().find_map(|e| match &e.kind {
                    crate::scenario::ScheduledKind::TrajectoryBlocked { blockage, .. } => {
                        blockage.object.as_ref().and_then(|o| o.drivable_labels.first().cloned())
                    }
                    _ => None,
                })
            })
            .unwrap_or_else(|| "not_drivable".to_string())
    }

    fn finish(mut self) -> SimReport {
        let entries = self.center.log().entries();
        let final_states: BTreeMap<String, VehicleState> =
            self.agents.0.iter().map(|(k, a)| (k.clone(), a.state())).collect();

        match replay(&entries, None) {
            Ok(replayed) => {
                if replayed != final_states {
                    self.violate("replay_mismatch", "replayed states differ from vehicles");
                }
            }
            Err(e) => self.violate("replay_divergence", e),
        }
        if let Some(seq) = first_orphan_ack(&entries) {
            self.violate("ack_without_command", format!("entry {seq}"));
        }
        let transitions: Vec<TransitionRecord> = entries
            .iter()
            .filter(|e| e.kind == EntryKind::Transition)
            .filter_map(|e| serde_json::from_value(e.payload.clone()).ok())
            .collect();
        for t in &transitions {
            let lands = matches!(t.event.kind, EventKind::TriggerMrm | EventKind::ManeuverFailed);
            if lands && t.next != VehicleState::ActivatedMrc {
                self.violate("mrm_lands_in_mrc", format!("{} {} -> {}", t.vehicle_id, t.event, t.next));
            }
            if t.next == VehicleState::AlternativeManeuverActive(ManeuverMode::RemoteDriving)
                && !self.cfg.profile.permits_mode(ManeuverMode::RemoteDriving)
            {
                self.violate("remote_driving_forbidden", &t.vehicle_id);
            }
        }
        let acked: std::collections::BTreeSet<u64> = entries
            .iter()
            .filter(|e| e.kind == EntryKind::Ack)
            .filter_map(|e| e.payload.get("ref_msg_id").and_then(Value::as_u64))
            .collect();
        for e in entries.iter().filter(|e| e.kind == EntryKind::Command) {
            let id = e.payload.get("msg_id").and_then(Value::as_u64);
            if !id.is_some_and(|id| acked.contains(&id)) {
                self.violate("command_without_ack", format!("entry {}", e.entry_seq));
            }
        }
        let unresolved = self.center.unresolved_requests();
        if self.cfg.require_resolution && !unresolved.is_empty() {
            self.violate("unresolved_requests", unresolved.len());
        }

        let mut vehicles: BTreeMap<String, VehicleSummary> = BTreeMap::new();
        for (vid, agent) in &self.agents.0 {
            vehicles.insert(
                vid.clone(),
                VehicleSummary {
                    final_state: Some(agent.state()),
                    route_position: agent.position(),
                    route_complete: agent.route_complete(),
                    unresolved_requests: unresolved.iter().filter(|r| &r.vehicle_id == vid).count(),
                    ..Default::default()
                },
            );
        }
        let mut in_episode: BTreeMap<&str, bool> = BTreeMap::new();
        for t in &transitions {
            let Some(v) = vehicles.get_mut(&t.vehicle_id) else {
                continue;
            };
            v.transitions += 1;
            let ep = in_episode.entry(&t.vehicle_id).or_default();
            match t.event.kind {
                EventKind::TriggerMrm => {
                    v.mrms_triggered += 1;
                    *ep = true;
                }
                EventKind::BeginAlternativeManeuver(_) => v.maneuvers_started += 1,
                EventKind::ManeuverSucceeded => v.maneuvers_succeeded += 1,
                EventKind::DeactivateAds => *ep = false,
                _ => {}
            }
            if *ep && t.next == VehicleState::MonitoredAutomatedDriving {
                v.mrms_resolved += 1;
                *ep = false;
            }
        }
        let forbidden_refusals = entries
            .iter()
            .filter(|e| e.kind == EntryKind::Note)
            .filter(|e| {
                e.payload
                    .get("reason")
                    .and_then(Value::as_str)
                    .is_some_and(|r| r.contains("forbidden by profile"))
            })
            .count();
        let exit_code = i32::from(!self.violations.is_empty());
        SimReport {
            summary: SimSummary {
                profile: self.cfg.profile.name.clone(),
                policy: self.cfg.policy.name.to_string(),
                seed: self.cfg.seed,
                ended_at_ms: self.clock.now_ms,
                vehicles,
                unresolved_requests: unresolved.len(),
                forbidden_refusals,
                violations: self.violations,
                exit_code,
            },
            entries,
            final_states,
        }
    }
}
