//! Exit-gate checks. Runs every criterion, prints one line each and fails
//! the target when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use teleop_core::agent::VehicleAgent;
use teleop_core::center::{CenterConfig, CenterError, ClaimTarget, ControlCenter, ReleaseStep, RequestPriority, VehicleLink};
use teleop_core::eventlog::{normalize_timestamps, render_log, replay, EntryKind, EventLog, LogEntry, TransitionRecord};
use teleop_core::fsm::{
    AssistanceKind, Effect, Event, EventKind, EventTag, GuardContext, LegalProfile, ManeuverMode, Role, StateTag,
    TransitionError, TransitionModel, TransitionResult, VehicleState,
};
use teleop_core::maneuver::{BlockageSpec, Decision, DriveFrame, ObjectSpec, OptionSpec};
use teleop_core::policy::{OperatorPolicy, PolicyName};
use teleop_core::protocol::{decode, encode, AckOutcome, GuardOverride, InboundSession, Message, MessageBody, SessionError};
use teleop_core::scenario::{Scenario, ScheduledEvent, ScheduledKind, SimClock};
use teleop_core::sim::{run_sim, SimConfig};

const RA_CLEARANCE: ManeuverMode = ManeuverMode::RemoteAssistance(AssistanceKind::ManeuverClearance);

struct Link(VehicleAgent);

impl VehicleLink for Link {
    fn deliver(&mut self, msg: &Message, now: u64) -> Vec<Message> {
        self.0.handle(msg, now)
    }
}

fn within(limit: Duration, started: Instant) {
    let took = started.elapsed();
    assert!(took < limit, "took {took:?}, limit {limit:?}");
}

// ---------------------------------------------------------------------------
// Transition table

/// The diagram, written out by hand: (from, event) pairs that have a row,
/// independent of the model's own table.
fn diagram_pairs() -> BTreeSet<(StateTag, EventTag)> {
    use EventTag as E;
    use StateTag as S;
    [
        (S::Initial, E::PrepareVehicle),
        (S::Prepared, E::StartService),
        (S::DeactivatedMrc, E::ActivateAds),
        (S::ActivatedMrc, E::EngageAutomation),
        (S::MonitoredAutomatedDriving, E::EndMonitoring),
        (S::UnmonitoredAutomatedDriving, E::StartMonitoring),
        (S::MonitoredAutomatedDriving, E::TriggerMrm),
        (S::UnmonitoredAutomatedDriving, E::TriggerMrm),
        (S::ActivatedMrc, E::BeginAlternativeManeuver),
        (S::AlternativeManeuverActive, E::ManeuverSucceeded),
        (S::AlternativeManeuverActive, E::ManeuverFailed),
        (S::ActivatedMrc, E::DeactivateAds),
        (S::DeactivatedMrc, E::EndService),
        (S::DeactivatedMrc, E::EndDrivingOperation),
    ]
    .into_iter()
    .collect()
}

fn representative(tag: StateTag) -> VehicleState {
    VehicleState::all().into_iter().find(|s| s.tag() == tag).expect("state tag has a state")
}

fn kinds_of(tag: EventTag) -> Vec<EventKind> {
    EventKind::all().into_iter().filter(|k| k.tag() == tag).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Permitted,
    Forbidden,
    Invalid,
}

fn classify(model: &TransitionModel, state: VehicleState, kind: EventKind, profile: &LegalProfile) -> Class {
    let open = GuardContext {
        operator_attached: true,
        ..GuardContext::default()
    };
    let mut forbidden = false;
    for actor in Role::ALL {
        match model.apply_event(state, Event::new(actor, kind), &open, profile) {
            Ok(_) => return Class::Permitted,
            Err(TransitionError::ForbiddenByProfile { .. }) => forbidden = true,
            Err(_) => {}
        }
    }
    if forbidden {
        Class::Forbidden
    } else {
        Class::Invalid
    }
}

fn table_completeness() {
    let started = Instant::now();
    let model = TransitionModel::default();
    let generic = LegalProfile::generic();
    let german = LegalProfile::german();
    let pairs = diagram_pairs();
    let mut classified = 0;
    for state in StateTag::ALL {
        for tag in EventTag::ALL {
            for kind in kinds_of(tag) {
                let g = classify(&model, representative(state), kind, &generic);
                let d = classify(&model, representative(state), kind, &german);
                let expected = if pairs.contains(&(state, tag)) { Class::Permitted } else { Class::Invalid };
                assert_eq!(g, expected, "generic {state:?} {kind:?}");
                let rd = kind == EventKind::BeginAlternativeManeuver(ManeuverMode::RemoteDriving);
                let expected = if rd && expected == Class::Permitted { Class::Forbidden } else { expected };
                assert_eq!(d, expected, "german {state:?} {kind:?}");
                classified += 1;
            }
        }
    }
    assert_eq!(classified, 7 * (EventTag::ALL.len() - 1 + ManeuverMode::ALL.len()));

    let diff = model.profile_diff(&generic, &german);
    assert!(diff.added.is_empty());
    assert_eq!(diff.removed.len(), 1);
    let removed = diff.removed[0];
    assert_eq!(
        (removed.from, removed.event, removed.mode),
        (
            StateTag::ActivatedMrc,
            EventTag::BeginAlternativeManeuver,
            Some(ManeuverMode::RemoteDriving.class())
        )
    );

    let generic_rows = model.permitted_rows(&generic).len();
    let german_rows = model.permitted_rows(&german).len();
    assert_eq!(generic_rows, german_rows + 1);
    assert_eq!(
        (generic_rows, german_rows),
        (14, 13),
        "permitted row counts (generic, german)"
    );
    within(Duration::from_secs(1), started);
}

// ---------------------------------------------------------------------------
// Walkthrough

fn blocked_then_mrm(vehicle_id: &str, at: f64) -> Scenario {
    Scenario::new(vehicle_id, 1_000.0, 10.0)
        .with_event(ScheduledEvent::at(
            at,
            ScheduledKind::TrajectoryBlocked {
                duration_s: 10_000.0,
                blockage: BlockageSpec {
                    options: vec![OptionSpec {
                        descriptor: "pass_left".into(),
                        viable: true,
                        ..Default::default()
                    }],
                    object: None,
                },
            },
        ))
        .with_event(ScheduledEvent::at(
            at,
            ScheduledKind::AdsMrm {
                reason: "blocked_lane".into(),
                reason_persists_s: 0.0,
            },
        ))
}

fn acked(outcome: AckOutcome, what: &str) -> TransitionResult {
    match outcome {
        AckOutcome::Ok(r) => r,
        AckOutcome::Error(e) => panic!("{what}: {e}"),
    }
}

fn only_request(center: &ControlCenter, priority: RequestPriority) -> String {
    let open: Vec<_> = center.open_requests().into_iter().filter(|r| r.priority == priority).collect();
    assert_eq!(open.len(), 1, "{open:?}");
    open[0].request_id.clone()
}

/// Runs the vehicle on its own until `until` returns true for one of its
/// frames, feeding everything to the center.
fn run_until(center: &ControlCenter, link: &mut Link, clock: &mut SimClock, limit_ms: u64, mut until: impl FnMut(&Message) -> bool) {
    while clock.now_ms < limit_ms {
        clock.advance();
        let msgs = link.0.step(clock);
        let hit = msgs.iter().any(&mut until);
        center.ingest(msgs, clock.now_ms).expect("center accepts vehicle frames");
        if hit {
            return;
        }
    }
    panic!("condition not reached by {limit_ms} ms");
}

fn assist_to_success(center: &ControlCenter, link: &mut Link, sid: &str, now: u64) {
    let r = acked(
        center
            .issue_command(link, sid, Event::new(Role::RemoteOperator, EventKind::BeginAlternativeManeuver(RA_CLEARANCE)), now)
            .unwrap(),
        "begin assistance",
    );
    assert_eq!(r.next, VehicleState::AlternativeManeuverActive(RA_CLEARANCE));
    let proposal = center.vehicle(link.0.vehicle_id()).and_then(|v| v.proposal).expect("proposal published");
    let option = proposal.options.iter().find(|o| o.viable).expect("viable option");
    let decision = MessageBody::ManeuverDecision {
        proposal_id: proposal.proposal_id,
        selected: Decision::Select {
            option_id: option.option_id,
            confirm_odd_exit: option.requires_odd_exit,
        },
    };
    center.send_in_session(link, sid, decision, now).unwrap();
    assert_eq!(link.0.state(), VehicleState::MonitoredAutomatedDriving);
}

fn walkthrough() {
    use EventKind::*;
    let started = Instant::now();
    let log = Arc::new(EventLog::in_memory());
    let center = ControlCenter::new(CenterConfig::new(LegalProfile::generic()), log.clone());
    let mut link = Link(VehicleAgent::new(
        blocked_then_mrm("v1", 5.0),
        TransitionModel::default(),
        LegalProfile::generic(),
    ));
    let ro = |k| Event::new(Role::RemoteOperator, k);
    let mut clock = SimClock::default();

    link.0.field_operator(PrepareVehicle, 0).unwrap();
    let frames = link.0.hello(0);
    center.connect(&mut link, frames, 0).unwrap();
    let r1 = only_request(&center, RequestPriority::ServiceStart);
    let sid = center.claim("op1", &ClaimTarget::Request { request_id: r1 }, Role::RemoteOperator, 0).unwrap().session_id;
    for (kind, next) in [
        (StartService, VehicleState::DeactivatedMrc),
        (ActivateAds, VehicleState::ActivatedMrc),
        (EngageAutomation, VehicleState::MonitoredAutomatedDriving),
    ] {
        assert_eq!(acked(center.issue_command(&mut link, &sid, ro(kind), 0).unwrap(), "setup").next, next);
    }
    center.release_via(&mut link, &sid, 0).unwrap();
    assert_eq!(link.0.state(), VehicleState::UnmonitoredAutomatedDriving);

    let mut emitted = false;
    run_until(&center, &mut link, &mut clock, 10_000, |m| {
        emitted |= matches!(m.body, MessageBody::InteractionRequest { .. });
        emitted
    });
    assert_eq!(link.0.state(), VehicleState::ActivatedMrc);
    let mrm = only_request(&center, RequestPriority::Mrm);
    let now = clock.now_ms;
    let sid = center.claim("op2", &ClaimTarget::Request { request_id: mrm }, Role::RemoteOperator, now).unwrap().session_id;
    assist_to_success(&center, &mut link, &sid, now);
    center.release_via(&mut link, &sid, now).unwrap();
    assert_eq!(link.0.state(), VehicleState::UnmonitoredAutomatedDriving);

    for _ in 0..10 {
        clock.advance();
        let msgs = link.0.step(&clock);
        center.ingest(msgs, clock.now_ms).unwrap();
    }
    let now = clock.now_ms;
    let target = ClaimTarget::Vehicle {
        vehicle_id: "v1".into(),
    };
    let sid = center.claim("op1", &target, Role::RemoteOperator, now).unwrap().session_id;
    for (kind, next) in [
        (StartMonitoring, VehicleState::MonitoredAutomatedDriving),
        (TriggerMrm, VehicleState::ActivatedMrc),
        (DeactivateAds, VehicleState::DeactivatedMrc),
    ] {
        assert_eq!(acked(center.issue_command(&mut link, &sid, ro(kind), now).unwrap(), "shutdown").next, next);
    }
    let end = acked(center.issue_command(&mut link, &sid, ro(EndService), now).unwrap(), "end of service");
    assert_eq!(end.next, VehicleState::DeactivatedMrc);
    assert_eq!(end.effects, vec![Effect::NotifyFleetManager]);
    assert!(matches!(center.release(&sid, now).unwrap(), ReleaseStep::Closed(_)));
    let report = link.0.field_operator(EndDrivingOperation, now).unwrap();
    center.ingest(report, now).unwrap();
    assert_eq!(link.0.state(), VehicleState::Initial);

    let entries = log.entries();
    let transitions: Vec<TransitionRecord> = entries
        .iter()
        .filter(|e| e.kind == EntryKind::Transition)
        .map(|e| serde_json::from_value(e.payload.clone()).unwrap())
        .collect();
    let path: Vec<(EventKind, VehicleState)> = transitions.iter().map(|t| (t.event.kind, t.next)).collect();
    assert_eq!(
        path,
        vec![
            (PrepareVehicle, VehicleState::Prepared),
            (StartService, VehicleState::DeactivatedMrc),
            (ActivateAds, VehicleState::ActivatedMrc),
            (EngageAutomation, VehicleState::MonitoredAutomatedDriving),
            (EndMonitoring, VehicleState::UnmonitoredAutomatedDriving),
            (TriggerMrm, VehicleState::ActivatedMrc),
            (BeginAlternativeManeuver(RA_CLEARANCE), VehicleState::AlternativeManeuverActive(RA_CLEARANCE)),
            (ManeuverSucceeded, VehicleState::MonitoredAutomatedDriving),
            (EndMonitoring, VehicleState::UnmonitoredAutomatedDriving),
            (StartMonitoring, VehicleState::MonitoredAutomatedDriving),
            (TriggerMrm, VehicleState::ActivatedMrc),
            (DeactivateAds, VehicleState::DeactivatedMrc),
            (EndService, VehicleState::DeactivatedMrc),
            (EndDrivingOperation, VehicleState::Initial),
        ]
    );
    let ads_mrm = &transitions[5];
    assert_eq!(ads_mrm.event.actor, Role::Ads);
    assert!(ads_mrm.effects.contains(&Effect::EmitInteractionRequest));
    let states = replay(&entries, None).expect("replay without divergence");
    assert_eq!(states.get("v1"), Some(&VehicleState::Initial));
    center.check_session_invariants().unwrap();
    assert!(center.unresolved_requests().is_empty());
    within(Duration::from_secs(5), started);
}

// ---------------------------------------------------------------------------
// Profile differential

/// Same scenario, same scripted operator. The operator tries remote
/// driving first, gives up on it and then clears a bypass.
fn scripted_run(profile: LegalProfile) -> Vec<LogEntry> {
    use EventKind::*;
    let log = Arc::new(EventLog::in_memory());
    let center = ControlCenter::new(CenterConfig::new(profile.clone()), log.clone());
    let mut link = Link(VehicleAgent::new(blocked_then_mrm("v1", 5.0), TransitionModel::default(), profile.clone()));
    let ro = |k| Event::new(Role::RemoteOperator, k);
    let mut clock = SimClock::default();
    link.0.field_operator(PrepareVehicle, 0).unwrap();
    let frames = link.0.hello(0);
    center.connect(&mut link, frames, 0).unwrap();
    let r1 = only_request(&center, RequestPriority::ServiceStart);
    let sid = center.claim("op1", &ClaimTarget::Request { request_id: r1 }, Role::RemoteOperator, 0).unwrap().session_id;
    for kind in [StartService, ActivateAds, EngageAutomation] {
        acked(center.issue_command(&mut link, &sid, ro(kind), 0).unwrap(), "setup");
    }
    center.release_via(&mut link, &sid, 0).unwrap();
    run_until(&center, &mut link, &mut clock, 10_000, |m| matches!(m.body, MessageBody::InteractionRequest { .. }));
    let now = clock.now_ms;
    let mrm = only_request(&center, RequestPriority::Mrm);
    let sid = center.claim("op1", &ClaimTarget::Request { request_id: mrm }, Role::RemoteOperator, now).unwrap().session_id;

    match center.issue_command(&mut link, &sid, ro(BeginAlternativeManeuver(ManeuverMode::RemoteDriving)), now) {
        Ok(outcome) => {
            acked(outcome, "remote driving");
            center.send_in_session(&mut link, &sid, MessageBody::DriveFrame(DriveFrame::abort()), now).unwrap();
            assert_eq!(link.0.state(), VehicleState::ActivatedMrc);
        }
        Err(CenterError::ForbiddenByProfile { .. }) => assert!(!profile.permits_mode(ManeuverMode::RemoteDriving)),
        Err(e) => panic!("remote driving attempt: {e}"),
    }
    assist_to_success(&center, &mut link, &sid, now);
    center.release_via(&mut link, &sid, now).unwrap();
    let until = clock.now_ms + 30_000;
    while clock.now_ms < until {
        clock.advance();
        let msgs = link.0.step(&clock);
        center.ingest(msgs, clock.now_ms).unwrap();
    }
    log.entries()
}

fn mentions_remote_driving(v: &Value) -> bool {
    v.to_string().contains("remote_driving")
}

fn is_refusal(e: &LogEntry) -> bool {
    e.kind == EntryKind::Note && e.payload.get("refused_command").is_some()
        || e.kind == EntryKind::Note && e.payload.get("action").and_then(Value::as_str) == Some("refused_command")
}

/// Drops every entry belonging to a remote-driving attempt: from its
/// command through the transition that ends it, plus refusals.
fn without_remote_driving(entries: &[LogEntry]) -> (Vec<LogEntry>, usize) {
    let mut kept = Vec::new();
    let mut dropped = 0;
    let mut in_attempt = false;
    for e in entries {
        let rd = mentions_remote_driving(&e.payload);
        if e.kind == EntryKind::Command && rd {
            in_attempt = true;
        }
        let ends = e.kind == EntryKind::Transition
            && e.payload["from"] == serde_json::json!({ "alternative_maneuver_active": "remote_driving" });
        if in_attempt || rd || is_refusal(e) {
            dropped += 1;
            if ends {
                in_attempt = false;
            }
            continue;
        }
        kept.push(e.clone());
    }
    (kept, dropped)
}

fn strip_volatile(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for key in ["msg_id", "ref_msg_id", "proposal_id", "seq", "profile"] {
                map.remove(key);
            }
            map.values_mut().for_each(strip_volatile);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

fn projection(entries: &[LogEntry]) -> Vec<(u64, Option<String>, EntryKind, Value)> {
    entries
        .iter()
        .map(|e| {
            let mut p = e.payload.clone();
            strip_volatile(&mut p);
            (e.at, e.vehicle_id.clone(), e.kind, p)
        })
        .collect()
}

fn german_differential() {
    let generic = scripted_run(LegalProfile::generic());
    let german = scripted_run(LegalProfile::german());
    assert!(replay(&generic, None).is_ok() && replay(&german, None).is_ok());
    let (g, g_dropped) = without_remote_driving(&generic);
    let (d, d_dropped) = without_remote_driving(&german);
    assert!(g_dropped > 0, "generic run made no remote-driving attempt");
    assert!(d_dropped > 0, "german run logged no refusal");
    assert!(german.iter().filter(|e| e.kind == EntryKind::Transition).all(|e| !mentions_remote_driving(&e.payload)));
    let (pg, pd) = (projection(&g), projection(&d));
    let succeeded = |p: &[(u64, Option<String>, EntryKind, Value)]| {
        p.iter().filter(|(_, _, k, v)| *k == EntryKind::Transition && v["event"]["kind"] == "maneuver_succeeded").count()
    };
    assert_eq!((succeeded(&pg), succeeded(&pd)), (1, 1));
    if let Some(i) = (0..pg.len().max(pd.len())).find(|&i| pg.get(i) != pd.get(i)) {
        panic!("logs differ outside remote driving at {i}:\n generic {:?}\n german  {:?}", pg.get(i), pd.get(i));
    }
}

// ---------------------------------------------------------------------------
// Session exclusivity

fn session_exclusivity() {
    const OPERATORS: usize = 8;
    const VEHICLES: usize = 4;
    const ITERATIONS: usize = 1000;
    let log = Arc::new(EventLog::in_memory());
    let center = Arc::new(ControlCenter::new(CenterConfig::new(LegalProfile::generic()), log.clone()));
    for i in 0..VEHICLES {
        let mut agent = VehicleAgent::new(
            Scenario::new(format!("v{i}"), 100.0, 10.0),
            TransitionModel::default(),
            LegalProfile::generic(),
        );
        agent.field_operator(EventKind::PrepareVehicle, 0).unwrap();
        let mut link = Link(agent);
        let frames = link.0.hello(0);
        center.connect(&mut link, frames, 0).unwrap();
    }
    let holders: Arc<Vec<AtomicUsize>> = Arc::new((0..VEHICLES).map(|_| AtomicUsize::new(0)).collect());
    let wins = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for op in 0..OPERATORS {
            let center = center.clone();
            let holders = holders.clone();
            let wins = &wins;
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(op as u64);
                let operator = format!("op{op}");
                for _ in 0..ITERATIONS {
                    let v = rng.random_range(0..VEHICLES);
                    let target = ClaimTarget::Vehicle {
                        vehicle_id: format!("v{v}"),
                    };
                    match center.claim(&operator, &target, Role::RemoteOperator, 0) {
                        Ok(session) => {
                            assert_eq!(holders[v].fetch_add(1, Ordering::SeqCst), 0, "two holders on v{v}");
                            assert_eq!(center.session_for_vehicle(&session.vehicle_id).map(|s| s.session_id), Some(session.session_id.clone()));
                            assert_eq!(center.session_for_operator(&operator).map(|s| s.vehicle_id), Some(format!("v{v}")));
                            std::thread::yield_now();
                            holders[v].fetch_sub(1, Ordering::SeqCst);
                            assert!(matches!(center.release(&session.session_id, 0).unwrap(), ReleaseStep::Closed(_)));
                            wins.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(CenterError::VehicleBusy(_)) => {}
                        Err(e) => panic!("{operator}: {e}"),
                    }
                }
            });
        }
    });
    assert!(center.open_sessions().is_empty());

    // Audit: replay claims and releases in log order.
    let mut by_vehicle: BTreeMap<String, String> = BTreeMap::new();
    let mut by_operator: BTreeMap<String, String> = BTreeMap::new();
    let mut owner: BTreeMap<String, (String, String)> = BTreeMap::new();
    let (mut claims, mut releases) = (0, 0);
    for e in log.entries().iter().filter(|e| e.kind == EntryKind::Session) {
        match e.payload["action"].as_str() {
            Some("claimed") => {
                let s = &e.payload["session"];
                let (sid, vid, op) = (
                    s["session_id"].as_str().unwrap().to_string(),
                    s["vehicle_id"].as_str().unwrap().to_string(),
                    s["operator_id"].as_str().unwrap().to_string(),
                );
                assert!(by_vehicle.insert(vid.clone(), sid.clone()).is_none(), "audit: {vid} claimed twice at {}", e.entry_seq);
                assert!(by_operator.insert(op.clone(), sid.clone()).is_none(), "audit: {op} holds two sessions");
                owner.insert(sid, (vid, op));
                claims += 1;
            }
            Some("released") => {
                let sid = e.payload["session_id"].as_str().unwrap();
                let (vid, op) = owner.remove(sid).expect("release of an unknown session");
                assert_eq!(by_vehicle.remove(&vid).as_deref(), Some(sid));
                assert_eq!(by_operator.remove(&op).as_deref(), Some(sid));
                releases += 1;
            }
            _ => {}
        }
    }
    let wins = wins.load(Ordering::Relaxed);
    assert!(wins > 0);
    assert_eq!((claims, releases), (wins, wins));
    assert!(by_vehicle.is_empty() && by_operator.is_empty());
}

// ---------------------------------------------------------------------------
// Randomized failure paths

fn random_scenario(rng: &mut ChaCha8Rng, vehicle_id: String) -> Scenario {
    let route = rng.random_range(150.0..600.0);
    let mut s = Scenario::new(vehicle_id, route, rng.random_range(5.0..15.0));
    s.initial_link_quality = rng.random_range(0.2..1.0);
    s.decision_timeout_s = rng.random_range(2.0..30.0);
    s.horizon_s = 150.0;
    let mrm_at = rng.random_range(2.0..30.0);
    if rng.random_bool(0.7) {
        let options = (0..rng.random_range(0..3))
            .map(|i| OptionSpec {
                descriptor: format!("bypass_{i}"),
                viable: rng.random_bool(0.5),
                requires_odd_exit: rng.random_bool(0.2),
                needs_drivable_object: rng.random_bool(0.3),
            })
            .collect();
        let object = rng.random_bool(0.5).then(|| ObjectSpec {
            observed_as: "debris".into(),
            drivable_labels: if rng.random_bool(0.5) { vec!["drivable".into()] } else { Vec::new() },
        });
        s = s.with_event(ScheduledEvent::at(
            mrm_at,
            ScheduledKind::TrajectoryBlocked {
                duration_s: rng.random_range(1.0..200.0),
                blockage: BlockageSpec { options, object },
            },
        ));
    }
    s = s.with_event(ScheduledEvent::at(
        mrm_at,
        ScheduledKind::AdsMrm {
            reason: "random_fault".into(),
            reason_persists_s: if rng.random_bool(0.3) { rng.random_range(0.0..15.0) } else { 0.0 },
        },
    ));
    for _ in 0..rng.random_range(0..4) {
        let at = rng.random_range(1.0..60.0);
        let kind = match rng.random_range(0..5) {
            0 => ScheduledKind::LinkQualityChange {
                value: rng.random_range(0.0..1.0),
            },
            1 => ScheduledKind::AdsFunctionOutage {
                duration_s: rng.random_range(1.0..20.0),
            },
            2 => ScheduledKind::OddExit {},
            3 => ScheduledKind::AdsMonitoringRequest {
                reason: "random_check".into(),
            },
            _ => ScheduledKind::AdsMrm {
                reason: "second_fault".into(),
                reason_persists_s: 0.0,
            },
        };
        s = s.with_event(ScheduledEvent::at(at, kind));
    }
    s
}

fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> SimConfig {
    let profile = if rng.random_bool(0.5) { LegalProfile::generic() } else { LegalProfile::german() };
    let name = if rng.random_bool(0.7) { PolicyName::AutoResolve } else { PolicyName::AssistOnly };
    let mode = ManeuverMode::ALL[rng.random_range(0..ManeuverMode::ALL.len())];
    let policy = OperatorPolicy::new(name).prefer(mode).with_fallback(rng.random_bool(0.6));
    let mut cfg = SimConfig::new(profile, policy, seed);
    cfg.operators = rng.random_range(1..4);
    cfg
}

/// Log-side check independent of the simulator's monitors.
fn check_log(entries: &[LogEntry]) -> Result<(usize, usize), String> {
    let mut open: BTreeMap<String, String> = BTreeMap::new();
    let (mut failed, mut mrms) = (0, 0);
    for e in entries {
        match e.kind {
            EntryKind::Session => match e.payload["action"].as_str() {
                Some("claimed") => {
                    let s = &e.payload["session"];
                    open.insert(s["vehicle_id"].as_str().unwrap().into(), s["session_id"].as_str().unwrap().into());
                }
                Some("released") => {
                    open.retain(|_, sid| sid != e.payload["session_id"].as_str().unwrap());
                }
                _ => {}
            },
            EntryKind::Transition => {
                let t: TransitionRecord = serde_json::from_value(e.payload.clone()).map_err(|e| e.to_string())?;
                let lands_in_mrc = t.next == VehicleState::ActivatedMrc;
                match t.event.kind {
                    EventKind::ManeuverFailed if !lands_in_mrc => return Err(format!("entry {}: failed maneuver -> {}", e.entry_seq, t.next)),
                    EventKind::TriggerMrm if !lands_in_mrc => return Err(format!("entry {}: mrm -> {}", e.entry_seq, t.next)),
                    EventKind::ManeuverFailed => failed += 1,
                    EventKind::TriggerMrm => mrms += 1,
                    _ => {}
                }
                let supervised = matches!(
                    t.next,
                    VehicleState::MonitoredAutomatedDriving | VehicleState::AlternativeManeuverActive(_)
                );
                if supervised && !open.contains_key(&t.vehicle_id) {
                    return Err(format!("entry {}: {} in {} without a session", e.entry_seq, t.vehicle_id, t.next));
                }
            }
            _ => {}
        }
    }
    Ok((failed, mrms))
}

fn failure_paths() {
    let (mut failed, mut mrms) = (0, 0);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xFA11 ^ seed);
        let n = rng.random_range(1..4);
        let scenarios: Vec<Scenario> = (0..n).map(|i| random_scenario(&mut rng, format!("v{i}"))).collect();
        let cfg = random_config(&mut rng, seed);
        let report = run_sim(&scenarios, &cfg);
        assert_eq!(report.exit_code(), 0, "seed {seed}: {:?}", report.summary.violations);
        let (f, m) = check_log(&report.entries).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        failed += f;
        mrms += m;
    }
    assert!(failed > 0, "no maneuver failed in 100 scenarios");
    assert!(mrms >= 100);
}

// ---------------------------------------------------------------------------
// Protocol

fn arb_state() -> impl Strategy<Value = VehicleState> {
    prop::sample::select(VehicleState::all())
}

fn arb_event() -> impl Strategy<Value = Event> {
    (prop::sample::select(Role::ALL.to_vec()), prop::sample::select(EventKind::all())).prop_map(|(a, k)| Event::new(a, k))
}

fn arb_text() -> impl Strategy<Value = String> {
    prop_oneof!["[a-z_]{1,16}", r"\PC{0,12}", r#"[\x00-\x1f"\\]{0,6}"#]
}

fn arb_body() -> impl Strategy<Value = MessageBody> {
    let unit = || -1.0f64..=1.0;
    prop_oneof![
        (prop::sample::select(vec!["generic", "german"]), arb_state())
            .prop_map(|(p, state)| MessageBody::Hello { profile: p.into(), state }),
        arb_text().prop_map(|reason| MessageBody::InteractionRequest { reason }),
        (prop::sample::select(Role::ALL.to_vec()), arb_text())
            .prop_map(|(origin, reason)| MessageBody::MonitoringRequest { origin, reason }),
        (arb_event(), any::<bool>()).prop_map(|(event, attach)| MessageBody::Command {
            event,
            ctx_override: if attach { GuardOverride::attached() } else { GuardOverride::default() },
        }),
        (any::<u64>(), arb_state(), prop::collection::vec(prop::sample::select(vec![
            Effect::EmitInteractionRequest,
            Effect::NotifyFleetManager,
            Effect::RequireOperatorAttach,
        ]), 0..3))
            .prop_map(|(ref_msg_id, next, effects)| MessageBody::CommandAck {
                ref_msg_id,
                outcome: AckOutcome::Ok(TransitionResult { next, effects }),
            }),
        (any::<u64>(), arb_state(), prop::sample::select(EventTag::ALL.to_vec())).prop_map(|(ref_msg_id, state, event)| {
            MessageBody::CommandAck {
                ref_msg_id,
                outcome: AckOutcome::Error(TransitionError::InvalidTransition { state, event }),
            }
        }),
        (unit(), unit(), 0.0f64..=1.0, any::<bool>()).prop_map(|(steering, throttle, brake, abort)| {
            MessageBody::DriveFrame(DriveFrame {
                steering,
                throttle,
                brake,
                abort,
            })
        }),
        (any::<u64>(), prop::option::of((any::<u32>(), any::<bool>()))).prop_map(|(proposal_id, pick)| {
            MessageBody::ManeuverDecision {
                proposal_id,
                selected: match pick {
                    Some((option_id, confirm_odd_exit)) => Decision::Select {
                        option_id,
                        confirm_odd_exit,
                    },
                    None => Decision::RejectAll,
                },
            }
        }),
        arb_text().prop_map(|object| MessageBody::ClassificationQuery { object }),
        arb_text().prop_map(|label| MessageBody::ClassificationAnswer { label }),
        (any::<u64>(), arb_text()).prop_map(|(ref_msg_id, reason)| MessageBody::Rejected { ref_msg_id, reason }),
        Just(MessageBody::Heartbeat {}),
    ]
}

fn arb_message() -> impl Strategy<Value = Message> {
    (any::<u64>(), 1u64.., any::<u64>(), "[a-z0-9-]{1,12}", arb_body()).prop_map(|(msg_id, seq, sent_at, vehicle_id, body)| {
        Message {
            msg_id,
            seq,
            sent_at,
            vehicle_id,
            body,
        }
    })
}

fn protocol_round_trip() {
    let mut runner = TestRunner::new(Config {
        cases: 512,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&arb_message(), |msg| {
            let bytes = encode(&msg).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(bytes.iter().filter(|b| **b == b'\n').count(), 1);
            prop_assert_eq!(bytes.last(), Some(&b'\n'));
            let back = decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, msg);
            Ok(())
        })
        .unwrap_or_else(|e| panic!("{e}"));

    let frame = |msg_id, seq| Message {
        msg_id,
        seq,
        sent_at: 0,
        vehicle_id: "v1".into(),
        body: MessageBody::Heartbeat {},
    };
    let mut inbound = InboundSession::new();
    inbound.accept(&frame(10, 1)).unwrap();
    inbound.accept(&frame(11, 2)).unwrap();
    assert_eq!(inbound.accept(&frame(12, 2)), Err(SessionError::SeqRegression { last: 2, got: 2 }));
    assert_eq!(inbound.accept(&frame(13, 1)), Err(SessionError::SeqRegression { last: 2, got: 1 }));
    assert_eq!(inbound.accept(&frame(11, 3)), Err(SessionError::DuplicateMsgId { msg_id: 11 }));
    inbound.accept(&frame(14, 3)).unwrap();

    let log = Arc::new(EventLog::in_memory());
    let center = ControlCenter::new(CenterConfig::new(LegalProfile::generic()), log);
    let mut agent = VehicleAgent::new(Scenario::new("v1", 100.0, 10.0), TransitionModel::default(), LegalProfile::generic());
    agent.field_operator(EventKind::PrepareVehicle, 0).unwrap();
    let frames = agent.hello(0);
    let replay_frame = frames[1].clone();
    let mut link = Link(agent);
    center.connect(&mut link, frames, 0).unwrap();
    assert!(matches!(center.on_vehicle_message(&replay_frame, 0), Err(CenterError::Link(_))));
}

// ---------------------------------------------------------------------------
// Determinism

fn scenario_files() -> Vec<Scenario> {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios"].iter().collect();
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    assert!(!paths.is_empty());
    paths.iter().map(|p| Scenario::load(p).unwrap()).collect()
}

fn determinism() {
    let scenarios = scenario_files();
    for seed in [0, 7, 1234] {
        let cfg = SimConfig::new(LegalProfile::generic(), OperatorPolicy::new(PolicyName::AutoResolve), seed);
        let a = run_sim(&scenarios, &cfg);
        let b = run_sim(&scenarios, &cfg);
        assert_eq!(a.exit_code(), 0, "{:?}", a.summary.violations);
        let (la, lb) = (render_log(&normalize_timestamps(&a.entries)), render_log(&normalize_timestamps(&b.entries)));
        assert!(la.as_bytes() == lb.as_bytes(), "seed {seed}: logs differ");
        assert_eq!(a.summary.to_json(), b.summary.to_json());
    }
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn()); 7] = [
        ("transition-table completeness", table_completeness),
        ("state-diagram walkthrough with clean replay", walkthrough),
        ("german-profile differential", german_differential),
        ("session exclusivity under contention", session_exclusivity),
        ("randomized failure paths", failure_paths),
        ("protocol round trip and sequence checks", protocol_round_trip),
        ("seeded determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(()) => println!("acceptance: PASS {name} ({ms} ms)"),
            Err(cause) => {
                failed += 1;
                let why = cause
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| cause.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("acceptance: FAIL {name} ({ms} ms): {}", why.replace('\n', " "));
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
