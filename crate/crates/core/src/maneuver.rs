//! Alternative-maneuver workflows: option proposals, operator decisions,
//! object classification and remote-driving supervision.

use serde::{Deserialize, Serialize};

use crate::fsm::{AssistanceKind, ManeuverMode};
use crate::protocol::LinkStatus;

/// Slack when comparing the integrated distance against the clearance
/// distance, so that `n` equal increments summing to it exactly count.
pub const DISTANCE_EPSILON_M: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManeuverOption {
    pub option_id: u32,
    pub descriptor: String,
    pub viable: bool,
    pub requires_odd_exit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Decision {
    Select {
        option_id: u32,
        #[serde(default)]
        confirm_odd_exit: bool,
    },
    RejectAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveFrame {
    /// [-1, 1]; recorded, not simulated.
    pub steering: f64,
    /// [-1, 1]
    pub throttle: f64,
    /// [0, 1]
    pub brake: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub abort: bool,
}

impl DriveFrame {
    pub fn throttle(throttle: f64) -> Self {
        Self {
            steering: 0.0,
            throttle,
            brake: 0.0,
            abort: false,
        }
    }

    pub fn abort() -> Self {
        Self {
            steering: 0.0,
            throttle: 0.0,
            brake: 0.0,
            abort: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let check = |name: &str, v: f64, lo: f64| {
            if v.is_finite() && (lo..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} {v} outside [{lo}, 1]"))
            }
        };
        check("steering", self.steering, -1.0)?;
        check("throttle", self.throttle, -1.0)?;
        check("brake", self.brake, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    OptionNotViable,
    Rejected,
    NoOptions,
    DecisionTimeout,
    LinkLost,
    Aborted,
    AdsFunctionsLost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Outcome {
    Succeeded,
    Failed { reason: FailureReason },
}

impl Outcome {
    pub fn failed(reason: FailureReason) -> Self {
        Outcome::Failed { reason }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Succeeded)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ManeuverError {
    #[error("decision does not reference the live proposal")]
    StaleDecision,
    #[error("unknown option {option_id}")]
    UnknownOption { option_id: u32 },
    #[error("option {option_id} leaves the ODD and needs an explicit confirmation")]
    OddConfirmRequired { option_id: u32 },
    #[error("no classification query pending")]
    NoPendingQuery,
    #[error("protocol violation: {detail}")]
    ProtocolViolation { detail: String },
    #[error("maneuver outcome already recorded")]
    AlreadyFinished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub at: u64,
    pub proposal_id: u64,
    pub decision: Decision,
}

/// Audit record of one alternative-maneuver attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverTranscript {
    pub vehicle_id: String,
    pub mode: ManeuverMode,
    pub started_at: u64,
    pub ended_at: Option<u64>,
    pub outcome: Option<Outcome>,
    #[serde(default)]
    pub decisions: Vec<DecisionRecord>,
    #[serde(default)]
    pub classifications: Vec<String>,
    #[serde(default)]
    pub frames_received: u64,
    #[serde(default)]
    pub distance_m: f64,
}

impl ManeuverTranscript {
    pub fn new(vehicle_id: impl Into<String>, mode: ManeuverMode, started_at: u64) -> Self {
        Self {
            vehicle_id: vehicle_id.into(),
            mode,
            started_at,
            ended_at: None,
            outcome: None,
            decisions: Vec::new(),
            classifications: Vec::new(),
            frames_received: 0,
            distance_m: 0.0,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn finish(&mut self, outcome: Outcome, at: u64) -> Result<Outcome, ManeuverError> {
        if self.outcome.is_some() {
            return Err(ManeuverError::AlreadyFinished);
        }
        self.outcome = Some(outcome);
        self.ended_at = Some(at);
        Ok(outcome)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub descriptor: String,
    #[serde(default)]
    pub viable: bool,
    #[serde(default)]
    pub requires_odd_exit: bool,
    /// Becomes viable once the blocking object is classified as drivable.
    #[serde(default)]
    pub needs_drivable_object: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// What the operator sees; used as the classification prompt.
    pub observed_as: String,
    #[serde(default)]
    pub drivable_labels: Vec<String>,
}

/// What blocks the route and which ways around it exist.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockageSpec {
    #[serde(default)]
    pub options: Vec<OptionSpec>,
    #[serde(default)]
    pub object: Option<ObjectSpec>,
}

/// Option list for a blockage. Ids are dense from 0 in scenario order.
pub fn propose(
    blockage: &BlockageSpec,
    object_drivable: bool,
    odd_exit_active: bool,
) -> Vec<ManeuverOption> {
    blockage
        .options
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let viable = spec.viable || (spec.needs_drivable_object && object_drivable);
            ManeuverOption {
                option_id: i as u32,
                descriptor: spec.descriptor.clone(),
                viable,
                requires_odd_exit: spec.requires_odd_exit || (odd_exit_active && viable),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct LiveProposal {
    id: u64,
    options: Vec<ManeuverOption>,
    issued_at: u64,
}

/// Vehicle-side bookkeeping of one remote-assistance attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct AssistanceSession {
    pub transcript: ManeuverTranscript,
    blockage: BlockageSpec,
    odd_exit: bool,
    object_drivable: bool,
    pending_query: Option<String>,
    proposal: Option<LiveProposal>,
}

impl AssistanceSession {
    pub fn start(
        vehicle_id: &str,
        kind: AssistanceKind,
        blockage: BlockageSpec,
        odd_exit: bool,
        at: u64,
    ) -> Self {
        let pending_query = match (kind, &blockage.object) {
            (AssistanceKind::ObjectClassification, Some(obj)) => Some(obj.observed_as.clone()),
            _ => None,
        };
        Self {
            transcript: ManeuverTranscript::new(
                vehicle_id,
                ManeuverMode::RemoteAssistance(kind),
                at,
            ),
            blockage,
            odd_exit,
            object_drivable: false,
            pending_query,
            proposal: None,
        }
    }

    pub fn pending_query(&self) -> Option<&str> {
        self.pending_query.as_deref()
    }

    pub fn live_proposal(&self) -> Option<(u64, &[ManeuverOption])> {
        self.proposal.as_ref().map(|p| (p.id, p.options.as_slice()))
    }

    /// Publishes a fresh option list under `proposal_id`, superseding any
    /// earlier one. An empty list ends the attempt with `NoOptions`.
    pub fn propose(&mut self, proposal_id: u64, at: u64) -> Result<Vec<ManeuverOption>, Outcome> {
        let options = propose(&self.blockage, self.object_drivable, self.odd_exit);
        if options.is_empty() {
            let outcome = Outcome::failed(FailureReason::NoOptions);
            let _ = self.transcript.finish(outcome, at);
            return Err(outcome);
        }
        self.proposal = Some(LiveProposal {
            id: proposal_id,
            options: options.clone(),
            issued_at: at,
        });
        Ok(options)
    }

    pub fn decide(
        &mut self,
        proposal_id: u64,
        decision: Decision,
        at: u64,
    ) -> Result<Outcome, ManeuverError> {
        if self.transcript.is_finished() {
            return Err(ManeuverError::AlreadyFinished);
        }
        let proposal = match &self.proposal {
            Some(p) if p.id == proposal_id => p,
            _ => return Err(ManeuverError::StaleDecision),
        };
        let outcome = match decision {
            Decision::RejectAll => Outcome::failed(FailureReason::Rejected),
            Decision::Select {
                option_id,
                confirm_odd_exit,
            } => {
                let option = proposal
                    .options
                    .iter()
                    .find(|o| o.option_id == option_id)
                    .ok_or(ManeuverError::UnknownOption { option_id })?;
                if option.requires_odd_exit && !confirm_odd_exit {
                    return Err(ManeuverError::OddConfirmRequired { option_id });
                }
                if option.viable {
                    Outcome::Succeeded
                } else {
                    Outcome::failed(FailureReason::OptionNotViable)
                }
            }
        };
        self.transcript.decisions.push(DecisionRecord {
            at,
            proposal_id,
            decision,
        });
        self.transcript.finish(outcome, at)
    }

    /// Records the operator's label. Returns whether the object counts as
    /// drivable; the option list must be re-proposed afterwards.
    pub fn classify_object(&mut self, label: &str) -> Result<bool, ManeuverError> {
        if self.transcript.is_finished() {
            return Err(ManeuverError::AlreadyFinished);
        }
        if self.pending_query.take().is_none() {
            return Err(ManeuverError::NoPendingQuery);
        }
        self.transcript.classifications.push(label.to_string());
        let drivable = self
            .blockage
            .object
            .as_ref()
            .is_some_and(|o| o.drivable_labels.iter().any(|l| l == label));
        self.object_drivable |= drivable;
        Ok(drivable)
    }

    /// Fails the attempt if the live proposal (or the pending query) has
    /// been unanswered for `timeout_ms`.
    pub fn check_timeout(&mut self, now: u64, timeout_ms: u64) -> Option<Outcome> {
        if self.transcript.is_finished() {
            return None;
        }
        let since = self
            .proposal
            .as_ref()
            .map(|p| p.issued_at)
            .unwrap_or(self.transcript.started_at);
        if now.saturating_sub(since) >= timeout_ms {
            let outcome = Outcome::failed(FailureReason::DecisionTimeout);
            self.transcript.finish(outcome, now).ok()
        } else {
            None
        }
    }

    pub fn fail(&mut self, reason: FailureReason, at: u64) -> Result<Outcome, ManeuverError> {
        self.transcript.finish(Outcome::failed(reason), at)
    }
}

/// Longitudinal-only integration of remote-driving frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveSupervisor {
    pub transcript: ManeuverTranscript,
    pub v_max: f64,
    pub dt: f64,
    pub clearance_m: f64,
}

impl DriveSupervisor {
    pub fn new(transcript: ManeuverTranscript, v_max: f64, dt: f64, clearance_m: f64) -> Self {
        Self {
            transcript,
            v_max,
            dt,
            clearance_m,
        }
    }

    pub fn distance(&self) -> f64 {
        self.transcript.distance_m
    }

    pub fn feed(
        &mut self,
        frame: &DriveFrame,
        link: LinkStatus,
        at: u64,
    ) -> Result<Option<Outcome>, ManeuverError> {
        if self.transcript.is_finished() {
            return Err(ManeuverError::ProtocolViolation {
                detail: "drive frame after maneuver outcome".into(),
            });
        }
        self.transcript.frames_received += 1;
        if link == LinkStatus::Lost {
            return self.transcript.finish(Outcome::failed(FailureReason::LinkLost), at).map(Some);
        }
        if frame.abort {
            return self.transcript.finish(Outcome::failed(FailureReason::Aborted), at).map(Some);
        }
        let advance = (frame.throttle - frame.brake).max(0.0) * self.v_max * self.dt;
        self.transcript.distance_m += advance;
        if self.transcript.distance_m >= self.clearance_m - DISTANCE_EPSILON_M {
            return self.transcript.finish(Outcome::Succeeded, at).map(Some);
        }
        Ok(None)
    }

    pub fn link_lost(&mut self, at: u64) -> Result<Outcome, ManeuverError> {
        self.transcript.finish(Outcome::failed(FailureReason::LinkLost), at)
    }
}

/// Runs a finite frame stream against a paired link-status stream. Returns
/// `Ok(None)` if the streams end before an outcome.
pub fn supervise_drive(
    supervisor: &mut DriveSupervisor,
    frames: impl IntoIterator<Item = DriveFrame>,
    links: impl IntoIterator<Item = LinkStatus>,
) -> Result<Option<Outcome>, ManeuverError> {
    let mut outcome = None;
    for (i, (frame, link)) in frames.into_iter().zip(links).enumerate() {
        if outcome.is_some() {
            return Err(ManeuverError::ProtocolViolation {
                detail: format!("frame {i} after maneuver outcome"),
            });
        }
        let at = supervisor.transcript.started_at + (i as f64 * supervisor.dt * 1000.0) as u64;
        outcome = supervisor.feed(&frame, link, at)?;
    }
    Ok(outcome)
}
