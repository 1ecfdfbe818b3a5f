//! Scripted stand-ins for human operators in headless runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fsm::{AssistanceKind, EventKind, EventOption, ManeuverMode};
use crate::maneuver::{Decision, ManeuverOption};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    /// Works every request to completion with the preferred maneuver mode.
    AutoResolve,
    /// Like `AutoResolve` but never drives remotely.
    AssistOnly,
    /// Only performs the routine service start.
    Ignore,
}

impl PolicyName {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyName::AutoResolve => "auto_resolve",
            PolicyName::AssistOnly => "assist_only",
            PolicyName::Ignore => "ignore",
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto_resolve" => Ok(PolicyName::AutoResolve),
            "assist_only" => Ok(PolicyName::AssistOnly),
            "ignore" => Ok(PolicyName::Ignore),
            other => Err(format!("unknown policy {other:?} (auto_resolve, assist_only, ignore)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorPolicy {
    pub name: PolicyName,
    /// Minimum age of a request before it is claimed, seconds.
    pub claim_delay_s: f64,
    /// Upper bound of the seeded extra claim delay, seconds.
    pub claim_jitter_s: f64,
    pub prefer_mode: ManeuverMode,
    /// Check the preferred mode against the offered events before trying it.
    pub fallback: bool,
    /// Time spent monitoring before handing the vehicle back, seconds.
    pub monitor_hold_s: f64,
    /// Maneuver attempts per MRM episode before shutting the ADS down.
    pub max_attempts: u32,
}

impl OperatorPolicy {
    pub fn new(name: PolicyName) -> Self {
        Self {
            name,
            claim_delay_s: 1.0,
            claim_jitter_s: 0.5,
            prefer_mode: ManeuverMode::RemoteAssistance(AssistanceKind::ManeuverClearance),
            fallback: true,
            monitor_hold_s: 2.0,
            max_attempts: 3,
        }
    }

    pub fn prefer(mut self, mode: ManeuverMode) -> Self {
        self.prefer_mode = mode;
        self
    }

    pub fn with_fallback(mut self, fallback: bool) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn claims_incidents(&self) -> bool {
        self.name != PolicyName::Ignore
    }

    /// Mode sequence for successive attempts within one MRM episode.
    pub fn attempt_plan(&self) -> Vec<ManeuverMode> {
        let first = match (self.name, self.prefer_mode) {
            (PolicyName::AssistOnly, ManeuverMode::RemoteDriving) => {
                ManeuverMode::RemoteAssistance(AssistanceKind::ManeuverClearance)
            }
            (_, mode) => mode,
        };
        let mut plan = vec![first];
        for mode in [
            ManeuverMode::RemoteAssistance(AssistanceKind::ObjectClassification),
            ManeuverMode::RemoteAssistance(AssistanceKind::ManeuverClearance),
        ] {
            if !plan.contains(&mode) {
                plan.push(mode);
            }
        }
        plan
    }

    /// Picks the mode for attempt `attempt` (0-based). With fallback on,
    /// a mode that is not offered unblocked is replaced by the first
    /// offered assistance mode; `None` means wait.
    pub fn choose_mode(&self, attempt: u32, offered: &[EventOption], refused: &[ManeuverMode]) -> Option<ManeuverMode> {
        let plan = self.attempt_plan();
        let wanted = plan
            .iter()
            .cycle()
            .skip(attempt as usize)
            .take(plan.len())
            .find(|m| !refused.contains(m))
            .copied()?;
        if !self.fallback {
            return Some(wanted);
        }
        let usable = |m: &ManeuverMode| {
            offered
                .iter()
                .any(|o| o.kind == EventKind::BeginAlternativeManeuver(*m) && o.guard_blocked.is_none())
        };
        if usable(&wanted) {
            return Some(wanted);
        }
        plan.into_iter()
            .filter(|m| matches!(m, ManeuverMode::RemoteAssistance(_)))
            .find(|m| usable(m) && !refused.contains(m))
    }

    /// First viable option, confirming an ODD exit when required.
    pub fn decide(&self, options: &[ManeuverOption]) -> Decision {
        match options.iter().find(|o| o.viable) {
            Some(o) => Decision::Select {
                option_id: o.option_id,
                confirm_odd_exit: o.requires_odd_exit,
            },
            None => Decision::RejectAll,
        }
    }
}
