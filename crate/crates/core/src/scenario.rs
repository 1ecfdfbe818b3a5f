//! Scenario files driving a simulated vehicle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::maneuver::BlockageSpec;
use crate::protocol::GeoPosition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScheduledKind {
    /// The ADS performs a minimal risk maneuver. The reason keeps blocking
    /// automation engagement for `reason_persists_s` after the MRM.
    AdsMrm {
        reason: String,
        #[serde(default)]
        reason_persists_s: f64,
    },
    AdsMonitoringRequest { reason: String },
    /// Every viable bypass now leaves the operational design domain.
    OddExit {},
    LinkQualityChange { value: f64 },
    TrajectoryBlocked {
        duration_s: f64,
        #[serde(default)]
        blockage: BlockageSpec,
    },
    AdsFunctionOutage { duration_s: f64 },
}

/// Fires once, at a simulated time (`at`, seconds) or when the vehicle
/// passes a route position (`at_position`, meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_position: Option<f64>,
    pub kind: ScheduledKind,
}

impl ScheduledEvent {
    pub fn at(at: f64, kind: ScheduledKind) -> Self {
        Self {
            at: Some(at),
            at_position: None,
            kind,
        }
    }

    pub fn at_position(at_position: f64, kind: ScheduledKind) -> Self {
        Self {
            at: None,
            at_position: Some(at_position),
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteEndpoints {
    pub start: GeoPosition,
    pub end: GeoPosition,
}

impl Default for RouteEndpoints {
    fn default() -> Self {
        Self {
            start: GeoPosition {
                lat: 48.1374,
                lon: 11.5755,
            },
            end: GeoPosition {
                lat: 48.1500,
                lon: 11.5900,
            },
        }
    }
}

impl RouteEndpoints {
    /// Linear interpolation along the route, `fraction` in [0, 1].
    pub fn interpolate(&self, fraction: f64) -> GeoPosition {
        let f = fraction.clamp(0.0, 1.0);
        GeoPosition {
            lat: self.start.lat + (self.end.lat - self.start.lat) * f,
            lon: self.start.lon + (self.end.lon - self.start.lon) * f,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn clearance() -> f64 {
    20.0
}
fn v_max() -> f64 {
    4.0
}
fn decision_timeout() -> f64 {
    30.0
}
fn horizon() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub vehicle_id: String,
    /// meters
    pub route_length: f64,
    /// m/s
    pub cruise_speed: f64,
    #[serde(default)]
    pub events: Vec<ScheduledEvent>,
    #[serde(default = "one")]
    pub initial_link_quality: f64,
    /// Distance a remote-driving maneuver must cover, meters.
    #[serde(default = "clearance")]
    pub clearance_distance: f64,
    /// Speed at full throttle during remote driving, m/s.
    #[serde(default = "v_max")]
    pub drive_v_max: f64,
    #[serde(default = "one")]
    pub telemetry_period_s: f64,
    #[serde(default = "decision_timeout")]
    pub decision_timeout_s: f64,
    /// Simulated seconds after which a headless run stops.
    #[serde(default = "horizon")]
    pub horizon_s: f64,
    #[serde(default)]
    pub route: RouteEndpoints,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario {vehicle_id:?}: {reason}")]
    Invalid { vehicle_id: String, reason: String },
}

impl Scenario {
    pub fn new(vehicle_id: impl Into<String>, route_length: f64, cruise_speed: f64) -> Self {
        Self {
            vehicle_id: vehicle_id.into(),
            route_length,
            cruise_speed,
            events: Vec::new(),
            initial_link_quality: 1.0,
            clearance_distance: clearance(),
            drive_v_max: v_max(),
            telemetry_period_s: 1.0,
            decision_timeout_s: decision_timeout(),
            horizon_s: horizon(),
            route: RouteEndpoints::default(),
        }
    }

    pub fn with_event(mut self, event: ScheduledEvent) -> Self {
        self.events.push(event);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |reason: String| ScenarioError::Invalid {
            vehicle_id: self.vehicle_id.clone(),
            reason,
        };
        if self.vehicle_id.is_empty() {
            return Err(bad("empty vehicle_id".into()));
        }
        let positive = [
            ("route_length", self.route_length),
            ("cruise_speed", self.cruise_speed),
            ("clearance_distance", self.clearance_distance),
            ("drive_v_max", self.drive_v_max),
            ("telemetry_period_s", self.telemetry_period_s),
            ("decision_timeout_s", self.decision_timeout_s),
            ("horizon_s", self.horizon_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.initial_link_quality) {
            return Err(bad("initial_link_quality outside [0, 1]".into()));
        }
        let (mut last_at, mut last_pos) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (i, e) in self.events.iter().enumerate() {
            match (e.at, e.at_position) {
                (Some(t), None) => {
                    if !(t.is_finite() && t >= 0.0) || t < last_at {
                        return Err(bad(format!("event {i}: times must be sorted and >= 0")));
                    }
                    last_at = t;
                }
                (None, Some(p)) => {
                    if !(p.is_finite() && p >= 0.0) || p < last_pos {
                        return Err(bad(format!("event {i}: positions must be sorted and >= 0")));
                    }
                    last_pos = p;
                }
                _ => return Err(bad(format!("event {i}: exactly one of at/at_position"))),
            }
            match &e.kind {
                ScheduledKind::LinkQualityChange { value } if !(0.0..=1.0).contains(value) => {
                    return Err(bad(format!("event {i}: link quality {value} outside [0, 1]")));
                }
                ScheduledKind::TrajectoryBlocked { duration_s, .. }
                | ScheduledKind::AdsFunctionOutage { duration_s }
                    if !(duration_s.is_finite() && *duration_s >= 0.0) =>
                {
                    return Err(bad(format!("event {i}: negative duration")));
                }
                ScheduledKind::AdsMrm {
                    reason_persists_s, ..
                } if !(reason_persists_s.is_finite() && *reason_persists_s >= 0.0) => {
                    return Err(bad(format!("event {i}: negative reason_persists_s")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Stepped simulation clock in whole milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimClock {
    pub now_ms: u64,
    pub tick_ms: u64,
}

impl Default for SimClock {
    fn default() -> Self {
        Self {
            now_ms: 0,
            tick_ms: 100,
        }
    }
}

impl SimClock {
    pub fn now_s(&self) -> f64 {
        self.now_ms as f64 / 1000.0
    }

    pub fn tick_s(&self) -> f64 {
        self.tick_ms as f64 / 1000.0
    }

    pub fn advance(&mut self) {
        self.now_ms += self.tick_ms;
    }
}

pub fn seconds_to_ms(s: f64) -> u64 {
    (s * 1000.0).round().max(0.0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_shape() {
        let text = r#"{
            "vehicle_id": "v1", "route_length": 500, "cruise_speed": 10,
            "events": [
                {"at": 5, "kind": {"type": "trajectory_blocked", "duration_s": 1000,
                    "blockage": {"options": [{"descriptor": "pass_left", "viable": true}]}}},
                {"at": 5, "kind": {"type": "ads_mrm", "reason": "blocked_lane"}},
                {"at_position": 300, "kind": {"type": "odd_exit"}}
            ]
        }"#;
        let s = Scenario::from_json(text).unwrap();
        assert_eq!(s.events.len(), 3);
        assert_eq!(s.clearance_distance, 20.0);
        assert_eq!(s.decision_timeout_s, 30.0);
    }

    #[test]
    fn rejects_bad_scenarios() {
        let base = Scenario::new("v1", 100.0, 10.0);
        let mut unsorted = base.clone();
        unsorted.events = vec![
            ScheduledEvent::at(5.0, ScheduledKind::OddExit {}),
            ScheduledEvent::at(1.0, ScheduledKind::OddExit {}),
        ];
        assert!(unsorted.validate().is_err());
        let link = base
            .clone()
            .with_event(ScheduledEvent::at(1.0, ScheduledKind::LinkQualityChange { value: 1.5 }));
        assert!(link.validate().is_err());
        let mut both = base.clone();
        both.events.push(ScheduledEvent {
            at: Some(1.0),
            at_position: Some(1.0),
            kind: ScheduledKind::OddExit {},
        });
        assert!(both.validate().is_err());
        assert!(Scenario::new("", 1.0, 1.0).validate().is_err());
        assert!(Scenario::from_json(r#"{"vehicle_id":"v","route_length":1,"cruise_speed":1,
            "events":[{"at":1,"kind":{"type":"teleport"}}]}"#)
        .is_err());
    }

    #[test]
    fn interpolation_endpoints() {
        let r = RouteEndpoints::default();
        assert_eq!(r.interpolate(0.0), r.start);
        assert_eq!(r.interpolate(1.0), r.end);
        assert_eq!(r.interpolate(7.0), r.end);
    }
}
