//! Browser bindings: a state-machine stepper, transition tables per legal
//! profile and a headless fleet simulation. Everything crosses the JS
//! boundary as JSON strings so the same functions run natively in tests.

use serde::Serialize;
use teleop_core::fsm::{Event, EventKind, GuardContext, LegalProfile, Role, TransitionModel, VehicleState};
use teleop_core::policy::{OperatorPolicy, PolicyName};
use teleop_core::scenario::Scenario;
use teleop_core::sim::{run_sim, SimConfig};
use wasm_bindgen::prelude::*;

fn profile(name: &str) -> Result<LegalProfile, String> {
    LegalProfile::by_name(name).map_err(|e| e.to_string())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo types serialize")
}

/// One control on the stepper panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Affordance {
    pub kind: EventKind,
    pub label: String,
    pub actors: Vec<Role>,
    pub enabled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct Step {
    from: VehicleState,
    event: Event,
    next: VehicleState,
    effects: Vec<teleop_core::fsm::Effect>,
}

/// Walks one vehicle through the state diagram by hand.
#[wasm_bindgen]
pub struct Stepper {
    model: TransitionModel,
    profile: LegalProfile,
    state: VehicleState,
    ctx: GuardContext,
    history: Vec<Step>,
}

#[wasm_bindgen]
impl Stepper {
    #[wasm_bindgen(constructor)]
    pub fn new(profile_name: &str) -> Result<Stepper, String> {
        Ok(Stepper {
            model: TransitionModel::default(),
            profile: profile(profile_name)?,
            state: VehicleState::Initial,
            ctx: GuardContext::default(),
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> String {
        self.state.to_string()
    }

    pub fn profile(&self) -> String {
        self.profile.name.clone()
    }

    pub fn set_trajectory_valid(&mut self, on: bool) {
        self.ctx.trajectory_valid = on;
    }

    pub fn set_mrc_reason_remaining(&mut self, on: bool) {
        self.ctx.mrc_reason_remaining = on;
    }

    pub fn set_operator_attached(&mut self, on: bool) {
        self.ctx.operator_attached = on;
    }

    pub fn set_link_quality(&mut self, q: f64) {
        self.ctx.link_quality = q;
    }

    pub fn set_ads_functions_available(&mut self, on: bool) {
        self.ctx.ads_functions_available = on;
    }

    /// Guard inputs as JSON.
    pub fn context(&self) -> String {
        json(&self.ctx)
    }

    /// Controls for the current state: enabled iff the event is valid with
    /// the current guard inputs. Profile-forbidden events stay listed,
    /// disabled, with the reason.
    pub fn affordances(&self) -> String {
        json(&self.affordance_list())
    }

    /// Applies the event given as its JSON kind (as found in
    /// `affordances`) issued by `actor`. Returns the step as JSON.
    pub fn apply(&mut self, kind_json: &str, actor: &str) -> Result<String, String> {
        let kind: EventKind = serde_json::from_str(kind_json).map_err(|e| format!("bad event kind: {e}"))?;
        let actor: Role = serde_json::from_value(serde_json::Value::String(actor.into()))
            .map_err(|e| format!("bad actor: {e}"))?;
        let event = Event::new(actor, kind);
        let r = self
            .model
            .apply_event(self.state, event, &self.ctx, &self.profile)
            .map_err(|e| e.to_string())?;
        let step = Step {
            from: self.state,
            event,
            next: r.next,
            effects: r.effects,
        };
        self.state = r.next;
        let out = json(&step);
        self.history.push(step);
        Ok(out)
    }

    pub fn history(&self) -> String {
        json(&self.history)
    }

    pub fn reset(&mut self) {
        self.state = VehicleState::Initial;
        self.history.clear();
    }
}

impl Stepper {
    pub fn affordance_list(&self) -> Vec<Affordance> {
        let mut out: Vec<Affordance> = self
            .model
            .valid_events(self.state, &self.ctx, &self.profile)
            .into_iter()
            .map(|o| Affordance {
                label: o.kind.to_string(),
                enabled: o.guard_blocked.is_none(),
                reason: o.guard_blocked.map(|g| format!("guard: {g}")),
                kind: o.kind,
                actors: o.actors,
            })
            .collect();
        let unrestricted = LegalProfile::generic();
        for o in self.model.valid_events(self.state, &self.ctx, &unrestricted) {
            if self.profile.forbids(&o.kind) && !out.iter().any(|a| a.kind == o.kind) {
                out.push(Affordance {
                    label: o.kind.to_string(),
                    enabled: false,
                    reason: Some(format!("forbidden by profile {}", self.profile.name)),
                    kind: o.kind,
                    actors: o.actors,
                });
            }
        }
        out.sort_by_key(|a| a.kind);
        out
    }
}

/// Sorted transition rows permitted under a profile, one per line.
#[wasm_bindgen]
pub fn transition_table(profile_name: &str) -> Result<String, String> {
    Ok(TransitionModel::default().export_table(&profile(profile_name)?))
}

/// Rows removed and added going from profile `a` to profile `b`, as JSON.
#[wasm_bindgen]
pub fn profile_diff(a: &str, b: &str) -> Result<String, String> {
    Ok(json(&TransitionModel::default().profile_diff(&profile(a)?, &profile(b)?)))
}

/// Runs a headless simulation of the scenarios (a JSON array or a single
/// scenario object) and returns the summary JSON.
#[wasm_bindgen]
pub fn simulate(scenarios_json: &str, profile_name: &str, policy: &str, seed: u64) -> Result<String, String> {
    let value: serde_json::Value = serde_json::from_str(scenarios_json).map_err(|e| e.to_string())?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        single => vec![single],
    };
    let scenarios = items
        .into_iter()
        .map(|v| {
            let s: Scenario = serde_json::from_value(v).map_err(|e| e.to_string())?;
            s.validate().map_err(|e| e.to_string())?;
            Ok(s)
        })
        .collect::<Result<Vec<_>, String>>()?;
    let policy: PolicyName = policy.parse()?;
    let cfg = SimConfig::new(profile(profile_name)?, OperatorPolicy::new(policy), seed);
    Ok(run_sim(&scenarios, &cfg).summary.to_json())
}
