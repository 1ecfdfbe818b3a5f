use serde_json::Value;
use teleop_web::{profile_diff, simulate, transition_table, Stepper};

fn kind_json(s: &Stepper, label: &str) -> String {
    let list: Value = serde_json::from_str(&s.affordances()).unwrap();
    let a = list
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["label"] == label)
        .unwrap_or_else(|| panic!("{label} not offered in {}", s.state()));
    a["kind"].to_string()
}

fn step(s: &mut Stepper, label: &str, actor: &str) -> Value {
    let k = kind_json(s, label);
    serde_json::from_str(&s.apply(&k, actor).unwrap()).unwrap()
}

#[test]
fn stepper_walks_service_start_to_unmonitored() {
    let mut s = Stepper::new("generic").unwrap();
    assert_eq!(s.state(), "initial");
    step(&mut s, "prepare_vehicle", "field_operator");
    step(&mut s, "start_service", "remote_operator");
    s.set_operator_attached(true);
    step(&mut s, "activate_ads", "remote_operator");
    step(&mut s, "engage_automation", "remote_operator");
    step(&mut s, "end_monitoring", "remote_operator");
    let mrm = step(&mut s, "trigger_mrm", "ads");
    assert_eq!(mrm["next"], "activated_mrc");
    assert_eq!(mrm["effects"].as_array().unwrap().len(), 2);
    let history: Value = serde_json::from_str(&s.history()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 6);
    s.reset();
    assert_eq!(s.state(), "initial");
}

#[test]
fn guard_inputs_toggle_affordances() {
    let mut s = Stepper::new("generic").unwrap();
    step(&mut s, "prepare_vehicle", "field_operator");
    step(&mut s, "start_service", "remote_operator");
    let list: Value = serde_json::from_str(&s.affordances()).unwrap();
    let activate = list.as_array().unwrap().iter().find(|a| a["label"] == "activate_ads").unwrap();
    assert_eq!(activate["enabled"], false);
    assert!(activate["reason"].as_str().unwrap().contains("operator_attached"));
    let k = kind_json(&s, "activate_ads");
    assert!(s.apply(&k, "remote_operator").unwrap_err().contains("guard"));
    assert!(s.apply(&k, "fleet_manager").is_err());
    assert!(s.apply("\"fly\"", "remote_operator").is_err());
}

#[test]
fn german_stepper_shows_remote_driving_disabled() {
    let mut s = Stepper::new("german").unwrap();
    step(&mut s, "prepare_vehicle", "field_operator");
    step(&mut s, "start_service", "remote_operator");
    s.set_operator_attached(true);
    step(&mut s, "activate_ads", "remote_operator");
    let list: Value = serde_json::from_str(&s.affordances()).unwrap();
    let rd: Vec<_> = list
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["kind"]["begin_alternative_maneuver"] == "remote_driving")
        .collect();
    assert_eq!(rd.len(), 1);
    assert_eq!(rd[0]["enabled"], false);
    assert!(rd[0]["reason"].as_str().unwrap().contains("german"));
    let err = s.apply(&rd[0]["kind"].to_string(), "remote_operator").unwrap_err();
    assert!(err.contains("forbidden"), "{err}");
}

#[test]
fn tables_and_diff() {
    let g = transition_table("generic").unwrap();
    let d = transition_table("german").unwrap();
    assert_eq!(g.lines().count(), d.lines().count() + 1);
    assert!(transition_table("nowhere").is_err());
    let diff: Value = serde_json::from_str(&profile_diff("generic", "german").unwrap()).unwrap();
    assert_eq!(diff["removed"].as_array().unwrap().len(), 1);
    assert!(Stepper::new("nowhere").is_err());
}

#[test]
fn simulate_accepts_object_or_array() {
    let one = r#"{"vehicle_id": "v1", "route_length": 100, "cruise_speed": 10,
        "events": [{"at": 5, "kind": {"type": "ads_mrm", "reason": "demo"}}]}"#;
    let summary: Value = serde_json::from_str(&simulate(one, "generic", "auto_resolve", 1).unwrap()).unwrap();
    assert_eq!(summary["vehicles"]["v1"]["mrms_resolved"], 1);
    let many = format!("[{one}]");
    assert_eq!(
        simulate(&many, "generic", "auto_resolve", 1).unwrap(),
        simulate(one, "generic", "auto_resolve", 1).unwrap()
    );
    assert!(simulate(one, "generic", "bogus", 1).is_err());
    assert!(simulate("{}", "generic", "ignore", 1).is_err());
}
