//! Remote-operator state diagram for an automated vehicle.
//!
//! Everything in this module is a pure function of its inputs. The transition
//! table is the single authority: [`TransitionModel::apply_event`],
//! [`TransitionModel::valid_events`], [`TransitionModel::reachable_states`] and
//! [`TransitionModel::export_table`] are all derived from [`TransitionModel::rows`].
//!
//! Rows are keyed by source state, event kind and, for alternative maneuvers,
//! the maneuver class (assistance or driving). Legal profiles remove rows by
//! that key and never add any.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssistanceKind {
    ManeuverClearance,
    ManeuverProposal,
    ObjectClassification,
}

impl AssistanceKind {
    pub const ALL: [AssistanceKind; 3] = [
        AssistanceKind::ManeuverClearance,
        AssistanceKind::ManeuverProposal,
        AssistanceKind::ObjectClassification,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AssistanceKind::ManeuverClearance => "maneuver_clearance",
            AssistanceKind::ManeuverProposal => "maneuver_proposal",
            AssistanceKind::ObjectClassification => "object_classification",
        }
    }
}

/// A teleoperation concept used to enter an alternative maneuver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverMode {
    RemoteAssistance(AssistanceKind),
    RemoteDriving,
}

impl ManeuverMode {
    pub const ALL: [ManeuverMode; 4] = [
        ManeuverMode::RemoteAssistance(AssistanceKind::ManeuverClearance),
        ManeuverMode::RemoteAssistance(AssistanceKind::ManeuverProposal),
        ManeuverMode::RemoteAssistance(AssistanceKind::ObjectClassification),
        ManeuverMode::RemoteDriving,
    ];

    pub fn class(&self) -> ModeClass {
        match self {
            ManeuverMode::RemoteAssistance(_) => ModeClass::RemoteAssistance,
            ManeuverMode::RemoteDriving => ModeClass::RemoteDriving,
        }
    }
}

impl fmt::Display for ManeuverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManeuverMode::RemoteAssistance(kind) => write!(f, "remote_assistance:{}", kind.as_str()),
            ManeuverMode::RemoteDriving => f.write_str("remote_driving"),
        }
    }
}

/// Assistance vs. driving, without the assistance sub-kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeClass {
    RemoteAssistance,
    RemoteDriving,
}

impl ModeClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModeClass::RemoteAssistance => "remote_assistance",
            ModeClass::RemoteDriving => "remote_driving",
        }
    }

    pub fn modes(&self) -> impl Iterator<Item = ManeuverMode> + '_ {
        ManeuverMode::ALL.into_iter().filter(move |m| m.class() == *self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleState {
    Initial,
    Prepared,
    DeactivatedMrc,
    ActivatedMrc,
    MonitoredAutomatedDriving,
    UnmonitoredAutomatedDriving,
    AlternativeManeuverActive(ManeuverMode),
}

impl VehicleState {
    /// Every concrete state value, one per maneuver mode for the maneuver state.
    pub fn all() -> Vec<VehicleState> {
        let mut states = vec![
            VehicleState::Initial,
            VehicleState::Prepared,
            VehicleState::DeactivatedMrc,
            VehicleState::ActivatedMrc,
            VehicleState::MonitoredAutomatedDriving,
            VehicleState::UnmonitoredAutomatedDriving,
        ];
        states.extend(ManeuverMode::ALL.into_iter().map(VehicleState::AlternativeManeuverActive));
        states
    }

    pub fn tag(&self) -> StateTag {
        match self {
            VehicleState::Initial => StateTag::Initial,
            VehicleState::Prepared => StateTag::Prepared,
            VehicleState::DeactivatedMrc => StateTag::DeactivatedMrc,
            VehicleState::ActivatedMrc => StateTag::ActivatedMrc,
            VehicleState::MonitoredAutomatedDriving => StateTag::MonitoredAutomatedDriving,
            VehicleState::UnmonitoredAutomatedDriving => StateTag::UnmonitoredAutomatedDriving,
            VehicleState::AlternativeManeuverActive(_) => StateTag::AlternativeManeuverActive,
        }
    }

    /// States in which the ADS moves the vehicle along its route.
    pub fn is_automated_driving(&self) -> bool {
        matches!(
            self,
            VehicleState::MonitoredAutomatedDriving | VehicleState::UnmonitoredAutomatedDriving
        )
    }

    /// States that may only be held while an operator session is open.
    pub fn requires_session(&self) -> bool {
        matches!(
            self,
            VehicleState::MonitoredAutomatedDriving | VehicleState::AlternativeManeuverActive(_)
        )
    }
}

impl fmt::Display for VehicleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VehicleState::AlternativeManeuverActive(mode) => {
                write!(f, "alternative_maneuver_active({mode})")
            }
            other => f.write_str(other.tag().as_str()),
        }
    }
}

/// A state variant with the maneuver mode erased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateTag {
    Initial,
    Prepared,
    DeactivatedMrc,
    ActivatedMrc,
    MonitoredAutomatedDriving,
    UnmonitoredAutomatedDriving,
    AlternativeManeuverActive,
}

impl StateTag {
    pub const ALL: [StateTag; 7] = [
        StateTag::Initial,
        StateTag::Prepared,
        StateTag::DeactivatedMrc,
        StateTag::ActivatedMrc,
        StateTag::MonitoredAutomatedDriving,
        StateTag::UnmonitoredAutomatedDriving,
        StateTag::AlternativeManeuverActive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StateTag::Initial => "initial",
            StateTag::Prepared => "prepared",
            StateTag::DeactivatedMrc => "deactivated_mrc",
            StateTag::ActivatedMrc => "activated_mrc",
            StateTag::MonitoredAutomatedDriving => "monitored_automated_driving",
            StateTag::UnmonitoredAutomatedDriving => "unmonitored_automated_driving",
            StateTag::AlternativeManeuverActive => "alternative_maneuver_active",
        }
    }
}

impl fmt::Display for StateTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    RemoteOperator,
    FleetManager,
    FieldOperator,
    Ads,
    System,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::RemoteOperator,
        Role::FleetManager,
        Role::FieldOperator,
        Role::Ads,
        Role::System,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::RemoteOperator => "remote_operator",
            Role::FleetManager => "fleet_manager",
            Role::FieldOperator => "field_operator",
            Role::Ads => "ads",
            Role::System => "system",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PrepareVehicle,
    EndDrivingOperation,
    StartService,
    EndService,
    ActivateAds,
    DeactivateAds,
    EngageAutomation,
    StartMonitoring,
    EndMonitoring,
    TriggerMrm,
    BeginAlternativeManeuver(ManeuverMode),
    ManeuverSucceeded,
    ManeuverFailed,
    InteractionRequest,
}

impl EventKind {
    /// Every concrete event kind, one per maneuver mode for `BeginAlternativeManeuver`.
    pub fn all() -> Vec<EventKind> {
        EventTag::ALL
            .iter()
            .flat_map(|tag| match tag {
                EventTag::BeginAlternativeManeuver => ManeuverMode::ALL
                    .iter()
                    .map(|m| EventKind::BeginAlternativeManeuver(*m))
                    .collect::<Vec<_>>(),
                other => vec![other.unit_kind().expect("non-parametric tag")],
            })
            .collect()
    }

    pub fn tag(&self) -> EventTag {
        match self {
            EventKind::PrepareVehicle => EventTag::PrepareVehicle,
            EventKind::EndDrivingOperation => EventTag::EndDrivingOperation,
            EventKind::StartService => EventTag::StartService,
            EventKind::EndService => EventTag::EndService,
            EventKind::ActivateAds => EventTag::ActivateAds,
            EventKind::DeactivateAds => EventTag::DeactivateAds,
            EventKind::EngageAutomation => EventTag::EngageAutomation,
            EventKind::StartMonitoring => EventTag::StartMonitoring,
            EventKind::EndMonitoring => EventTag::EndMonitoring,
            EventKind::TriggerMrm => EventTag::TriggerMrm,
            EventKind::BeginAlternativeManeuver(_) => EventTag::BeginAlternativeManeuver,
            EventKind::ManeuverSucceeded => EventTag::ManeuverSucceeded,
            EventKind::ManeuverFailed => EventTag::ManeuverFailed,
            EventKind::InteractionRequest => EventTag::InteractionRequest,
        }
    }

    pub fn mode(&self) -> Option<ManeuverMode> {
        match self {
            EventKind::BeginAlternativeManeuver(mode) => Some(*mode),
            _ => None,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::BeginAlternativeManeuver(mode) => {
                write!(f, "begin_alternative_maneuver({mode})")
            }
            other => f.write_str(other.tag().as_str()),
        }
    }
}

/// An event kind with the maneuver mode erased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventTag {
    PrepareVehicle,
    EndDrivingOperation,
    StartService,
    EndService,
    ActivateAds,
    DeactivateAds,
    EngageAutomation,
    StartMonitoring,
    EndMonitoring,
    TriggerMrm,
    BeginAlternativeManeuver,
    ManeuverSucceeded,
    ManeuverFailed,
    InteractionRequest,
}

impl EventTag {
    pub const ALL: [EventTag; 14] = [
        EventTag::PrepareVehicle,
        EventTag::EndDrivingOperation,
        EventTag::StartService,
        EventTag::EndService,
        EventTag::ActivateAds,
        EventTag::DeactivateAds,
        EventTag::EngageAutomation,
        EventTag::StartMonitoring,
        EventTag::EndMonitoring,
        EventTag::TriggerMrm,
        EventTag::BeginAlternativeManeuver,
        EventTag::ManeuverSucceeded,
        EventTag::ManeuverFailed,
        EventTag::InteractionRequest,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EventTag::PrepareVehicle => "prepare_vehicle",
            EventTag::EndDrivingOperation => "end_driving_operation",
            EventTag::StartService => "start_service",
            EventTag::EndService => "end_service",
            EventTag::ActivateAds => "activate_ads",
            EventTag::DeactivateAds => "deactivate_ads",
            EventTag::EngageAutomation => "engage_automation",
            EventTag::StartMonitoring => "start_monitoring",
            EventTag::EndMonitoring => "end_monitoring",
            EventTag::TriggerMrm => "trigger_mrm",
            EventTag::BeginAlternativeManeuver => "begin_alternative_maneuver",
            EventTag::ManeuverSucceeded => "maneuver_succeeded",
            EventTag::ManeuverFailed => "maneuver_failed",
            EventTag::InteractionRequest => "interaction_request",
        }
    }

    fn unit_kind(&self) -> Option<EventKind> {
        Some(match self {
            EventTag::PrepareVehicle => EventKind::PrepareVehicle,
            EventTag::EndDrivingOperation => EventKind::EndDrivingOperation,
            EventTag::StartService => EventKind::StartService,
            EventTag::EndService => EventKind::EndService,
            EventTag::ActivateAds => EventKind::ActivateAds,
            EventTag::DeactivateAds => EventKind::DeactivateAds,
            EventTag::EngageAutomation => EventKind::EngageAutomation,
            EventTag::StartMonitoring => EventKind::StartMonitoring,
            EventTag::EndMonitoring => EventKind::EndMonitoring,
            EventTag::TriggerMrm => EventKind::TriggerMrm,
            EventTag::BeginAlternativeManeuver => return None,
            EventTag::ManeuverSucceeded => EventKind::ManeuverSucceeded,
            EventTag::ManeuverFailed => EventKind::ManeuverFailed,
            EventTag::InteractionRequest => EventKind::InteractionRequest,
        })
    }
}

impl fmt::Display for EventTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub actor: Role,
    pub kind: EventKind,
}

impl Event {
    pub fn new(actor: Role, kind: EventKind) -> Self {
        Self { actor, kind }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} by {}", self.kind, self.actor)
    }
}

/// Facts about the vehicle and its link that guards are evaluated against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardContext {
    pub trajectory_valid: bool,
    pub mrc_reason_remaining: bool,
    pub operator_attached: bool,
    /// Unit interval; values outside it fail every link guard.
    pub link_quality: f64,
    pub ads_functions_available: bool,
}

impl Default for GuardContext {
    fn default() -> Self {
        Self {
            trajectory_valid: true,
            mrc_reason_remaining: false,
            operator_attached: false,
            link_quality: 1.0,
            ads_functions_available: true,
        }
    }
}

impl GuardContext {
    /// Default context with an operator attached.
    pub fn attached() -> Self {
        Self {
            operator_attached: true,
            ..Self::default()
        }
    }

    pub fn link_quality_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.link_quality)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardPredicate {
    OperatorAttached,
    TrajectoryValid,
    MrcReasonRemaining,
    LinkQuality,
    AdsFunctionsAvailable,
}

impl GuardPredicate {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuardPredicate::OperatorAttached => "operator_attached",
            GuardPredicate::TrajectoryValid => "trajectory_valid",
            GuardPredicate::MrcReasonRemaining => "mrc_reason_remaining",
            GuardPredicate::LinkQuality => "link_quality",
            GuardPredicate::AdsFunctionsAvailable => "ads_functions_available",
        }
    }
}

impl fmt::Display for GuardPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Guard {
    Always,
    OperatorAttached,
    /// Route continuation possible and no reason for the MRC remaining.
    AutomationClear,
    AdsFunctionsAvailable,
    /// Link quality at or above the model's remote-driving threshold.
    DrivingLink,
}

impl Guard {
    pub fn check(&self, ctx: &GuardContext, link_threshold: f64) -> Result<(), GuardPredicate> {
        match self {
            Guard::Always => Ok(()),
            Guard::OperatorAttached if ctx.operator_attached => Ok(()),
            Guard::OperatorAttached => Err(GuardPredicate::OperatorAttached),
            Guard::AutomationClear if !ctx.trajectory_valid => Err(GuardPredicate::TrajectoryValid),
            Guard::AutomationClear if ctx.mrc_reason_remaining => {
                Err(GuardPredicate::MrcReasonRemaining)
            }
            Guard::AutomationClear => Ok(()),
            Guard::AdsFunctionsAvailable if ctx.ads_functions_available => Ok(()),
            Guard::AdsFunctionsAvailable => Err(GuardPredicate::AdsFunctionsAvailable),
            Guard::DrivingLink
                if ctx.link_quality_valid() && ctx.link_quality >= link_threshold =>
            {
                Ok(())
            }
            Guard::DrivingLink => Err(GuardPredicate::LinkQuality),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Guard::Always => "-",
            Guard::OperatorAttached => "operator_attached",
            Guard::AutomationClear => "trajectory_valid & !mrc_reason_remaining",
            Guard::AdsFunctionsAvailable => "ads_functions_available",
            Guard::DrivingLink => "link_quality >= threshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    EmitInteractionRequest,
    NotifyFleetManager,
    RequireOperatorAttach,
}

impl Effect {
    pub fn as_str(&self) -> &'static str {
        match self {
            Effect::EmitInteractionRequest => "emit_interaction_request",
            Effect::NotifyFleetManager => "notify_fleet_manager",
            Effect::RequireOperatorAttach => "require_operator_attach",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionResult {
    pub next: VehicleState,
    #[serde(default)]
    pub effects: Vec<Effect>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum TransitionError {
    #[error("no transition for {event} in state {state}")]
    InvalidTransition { state: VehicleState, event: EventTag },
    #[error("guard failed: {predicate}")]
    GuardFailed { predicate: GuardPredicate },
    #[error("{event} forbidden by profile {profile}")]
    ForbiddenByProfile { profile: String, event: EventTag, mode: Option<ModeClass> },
    #[error("{actor} may not issue {event}")]
    ActorNotPermitted { actor: Role, event: EventTag },
}

/// One forbidden (event kind, maneuver class) pair. `mode: None` forbids the
/// event regardless of mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Restriction {
    pub event: EventTag,
    pub mode: Option<ModeClass>,
}

impl Restriction {
    fn matches(&self, event: EventTag, mode: Option<ModeClass>) -> bool {
        self.event == event && (self.mode.is_none() || self.mode == mode)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown legal profile {0:?}")]
pub struct UnknownProfile(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LegalProfile {
    pub name: String,
    pub forbidden: BTreeSet<Restriction>,
}

impl LegalProfile {
    pub const KNOWN: [&'static str; 2] = ["generic", "german"];

    pub fn generic() -> Self {
        Self {
            name: "generic".into(),
            forbidden: BTreeSet::new(),
        }
    }

    /// Remote driving is not admissible; every other row is kept.
    pub fn german() -> Self {
        Self {
            name: "german".into(),
            forbidden: [Restriction {
                event: EventTag::BeginAlternativeManeuver,
                mode: Some(ModeClass::RemoteDriving),
            }]
            .into(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self, UnknownProfile> {
        match name {
            "generic" => Ok(Self::generic()),
            "german" => Ok(Self::german()),
            other => Err(UnknownProfile(other.to_string())),
        }
    }

    pub fn forbids(&self, kind: &EventKind) -> bool {
        let mode = kind.mode().map(|m| m.class());
        self.forbids_key(kind.tag(), mode)
    }

    fn forbids_key(&self, event: EventTag, mode: Option<ModeClass>) -> bool {
        self.forbidden.iter().any(|r| r.matches(event, mode))
    }

    pub fn permits_mode(&self, mode: ManeuverMode) -> bool {
        !self.forbids(&EventKind::BeginAlternativeManeuver(mode))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    State(VehicleState),
    /// `AlternativeManeuverActive` carrying the event's mode.
    SelectedManeuver,
}

/// Identity of a row: source state, event kind and maneuver class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub from: StateTag,
    pub event: EventTag,
    pub mode: Option<ModeClass>,
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            Some(mode) => write!(f, "{} --{}({})", self.from, self.event, mode.as_str()),
            None => write!(f, "{} --{}", self.from, self.event),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub key: RowKey,
    pub actors: Vec<Role>,
    pub guard: Guard,
    pub target: Target,
    pub effects: Vec<Effect>,
}

impl Row {
    fn matches(&self, from: StateTag, kind: &EventKind) -> bool {
        self.key.from == from
            && self.key.event == kind.tag()
            && self.key.mode == kind.mode().map(|m| m.class())
    }

    fn next_for(&self, kind: &EventKind) -> VehicleState {
        match (self.target, kind.mode()) {
            (Target::State(s), _) => s,
            (Target::SelectedManeuver, Some(mode)) => VehicleState::AlternativeManeuverActive(mode),
            (Target::SelectedManeuver, None) => unreachable!("maneuver rows are keyed by mode"),
        }
    }

    fn target_label(&self) -> String {
        match (self.target, self.key.mode) {
            (Target::State(s), _) => s.to_string(),
            (Target::SelectedManeuver, Some(class)) => {
                format!("alternative_maneuver_active({})", class.as_str())
            }
            (Target::SelectedManeuver, None) => "alternative_maneuver_active".into(),
        }
    }

    /// One line of the exported listing: `state | event | actor | guard | next | effects`.
    pub fn listing(&self) -> String {
        let event = match self.key.mode {
            Some(mode) => format!("{}({})", self.key.event, mode.as_str()),
            None => self.key.event.to_string(),
        };
        let actors: Vec<_> = self.actors.iter().map(Role::as_str).collect();
        let effects = if self.effects.is_empty() {
            "-".to_string()
        } else {
            self.effects.iter().map(Effect::as_str).collect::<Vec<_>>().join(",")
        };
        format!(
            "{} | {} | {} | {} | {} | {}",
            self.key.from,
            event,
            actors.join(","),
            self.guard.as_str(),
            self.target_label(),
            effects
        )
    }
}

/// An event offered in a state, with every actor that may issue it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOption {
    pub kind: EventKind,
    pub actors: Vec<Role>,
    /// Set when the row exists but its guard currently fails.
    pub guard_blocked: Option<GuardPredicate>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiff {
    /// Permitted by the first profile only.
    pub removed: Vec<RowKey>,
    /// Permitted by the second profile only.
    pub added: Vec<RowKey>,
}

impl RowDiff {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty() && self.added.is_empty()
    }

    pub fn len(&self) -> usize {
        self.removed.len() + self.added.len()
    }
}

/// Configuration knobs of the transition table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    /// Minimum link quality admitting remote driving.
    pub link_threshold: f64,
    /// Lets the teleoperation system start the service on auto-registration.
    pub system_start_service: bool,
    /// Lets the fleet manager issue remote-intervention events.
    pub fm_intervention: bool,
}

impl Default for TransitionModel {
    fn default() -> Self {
        Self {
            link_threshold: 0.5,
            system_start_service: false,
            fm_intervention: false,
        }
    }
}

impl TransitionModel {
    pub fn rows(&self) -> Vec<Row> {
        use Role::*;
        use StateTag as S;
        use VehicleState as V;

        let row = |from, event, mode, actors: Vec<Role>, guard, target, effects: Vec<Effect>| Row {
            key: RowKey { from, event, mode },
            actors,
            guard,
            target,
            effects,
        };
        let intervention = |mut actors: Vec<Role>| {
            if self.fm_intervention {
                actors.push(FleetManager);
            }
            actors
        };
        let mut start_actors = vec![RemoteOperator];
        if self.system_start_service {
            start_actors.push(System);
        }

        vec![
            row(S::Initial, EventTag::PrepareVehicle, None, vec![FieldOperator], Guard::Always,
                Target::State(V::Prepared), vec![]),
            row(S::Prepared, EventTag::StartService, None, start_actors, Guard::Always,
                Target::State(V::DeactivatedMrc), vec![]),
            row(S::DeactivatedMrc, EventTag::ActivateAds, None, intervention(vec![RemoteOperator]),
                Guard::OperatorAttached, Target::State(V::ActivatedMrc), vec![]),
            row(S::ActivatedMrc, EventTag::EngageAutomation, None,
                intervention(vec![RemoteOperator]), Guard::AutomationClear,
                Target::State(V::MonitoredAutomatedDriving), vec![]),
            row(S::MonitoredAutomatedDriving, EventTag::EndMonitoring, None, vec![RemoteOperator],
                Guard::Always, Target::State(V::UnmonitoredAutomatedDriving), vec![]),
            row(S::UnmonitoredAutomatedDriving, EventTag::StartMonitoring, None,
                vec![RemoteOperator], Guard::Always, Target::State(V::MonitoredAutomatedDriving),
                vec![]),
            row(S::MonitoredAutomatedDriving, EventTag::TriggerMrm, None,
                intervention(vec![RemoteOperator, Ads]), Guard::Always,
                Target::State(V::ActivatedMrc), vec![]),
            row(S::UnmonitoredAutomatedDriving, EventTag::TriggerMrm, None, vec![Ads],
                Guard::Always, Target::State(V::ActivatedMrc),
                vec![Effect::EmitInteractionRequest, Effect::RequireOperatorAttach]),
            row(S::ActivatedMrc, EventTag::BeginAlternativeManeuver,
                Some(ModeClass::RemoteAssistance), vec![RemoteOperator],
                Guard::AdsFunctionsAvailable, Target::SelectedManeuver, vec![]),
            row(S::ActivatedMrc, EventTag::BeginAlternativeManeuver,
                Some(ModeClass::RemoteDriving), vec![RemoteOperator], Guard::DrivingLink,
                Target::SelectedManeuver, vec![]),
            row(S::AlternativeManeuverActive, EventTag::ManeuverSucceeded, None, vec![System],
                Guard::Always, Target::State(V::MonitoredAutomatedDriving), vec![]),
            row(S::AlternativeManeuverActive, EventTag::ManeuverFailed, None, vec![System],
                Guard::Always, Target::State(V::ActivatedMrc), vec![]),
            row(S::ActivatedMrc, EventTag::DeactivateAds, None, intervention(vec![RemoteOperator]),
                Guard::Always, Target::State(V::DeactivatedMrc), vec![]),
            row(S::DeactivatedMrc, EventTag::EndService, None, vec![RemoteOperator],
                Guard::Always, Target::State(V::DeactivatedMrc),
                vec![Effect::NotifyFleetManager]),
            row(S::DeactivatedMrc, EventTag::EndDrivingOperation, None, vec![FieldOperator],
                Guard::Always, Target::State(V::Initial), vec![]),
        ]
    }

    /// Rows the profile leaves in place.
    pub fn permitted_rows(&self, profile: &LegalProfile) -> Vec<Row> {
        self.rows()
            .into_iter()
            .filter(|r| !profile.forbids_key(r.key.event, r.key.mode))
            .collect()
    }

    /// Union of the actors of every row for this event kind.
    pub fn actors_for(&self, kind: &EventKind) -> BTreeSet<Role> {
        let mode = kind.mode().map(|m| m.class());
        self.rows()
            .into_iter()
            .filter(|r| r.key.event == kind.tag() && r.key.mode == mode)
            .flat_map(|r| r.actors)
            .collect()
    }

    pub fn apply_event(
        &self,
        state: VehicleState,
        event: Event,
        ctx: &GuardContext,
        profile: &LegalProfile,
    ) -> Result<TransitionResult, TransitionError> {
        let rows = self.rows();
        let row = rows
            .iter()
            .find(|r| r.matches(state.tag(), &event.kind))
            .ok_or(TransitionError::InvalidTransition {
                state,
                event: event.kind.tag(),
            })?;
        if !row.actors.contains(&event.actor) {
            return Err(TransitionError::ActorNotPermitted {
                actor: event.actor,
                event: event.kind.tag(),
            });
        }
        if profile.forbids(&event.kind) {
            return Err(TransitionError::ForbiddenByProfile {
                profile: profile.name.clone(),
                event: event.kind.tag(),
                mode: row.key.mode,
            });
        }
        row.guard
            .check(ctx, self.link_threshold)
            .map_err(|predicate| TransitionError::GuardFailed { predicate })?;
        Ok(TransitionResult {
            next: row.next_for(&event.kind),
            effects: row.effects.clone(),
        })
    }

    pub fn valid_events(
        &self,
        state: VehicleState,
        ctx: &GuardContext,
        profile: &LegalProfile,
    ) -> Vec<EventOption> {
        let mut out = Vec::new();
        for row in self.permitted_rows(profile) {
            if row.key.from != state.tag() {
                continue;
            }
            let kinds: Vec<EventKind> = match row.key.mode {
                Some(class) => class.modes().map(EventKind::BeginAlternativeManeuver).collect(),
                None => vec![row.key.event.unit_kind().expect("unit event row")],
            };
            for kind in kinds {
                out.push(EventOption {
                    kind,
                    actors: row.actors.clone(),
                    guard_blocked: row.guard.check(ctx, self.link_threshold).err(),
                });
            }
        }
        out
    }

    /// Breadth-first closure over the permitted rows, all guards assumed
    /// satisfiable and actors ignored.
    pub fn reachable_states(
        &self,
        start: VehicleState,
        profile: &LegalProfile,
    ) -> BTreeSet<VehicleState> {
        let rows = self.permitted_rows(profile);
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(state) = queue.pop_front() {
            for row in rows.iter().filter(|r| r.key.from == state.tag()) {
                let successors: Vec<VehicleState> = match (row.target, row.key.mode) {
                    (Target::State(s), _) => vec![s],
                    (Target::SelectedManeuver, Some(class)) => {
                        class.modes().map(VehicleState::AlternativeManeuverActive).collect()
                    }
                    (Target::SelectedManeuver, None) => Vec::new(),
                };
                for next in successors {
                    if seen.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
        }
        seen
    }

    /// Rows permitted under `a` but not `b` (removed) and vice versa (added).
    pub fn profile_diff(&self, a: &LegalProfile, b: &LegalProfile) -> RowDiff {
        let keys = |p: &LegalProfile| -> BTreeSet<RowKey> {
            self.permitted_rows(p).into_iter().map(|r| r.key).collect()
        };
        let (ka, kb) = (keys(a), keys(b));
        RowDiff {
            removed: ka.difference(&kb).copied().collect(),
            added: kb.difference(&ka).copied().collect(),
        }
    }

    /// Sorted, newline-terminated listing of the permitted rows.
    pub fn export_table(&self, profile: &LegalProfile) -> String {
        let mut lines: Vec<String> = self.permitted_rows(profile).iter().map(Row::listing).collect();
        lines.sort();
        let mut out = String::new();
        for line in lines {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Number of rows per source state, for quick structural summaries.
    pub fn out_degree(&self, profile: &LegalProfile) -> BTreeMap<StateTag, usize> {
        let mut degree: BTreeMap<StateTag, usize> = StateTag::ALL.iter().map(|s| (*s, 0)).collect();
        for row in self.permitted_rows(profile) {
            *degree.entry(row.key.from).or_default() += 1;
        }
        degree
    }
}

/// [`TransitionModel::apply_event`] with the default model.
pub fn apply_event(
    state: VehicleState,
    event: Event,
    ctx: &GuardContext,
    profile: &LegalProfile,
) -> Result<TransitionResult, TransitionError> {
    TransitionModel::default().apply_event(state, event, ctx, profile)
}

pub fn valid_events(
    state: VehicleState,
    ctx: &GuardContext,
    profile: &LegalProfile,
) -> Vec<EventOption> {
    TransitionModel::default().valid_events(state, ctx, profile)
}

pub fn reachable_states(start: VehicleState, profile: &LegalProfile) -> BTreeSet<VehicleState> {
    TransitionModel::default().reachable_states(start, profile)
}

pub fn profile_diff(a: &LegalProfile, b: &LegalProfile) -> RowDiff {
    TransitionModel::default().profile_diff(a, b)
}

pub fn export_table(profile: &LegalProfile) -> String {
    TransitionModel::default().export_table(profile)
}
