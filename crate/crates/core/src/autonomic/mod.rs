//! Autonomic self-management: events, fluents and condition/action mappings.
//!
//! A fluent is active for a subject between an initiating and a terminating
//! event. A mapping fires its actions once per activation of its condition
//! fluents; it fires again only after a condition has been terminated and
//! re-initiated.

mod monitor;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::Value;
use crate::marf::CLASSIFICATION_STAGE;
use crate::transport::{negotiate_protocol, FrameVerdict, MessageGate, ProtocolId, SecurityVerdict};

pub use monitor::{HeartbeatConfig, HeartbeatMonitor, NodeObservation};

pub mod vocab {
    pub const LOW_PERFORMANCE_DETECTED: &str = "lowPerformanceDetected";
    pub const PERFORMANCE_NORMALIZED: &str = "performanceNormalized";
    pub const PERFORMANCE_NORM_FAILED: &str = "performanceNormFailed";
    pub const NODE_DOWN: &str = "nodeDown";
    pub const NODE_REPLACED: &str = "nodeReplaced";
    pub const REPLACEMENT_FAILED: &str = "replacementFailed";
    pub const PUBLIC_MESSAGE_IS_COMING: &str = "publicMessageIsComing";
    pub const PUBLIC_MESSAGE_SECURE: &str = "publicMessageSecure";
    pub const PUBLIC_MESSAGE_INSECURE: &str = "publicMessageInsecure";
    pub const ENTERING_CLASSIFICATION_STAGE: &str = "enteringClassificationStage";
    pub const OPTIMIZATION_SUCCEEDED: &str = "optimizationSucceeded";
    pub const OPTIMIZATION_NOT_SUCCEEDED: &str = "optimizationNotSucceeded";

    pub const IN_LOW_PERFORMANCE: &str = "inLowPerformance";
    pub const IN_NODE_FAILURE: &str = "inNodeFailure";
    pub const IN_SECURITY_CHECK: &str = "inSecurityCheck";
    pub const IN_CLASSIFICATION_STAGE: &str = "inClassificationStage";

    pub const START_SELF_HEALING: &str = "startSelfHealing";
    pub const REPLACE_NODE: &str = "replaceNode";
    pub const CHECK_PUBLIC_MESSAGE: &str = "checkPublicMessage";
    pub const RUN_GLOBAL_OPTIMIZATION: &str = "runGlobalOptimization";

    pub const INSECURE_PUBLIC_MESSAGES: &str = "hereIsInsecurePublicMessage";
}

use vocab::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutonomicError {
    #[error("unknown event `{0}`")]
    UnknownEvent(String),
    #[error("unknown fluent `{0}`")]
    UnknownFluent(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("`{0}` is already registered")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub name: String,
    pub subject: String,
    pub at: u64,
    #[serde(default)]
    pub attributes: BTreeMap<String, Value>,
}

impl Event {
    pub fn new(name: impl Into<String>, subject: impl Into<String>, at: u64) -> Self {
        Self {
            name: name.into(),
            subject: subject.into(),
            at,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: Value) -> Self {
        self.attributes.insert(key.into(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fluent {
    pub name: String,
    pub initiated_by: BTreeSet<String>,
    pub terminated_by: BTreeSet<String>,
    pub active_for: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMapping {
    pub conditions: BTreeSet<String>,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MetricValue {
    Counter(u64),
    Gauge(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FluentChange {
    pub fluent: String,
    pub subject: String,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionInvocation {
    pub action: String,
    pub subject: String,
}

/// Link state examined by the optimization policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkState {
    pub link_id: String,
    pub current: ProtocolId,
    pub local_caps: BTreeSet<ProtocolId>,
    pub remote_caps: BTreeSet<ProtocolId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSwitch {
    pub link_id: String,
    pub from: ProtocolId,
    pub to: ProtocolId,
}

pub type EventListener = Arc<dyn Fn(&Event) + Send + Sync>;

const EVENT_LOG_LIMIT: usize = 4096;

pub struct PolicyEngine {
    events: BTreeSet<String>,
    actions: BTreeSet<String>,
    fluents: BTreeMap<String, Fluent>,
    mappings: Vec<PolicyMapping>,
    metrics: BTreeMap<String, MetricValue>,
    // (mapping index, subject) pairs that already fired in the current
    // activation interval.
    fired: BTreeSet<(usize, String)>,
    log: VecDeque<Event>,
    listeners: Vec<EventListener>,
}

impl std::fmt::Debug for PolicyEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyEngine")
            .field("fluents", &self.fluents)
            .field("mappings", &self.mappings)
            .field("metrics", &self.metrics)
            .finish_non_exhaustive()
    }
}

impl Default for PolicyEngine {
    fn default() -> Self {
        Self::with_default_policies()
    }
}

impl PolicyEngine {
    pub fn empty() -> Self {
        Self {
            events: BTreeSet::new(),
            actions: BTreeSet::new(),
            fluents: BTreeMap::new(),
            mappings: Vec::new(),
            metrics: BTreeMap::new(),
            fired: BTreeSet::new(),
            log: VecDeque::new(),
            listeners: Vec::new(),
        }
    }

    /// Self-healing, node replacement, self-protection and self-optimization.
    pub fn with_default_policies() -> Self {
        let mut e = Self::empty();
        let policies: [(&str, &[&str], &[&str], &str); 4] = [
            (
                IN_LOW_PERFORMANCE,
                &[LOW_PERFORMANCE_DETECTED],
                &[PERFORMANCE_NORMALIZED, PERFORMANCE_NORM_FAILED],
                START_SELF_HEALING,
            ),
            (
                IN_NODE_FAILURE,
                &[NODE_DOWN, PERFORMANCE_NORM_FAILED],
                &[NODE_REPLACED, REPLACEMENT_FAILED],
                REPLACE_NODE,
            ),
            (
                IN_SECURITY_CHECK,
                &[PUBLIC_MESSAGE_IS_COMING],
                &[PUBLIC_MESSAGE_SECURE, PUBLIC_MESSAGE_INSECURE],
                CHECK_PUBLIC_MESSAGE,
            ),
            (
                IN_CLASSIFICATION_STAGE,
                &[ENTERING_CLASSIFICATION_STAGE],
                &[OPTIMIZATION_SUCCEEDED, OPTIMIZATION_NOT_SUCCEEDED],
                RUN_GLOBAL_OPTIMIZATION,
            ),
        ];
        for (fluent, init, term, action) in policies {
            for ev in init.iter().chain(term) {
                e.events.insert(ev.to_string());
            }
            e.actions.insert(action.to_string());
            e.add_fluent(fluent, init.iter().copied(), term.iter().copied()).expect("vocabulary is consistent");
            e.add_mapping([fluent], [action]).expect("vocabulary is consistent");
        }
        e.metrics.insert(INSECURE_PUBLIC_MESSAGES.to_string(), MetricValue::Counter(0));
        e
    }

    pub fn register_event(&mut self, name: impl Into<String>) {
        self.events.insert(name.into());
    }

    pub fn register_action(&mut self, name: impl Into<String>) {
        self.actions.insert(name.into());
    }

    pub fn add_fluent<'a>(
        &mut self,
        name: &str,
        initiated_by: impl IntoIterator<Item = &'a str>,
        terminated_by: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), AutonomicError> {
        if self.fluents.contains_key(name) {
            return Err(AutonomicError::Duplicate(name.to_string()));
        }
        let known = |set: BTreeSet<String>| -> Result<BTreeSet<String>, AutonomicError> {
            match set.iter().find(|e| !self.events.contains(*e)) {
                Some(e) => Err(AutonomicError::UnknownEvent(e.clone())),
                None => Ok(set),
            }
        };
        let fluent = Fluent {
            name: name.to_string(),
            initiated_by: known(initiated_by.into_iter().map(String::from).collect())?,
            terminated_by: known(terminated_by.into_iter().map(String::from).collect())?,
            active_for: BTreeMap::new(),
        };
        self.fluents.insert(name.to_string(), fluent);
        Ok(())
    }

    pub fn add_mapping<'a>(
        &mut self,
        conditions: impl IntoIterator<Item = &'a str>,
        actions: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), AutonomicError> {
        let conditions: BTreeSet<String> = conditions.into_iter().map(String::from).collect();
        let actions: Vec<String> = actions.into_iter().map(String::from).collect();
        if let Some(f) = conditions.iter().find(|f| !self.fluents.contains_key(*f)) {
            return Err(AutonomicError::UnknownFluent(f.clone()));
        }
        if let Some(a) = actions.iter().find(|a| !self.actions.contains(*a)) {
            return Err(AutonomicError::UnknownAction(a.clone()));
        }
        self.mappings.push(PolicyMapping { conditions, actions });
        Ok(())
    }

    pub fn subscribe(&mut self, listener: EventListener) {
        self.listeners.push(listener);
    }

    pub fn fluent(&self, name: &str) -> Option<&Fluent> {
        self.fluents.get(name)
    }

    pub fn is_active(&self, fluent: &str, subject: &str) -> bool {
        self.fluents.get(fluent).is_some_and(|f| f.active_for.contains_key(subject))
    }

    pub fn mappings(&self) -> &[PolicyMapping] {
        &self.mappings
    }

    pub fn metrics(&self) -> &BTreeMap<String, MetricValue> {
        &self.metrics
    }

    pub fn counter(&self, name: &str) -> u64 {
        match self.metrics.get(name) {
            Some(MetricValue::Counter(n)) => *n,
            _ => 0,
        }
    }

    pub fn increment(&mut self, name: &str) -> u64 {
        let slot = self.metrics.entry(name.to_string()).or_insert(MetricValue::Counter(0));
        match slot {
            MetricValue::Counter(n) => {
                *n += 1;
                *n
            }
            MetricValue::Gauge(_) => {
                *slot = MetricValue::Counter(1);
                1
            }
        }
    }

    pub fn set_gauge(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), MetricValue::Gauge(value));
    }

    /// Most recent events, oldest first.
    pub fn recent_events(&self) -> impl Iterator<Item = &Event> {
        self.log.iter()
    }

    /// Applies `event` to every fluent and returns the activations and
    /// terminations it caused.
    pub fn raise_event(&mut self, event: Event) -> Result<Vec<FluentChange>, AutonomicError> {
        if !self.events.contains(&event.name) {
            return Err(AutonomicError::UnknownEvent(event.name));
        }
        let mut changes = Vec::new();
        for fluent in self.fluents.values_mut() {
            if fluent.terminated_by.contains(&event.name) && fluent.active_for.remove(&event.subject).is_some() {
                changes.push(FluentChange {
                    fluent: fluent.name.clone(),
                    subject: event.subject.clone(),
                    active: false,
                });
            } else if fluent.initiated_by.contains(&event.name) && !fluent.active_for.contains_key(&event.subject) {
                fluent.active_for.insert(event.subject.clone(), event.at);
                changes.push(FluentChange {
                    fluent: fluent.name.clone(),
                    subject: event.subject.clone(),
                    active: true,
                });
            }
        }
        for change in changes.iter().filter(|c| !c.active) {
            let fired: Vec<_> = self
                .fired
                .iter()
                .filter(|(m, s)| *s == change.subject && self.mappings[*m].conditions.contains(&change.fluent))
                .cloned()
                .collect();
            for key in fired {
                self.fired.remove(&key);
            }
        }
        for l in &self.listeners {
            l(&event);
        }
        if self.log.len() == EVENT_LOG_LIMIT {
            self.log.pop_front();
        }
        self.log.push_back(event);
        Ok(changes)
    }

    fn mapping_ready(&self, index: usize, subject: &str) -> bool {
        !self.fired.contains(&(index, subject.to_string()))
            && self.mappings[index].conditions.iter().all(|f| self.is_active(f, subject))
    }

    /// Actions of every mapping that became satisfied since the last step,
    /// ordered by subject id and then mapping order.
    pub fn step_policies(&mut self) -> Vec<ActionInvocation> {
        let subjects: BTreeSet<String> = self
            .fluents
            .values()
            .flat_map(|f| f.active_for.keys().cloned())
            .collect();
        let mut out = Vec::new();
        for subject in subjects {
            for index in 0..self.mappings.len() {
                if self.mapping_ready(index, &subject) {
                    self.fired.insert((index, subject.clone()));
                    for action in &self.mappings[index].actions {
                        out.push(ActionInvocation {
                            action: action.clone(),
                            subject: subject.clone(),
                        });
                    }
                }
            }
        }
        out
    }

    /// Fires only the mappings that include `fluent`, for one subject.
    fn fire_for(&mut self, fluent: &str, subject: &str) -> Vec<String> {
        let mut out = Vec::new();
        for index in 0..self.mappings.len() {
            if self.mappings[index].conditions.contains(fluent) && self.mapping_ready(index, subject) {
                self.fired.insert((index, subject.to_string()));
                out.extend(self.mappings[index].actions.iter().cloned());
            }
        }
        out
    }

    /// Runs the self-protection policy for one incoming message.
    pub fn check_message_security(&mut self, verdict: &FrameVerdict, sender: &str, now: u64) -> SecurityVerdict {
        let arrive = Event::new(PUBLIC_MESSAGE_IS_COMING, sender, now);
        self.raise_event(arrive).expect("default vocabulary");
        let actions = self.fire_for(IN_SECURITY_CHECK, sender);
        debug_assert!(actions.iter().all(|a| a == CHECK_PUBLIC_MESSAGE));
        let (done, result) = match verdict {
            FrameVerdict::Valid(_) => (Event::new(PUBLIC_MESSAGE_SECURE, sender, now), SecurityVerdict::Accept),
            FrameVerdict::Invalid(err) => {
                self.increment(INSECURE_PUBLIC_MESSAGES);
                let ev = Event::new(PUBLIC_MESSAGE_INSECURE, sender, now).with("reason", Value::Text(err.to_string()));
                (ev, SecurityVerdict::Discard)
            }
        };
        self.raise_event(done).expect("default vocabulary");
        result
    }

    /// Runs the self-optimization policy when a stage's demand is generated.
    /// Only the classification stage activates the policy.
    pub fn optimize_on_classification(
        &mut self,
        subject: &str,
        stage_name: &str,
        links: &[LinkState],
        now: u64,
    ) -> Vec<ProtocolSwitch> {
        if stage_name != CLASSIFICATION_STAGE {
            return Vec::new();
        }
        let enter = Event::new(ENTERING_CLASSIFICATION_STAGE, subject, now);
        self.raise_event(enter).expect("default vocabulary");
        if self.fire_for(IN_CLASSIFICATION_STAGE, subject).is_empty() {
            return Vec::new();
        }
        let mut switches = Vec::new();
        let mut all_ok = true;
        for link in links {
            match negotiate_protocol(&link.local_caps, &link.remote_caps) {
                Ok(best) if best.rank() < link.current.rank() => switches.push(ProtocolSwitch {
                    link_id: link.link_id.clone(),
                    from: link.current,
                    to: best,
                }),
                Ok(_) => {}
                Err(_) => all_ok = false,
            }
        }
        let outcome = if all_ok { OPTIMIZATION_SUCCEEDED } else { OPTIMIZATION_NOT_SUCCEEDED };
        let done = Event::new(outcome, subject, now).with("switches", Value::Int(switches.len() as i64));
        self.raise_event(done).expect("default vocabulary");
        switches
    }
}

/// Shares one engine between the transport agents and the manager.
#[derive(Clone)]
pub struct SecurityGate {
    engine: Arc<parking_lot::Mutex<PolicyEngine>>,
    clock: Arc<dyn crate::clock::Clock>,
}

impl SecurityGate {
    pub fn new(engine: Arc<parking_lot::Mutex<PolicyEngine>>, clock: Arc<dyn crate::clock::Clock>) -> Self {
        Self { engine, clock }
    }
}

impl MessageGate for SecurityGate {
    fn check(&self, verdict: &FrameVerdict, sender: &str) -> SecurityVerdict {
        let now = self.clock.now_millis();
        self.engine.lock().check_message_security(verdict, sender, now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{FrameError, MsgKind};
    use proptest::prelude::*;

    fn ev(name: &str, subject: &str) -> Event {
        Event::new(name, subject, 0)
    }

    #[test]
    fn low_performance_activates_and_terminates() {
        let mut e = PolicyEngine::default();
        let changes = e.raise_event(ev(LOW_PERFORMANCE_DETECTED, "n1")).unwrap();
        assert_eq!(
            changes,
            vec![FluentChange {
                fluent: IN_LOW_PERFORMANCE.into(),
                subject: "n1".into(),
                active: true
            }]
        );
        let changes = e.raise_event(ev(PERFORMANCE_NORMALIZED, "n1")).unwrap();
        assert_eq!(changes.len(), 1);
        assert!(!changes[0].active);
        assert!(e.raise_event(ev(PERFORMANCE_NORMALIZED, "n1")).unwrap().is_empty());
        assert_eq!(e.raise_event(ev("bogus", "n1")), Err(AutonomicError::UnknownEvent("bogus".into())));
    }

    #[test]
    fn actions_are_edge_triggered_and_ordered() {
        let mut e = PolicyEngine::default();
        e.raise_event(ev(LOW_PERFORMANCE_DETECTED, "n2")).unwrap();
        e.raise_event(ev(LOW_PERFORMANCE_DETECTED, "n1")).unwrap();
        let step = e.step_policies();
        let expect = |s: &str| ActionInvocation {
            action: START_SELF_HEALING.into(),
            subject: s.into(),
        };
        assert_eq!(step, vec![expect("n1"), expect("n2")]);
        assert!(e.step_policies().is_empty());
        e.raise_event(ev(PERFORMANCE_NORMALIZED, "n1")).unwrap();
        e.raise_event(ev(LOW_PERFORMANCE_DETECTED, "n1")).unwrap();
        assert_eq!(e.step_policies(), vec![expect("n1")]);
    }

    #[test]
    fn norm_failure_hands_over_to_replacement() {
        let mut e = PolicyEngine::default();
        e.raise_event(ev(LOW_PERFORMANCE_DETECTED, "n1")).unwrap();
        e.step_policies();
        e.raise_event(ev(PERFORMANCE_NORM_FAILED, "n1")).unwrap();
        assert!(!e.is_active(IN_LOW_PERFORMANCE, "n1"));
        assert_eq!(
            e.step_policies(),
            vec![ActionInvocation {
                action: REPLACE_NODE.into(),
                subject: "n1".into()
            }]
        );
    }

    #[test]
    fn security_check_counts_insecure_messages() {
        let mut e = PolicyEngine::default();
        let bad = FrameVerdict::Invalid(FrameError::BadSignature);
        let good = FrameVerdict::Valid(MsgKind::Lookup);
        assert_eq!(e.check_message_security(&bad, "peer", 1), SecurityVerdict::Discard);
        assert_eq!(e.counter(INSECURE_PUBLIC_MESSAGES), 1);
        assert_eq!(e.check_message_security(&good, "peer", 2), SecurityVerdict::Accept);
        assert_eq!(e.counter(INSECURE_PUBLIC_MESSAGES), 1);
        for _ in 0..9 {
            e.check_message_security(&bad, "peer", 3);
        }
        assert_eq!(e.counter(INSECURE_PUBLIC_MESSAGES), 10);
        assert!(!e.is_active(IN_SECURITY_CHECK, "peer"));
        assert!(e.step_policies().is_empty());
    }

    fn link(current: ProtocolId, remote: &[ProtocolId]) -> LinkState {
        LinkState {
            link_id: "dst-1".into(),
            current,
            local_caps: crate::transport::tcp_caps(),
            remote_caps: remote.iter().copied().collect(),
        }
    }

    #[test]
    fn classification_switches_to_binary() {
        let mut e = PolicyEngine::default();
        let both = [ProtocolId::TcpText, ProtocolId::TcpBinary];
        let switches = e.optimize_on_classification("eval-1", CLASSIFICATION_STAGE, &[link(ProtocolId::TcpText, &both)], 5);
        assert_eq!(
            switches,
            vec![ProtocolSwitch {
                link_id: "dst-1".into(),
                from: ProtocolId::TcpText,
                to: ProtocolId::TcpBinary
            }]
        );
        let last = e.recent_events().last().unwrap();
        assert_eq!(last.name, OPTIMIZATION_SUCCEEDED);
        assert!(!e.is_active(IN_CLASSIFICATION_STAGE, "eval-1"));

        let none = e.optimize_on_classification("eval-2", CLASSIFICATION_STAGE, &[link(ProtocolId::TcpBinary, &both)], 6);
        assert!(none.is_empty());
        assert_eq!(e.recent_events().last().unwrap().name, OPTIMIZATION_SUCCEEDED);
    }

    #[test]
    fn other_stages_do_not_optimize() {
        let mut e = PolicyEngine::default();
        let links = [link(ProtocolId::TcpText, &[ProtocolId::TcpBinary])];
        assert!(e.optimize_on_classification("eval", "feature_extraction", &links, 1).is_empty());
        assert_eq!(e.recent_events().count(), 0);
    }

    #[test]
    fn unknown_references_rejected() {
        let mut e = PolicyEngine::empty();
        assert_eq!(
            e.add_fluent("f", ["nope"], []),
            Err(AutonomicError::UnknownEvent("nope".into()))
        );
        assert_eq!(e.add_mapping(["f"], []), Err(AutonomicError::UnknownFluent("f".into())));
    }

    proptest! {
        #[test]
        fn fluent_tracks_last_relevant_event(seq in proptest::collection::vec((0usize..4, 0usize..3), 0..60)) {
            let names = [LOW_PERFORMANCE_DETECTED, PERFORMANCE_NORMALIZED, PERFORMANCE_NORM_FAILED, NODE_DOWN];
            let subjects = ["a", "b", "c"];
            let mut e = PolicyEngine::default();
            let mut fired = 0;
            for (n, s) in &seq {
                e.raise_event(ev(names[*n], subjects[*s])).unwrap();
                fired += e.step_policies().iter().filter(|a| a.action == START_SELF_HEALING).count();
            }
            // Replay oracle: active iff the last relevant event was the initiator.
            let mut activations = 0;
            for (s, subject) in subjects.iter().enumerate() {
                let relevant: Vec<usize> = seq.iter().filter(|(n, sub)| *sub == s && *n < 3).map(|(n, _)| *n).collect();
                let expect = relevant.last() == Some(&0);
                prop_assert_eq!(e.is_active(IN_LOW_PERFORMANCE, subject), expect);
                let mut active = false;
                for n in relevant {
                    if n == 0 && !active { activations += 1; active = true; }
                    if n != 0 { active = false; }
                }
            }
            prop_assert_eq!(fired, activations);
        }
    }
}
