//! The general manager tier: registration, allocation, evaluation and the
//! autonomic loop that heals the grid.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::events::{EventBus, EventCategory};
use super::generator::{dgt_evaluate, EvalOptions, Evaluation, StageRecord};
use super::keeper::GmtInfoKeeper;
use super::worker::{dwt_process_loop, WorkerControl};
use super::{
    keys, valid_address, valid_color, Configuration, GipsyInstance, NodeRegistration, NodeStatus, TierError, TierKind,
    TierRegistration, TierState,
};
use crate::autonomic::vocab::*;
use crate::autonomic::{Event, HeartbeatConfig, HeartbeatMonitor, LinkState, NodeObservation, PolicyEngine, SecurityGate};
use crate::clock::{Clock, SystemClock};
use crate::demand::{Context, Demand, Geer, StagePlan, Value};
use crate::marf::{marf_procedures, CLASSIFICATION_STAGE};
use crate::procedure::{basic_procedures, ProcedurePool};
use crate::store::{DemandSpace, DemandStore, StoreConfig};
use crate::transport::{ta_serve, ProtocolId, RetryPolicy, TaClient, TaHandler, TaServer, TcpEndpoint};

pub const DEFAULT_INSTANCE: &str = "instance-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeAction {
    Start,
    Stop,
}

/// Faults the manager can inject into a node for testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// Heartbeats stop and the node's workers die holding their leases.
    Kill,
    /// The node's workers stop taking demands.
    WedgeWorkers,
    /// Restarting the node's workers fails.
    RefuseRestart,
}

#[derive(Clone)]
pub struct GmtOptions {
    pub instance_name: String,
    /// Key for framing on every transport link the manager sets up.
    pub secret: Vec<u8>,
    pub clock: Arc<dyn Clock>,
    pub heartbeat: HeartbeatConfig,
    pub lease_ms: u64,
    pub worker_idle: Duration,
    pub eval_timeout: Duration,
    /// Every procedure a worker tier can be given.
    pub procedures: ProcedurePool,
}

impl Default for GmtOptions {
    fn default() -> Self {
        Self {
            instance_name: "main".into(),
            secret: b"edgrid-instance-secret".to_vec(),
            clock: Arc::new(SystemClock),
            heartbeat: HeartbeatConfig::default(),
            lease_ms: 30_000,
            worker_idle: Duration::from_millis(2),
            eval_timeout: Duration::from_secs(60),
            procedures: basic_procedures().merge(marf_procedures()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationKind {
    /// A node and the store tier serving it.
    NodeSystem,
    /// A generator or worker and the store it uses.
    Binding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierMetrics {
    pub pending: u64,
    pub in_flight: u64,
    pub warehouse: u64,
    pub executions: u64,
    pub workers: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceTopology {
    pub taken_at: u64,
    pub instances: Vec<GipsyInstance>,
    pub nodes: Vec<NodeRegistration>,
    pub tiers: Vec<TierRegistration>,
    pub relations: Vec<Relation>,
    pub metrics: BTreeMap<String, TierMetrics>,
}

impl InstanceTopology {
    /// Every relation endpoint names a node or tier in the snapshot.
    pub fn check(&self) -> Result<(), String> {
        let nodes: BTreeSet<_> = self.nodes.iter().map(|n| n.node_id.as_str()).collect();
        let tiers: BTreeSet<_> = self.tiers.iter().map(|t| t.tier_id.as_str()).collect();
        for t in &self.tiers {
            if !nodes.contains(t.node_id.as_str()) {
                return Err(format!("tier {} on missing node {}", t.tier_id, t.node_id));
            }
        }
        for r in &self.relations {
            let from_ok = match r.kind {
                RelationKind::NodeSystem => nodes.contains(r.from.as_str()),
                RelationKind::Binding => tiers.contains(r.from.as_str()),
            };
            if !from_ok || !tiers.contains(r.to.as_str()) {
                return Err(format!("dangling relation {r:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementPlan {
    pub failed: String,
    pub target: String,
    pub tiers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryPlan {
    pub node: String,
    pub restarted: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalStatus {
    Running,
    Completed,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval_id: String,
    pub dgt_id: String,
    pub geer_id: String,
    pub status: EvalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub stages: Vec<StageRecord>,
    pub started_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
}

struct WorkerHandle {
    id: String,
    control: Arc<WorkerControl>,
    thread: Option<JoinHandle<()>>,
}

struct NodeRuntime {
    alive: Arc<AtomicBool>,
    heartbeat: Arc<AtomicU64>,
    beat_stop: Option<Arc<AtomicBool>>,
    beat_thread: Option<JoinHandle<()>>,
    refuse_restart: bool,
}

impl NodeRuntime {
    fn new() -> Self {
        Self {
            alive: Arc::new(AtomicBool::new(true)),
            heartbeat: Arc::new(AtomicU64::new(0)),
            beat_stop: None,
            beat_thread: None,
            refuse_restart: false,
        }
    }

    fn start_beating(&mut self, clock: Arc<dyn Clock>, interval_ms: u64) {
        self.stop_beating();
        self.alive.store(true, Ordering::SeqCst);
        self.heartbeat.store(clock.now_millis().max(1), Ordering::SeqCst);
        let stop = Arc::new(AtomicBool::new(false));
        let (s, alive, hb) = (stop.clone(), self.alive.clone(), self.heartbeat.clone());
        let period = Duration::from_millis((interval_ms / 2).max(1));
        self.beat_thread = Some(std::thread::spawn(move || {
            while !s.load(Ordering::SeqCst) {
                if alive.load(Ordering::SeqCst) {
                    hb.store(clock.now_millis().max(1), Ordering::SeqCst);
                }
                std::thread::park_timeout(period);
            }
        }));
        self.beat_stop = Some(stop);
    }

    fn stop_beating(&mut self) {
        if let Some(stop) = self.beat_stop.take() {
            stop.store(true, Ordering::SeqCst);
        }
        if let Some(t) = self.beat_thread.take() {
            t.thread().unpark();
            let _ = t.join();
        }
    }
}

struct DstRuntime {
    store: Arc<DemandStore>,
    server: Option<TaServer>,
}

#[derive(Default)]
struct DwtRuntime {
    workers: Vec<WorkerHandle>,
    generation: u64,
    retired_executions: u64,
}

enum TierRuntime {
    Dst(DstRuntime),
    Dwt(DwtRuntime),
    Dgt,
    Gmt,
}

/// How a generator or worker reaches its store.
#[derive(Clone)]
enum Link {
    Local(Arc<DemandStore>),
    Remote(Arc<TaClient>),
}

impl Link {
    fn space(&self) -> Arc<dyn DemandSpace> {
        match self {
            Link::Local(s) => s.clone(),
            Link::Remote(c) => c.clone(),
        }
    }
}

struct GmtState {
    keeper: GmtInfoKeeper,
    nodes: BTreeMap<String, NodeRuntime>,
    tiers: BTreeMap<String, TierRuntime>,
    next_id: u64,
}

struct GmtInner {
    opts: GmtOptions,
    state: Mutex<GmtState>,
    engine: Arc<Mutex<PolicyEngine>>,
    monitor: Mutex<HeartbeatMonitor>,
    bus: Arc<EventBus>,
    evaluations: Mutex<BTreeMap<String, (EvalRecord, Arc<AtomicBool>)>>,
    autonomic_stop: Arc<AtomicBool>,
}

/// Handle to the manager. Clones share one manager.
#[derive(Clone)]
pub struct Gmt {
    inner: Arc<GmtInner>,
}

fn attrs<const N: usize>(pairs: [(&str, Value); N]) -> BTreeMap<String, Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn text(s: impl Into<String>) -> Value {
    Value::Text(s.into())
}

fn illegal(node: &NodeRegistration, action: &str) -> TierError {
    TierError::IllegalTransition {
        node: node.node_id.clone(),
        from: node.status,
        action: action.into(),
    }
}

fn parse_protocol(config: &Configuration) -> Result<Option<ProtocolId>, TierError> {
    match config.get(keys::PROTOCOL) {
        None => Ok(None),
        Some("TcpText") => Ok(Some(ProtocolId::TcpText)),
        Some("TcpBinary") => Ok(Some(ProtocolId::TcpBinary)),
        Some(other) => Err(TierError::InvalidConfig(format!("unknown protocol `{other}`"))),
    }
}

fn wants_tcp(config: &Configuration) -> Result<bool, TierError> {
    match config.get(keys::TRANSPORT).unwrap_or("local") {
        "local" => Ok(false),
        "tcp" => Ok(true),
        other => Err(TierError::InvalidConfig(format!("unknown transport `{other}`"))),
    }
}

fn id_number(id: &str) -> Option<u64> {
    id.rsplit_once('-').and_then(|(_, n)| n.parse().ok())
}

impl Default for Gmt {
    fn default() -> Self {
        Self::new(GmtOptions::default())
    }
}

impl Gmt {
    pub fn new(opts: GmtOptions) -> Self {
        let bus = Arc::new(EventBus::default());
        let mut engine = PolicyEngine::with_default_policies();
        let b = bus.clone();
        engine.subscribe(Arc::new(move |e: &Event| {
            b.publish(EventCategory::Autonomic, &e.name, &e.subject, e.attributes.clone(), e.at);
        }));
        let mut keeper = GmtInfoKeeper::new();
        keeper.add_instance(GipsyInstance {
            instance_id: DEFAULT_INSTANCE.into(),
            instance_name: opts.instance_name.clone(),
        });
        Self {
            inner: Arc::new(GmtInner {
                monitor: Mutex::new(HeartbeatMonitor::new(opts.heartbeat)),
                opts,
                state: Mutex::new(GmtState {
                    keeper,
                    nodes: BTreeMap::new(),
                    tiers: BTreeMap::new(),
                    next_id: 1,
                }),
                engine: Arc::new(Mutex::new(engine)),
                bus,
                evaluations: Mutex::new(BTreeMap::new()),
                autonomic_stop: Arc::new(AtomicBool::new(false)),
            }),
        }
    }

    pub fn options(&self) -> &GmtOptions {
        &self.inner.opts
    }

    pub fn bus(&self) -> &Arc<EventBus> {
        &self.inner.bus
    }

    pub fn engine(&self) -> &Arc<Mutex<PolicyEngine>> {
        &self.inner.engine
    }

    fn now(&self) -> u64 {
        self.inner.opts.clock.now_millis()
    }

    fn publish(&self, category: EventCategory, name: &str, subject: &str, attributes: BTreeMap<String, Value>) {
        self.inner.bus.publish(category, name, subject, attributes, self.now());
    }

    fn raise(&self, event: Event) {
        if let Err(e) = self.inner.engine.lock().raise_event(event) {
            log::error!("policy engine rejected event: {e}");
        }
    }

    /// Copy of the registry and relations.
    pub fn keeper(&self) -> GmtInfoKeeper {
        self.inner.state.lock().keeper.clone()
    }

    /// Checks the registry and that every registered tier has a runtime.
    pub fn audit(&self) -> Result<(), String> {
        let state = self.inner.state.lock();
        state.keeper.audit()?;
        let registered: BTreeSet<_> = state.keeper.tiers().iter().map(|t| t.tier_id.as_str()).collect();
        let running: BTreeSet<_> = state.tiers.keys().map(String::as_str).collect();
        if registered != running {
            return Err(format!("registered tiers {registered:?} but runtimes {running:?}"));
        }
        for n in state.keeper.nodes() {
            if !state.nodes.contains_key(&n.node_id) {
                return Err(format!("node {} has no runtime", n.node_id));
            }
        }
        Ok(())
    }

    pub fn create_instance(&self, name: impl Into<String>) -> GipsyInstance {
        let mut state = self.inner.state.lock();
        let id = format!("instance-{}", state.next_id);
        state.next_id += 1;
        let instance = GipsyInstance {
            instance_id: id,
            instance_name: name.into(),
        };
        state.keeper.add_instance(instance.clone());
        instance
    }

    pub fn register_node(
        &self,
        node_name: &str,
        address: &str,
        color: &str,
        instance_id: &str,
    ) -> Result<NodeRegistration, TierError> {
        if !valid_address(address) {
            return Err(TierError::BadAddress(address.into()));
        }
        if !valid_color(color) {
            return Err(TierError::BadColor(color.into()));
        }
        let mut state = self.inner.state.lock();
        if state.keeper.instance(instance_id).is_none() {
            return Err(TierError::UnknownInstance(instance_id.into()));
        }
        let candidate = NodeRegistration {
            node_id: format!("node-{}", state.next_id),
            node_name: node_name.into(),
            address: address.into(),
            color: color.into(),
            registered_at: self.now(),
            status: NodeStatus::Registered,
            instance_id: instance_id.into(),
        };
        let (reg, existed) = state.keeper.upsert_node(candidate);
        if !existed {
            state.next_id += 1;
            state.nodes.insert(reg.node_id.clone(), NodeRuntime::new());
        }
        drop(state);
        let name = if existed { "nodeUpdated" } else { "nodeRegistered" };
        self.publish(EventCategory::Node, name, &reg.node_id, attrs([("status", text("Registered"))]));
        Ok(reg)
    }

    pub fn node_lifecycle(&self, node_id: &str, action: NodeAction) -> Result<NodeRegistration, TierError> {
        let mut state = self.inner.state.lock();
        let node = state
            .keeper
            .node(node_id)
            .cloned()
            .ok_or_else(|| TierError::UnknownNode(node_id.into()))?;
        let next = match (action, node.status) {
            (NodeAction::Start, NodeStatus::Registered | NodeStatus::Stopped | NodeStatus::Suspected) => {
                NodeStatus::Started
            }
            (NodeAction::Stop, NodeStatus::Started | NodeStatus::Suspected) => NodeStatus::Stopped,
            (NodeAction::Start, _) => return Err(illegal(&node, "start")),
            (NodeAction::Stop, _) => return Err(illegal(&node, "stop")),
        };
        state.keeper.node_mut(node_id).expect("checked").status = next;
        let clock = self.inner.opts.clock.clone();
        let interval = self.inner.opts.heartbeat.interval_ms;
        let tiers = state.keeper.tiers_on(node_id);
        match action {
            NodeAction::Start => {
                let rt = state.nodes.get_mut(node_id).expect("node runtime");
                rt.start_beating(clock, interval);
                for t in &tiers {
                    if t.state == TierState::Suspended {
                        state.keeper.tier_mut(&t.tier_id).expect("tier").state = TierState::Running;
                    }
                    if t.kind == TierKind::Dwt && t.state != TierState::NoDstAvailable {
                        self.restart_workers(&mut state, &t.tier_id, false)?;
                    }
                }
            }
            NodeAction::Stop => {
                state.nodes.get_mut(node_id).expect("node runtime").stop_beating();
                for t in &tiers {
                    if t.kind == TierKind::Dwt {
                        self.stop_workers(&mut state, &t.tier_id, false);
                    }
                    if matches!(t.kind, TierKind::Dgt | TierKind::Dwt) && t.state == TierState::Running {
                        state.keeper.tier_mut(&t.tier_id).expect("tier").state = TierState::Suspended;
                    }
                }
            }
        }
        let reg = state.keeper.node(node_id).cloned().expect("node");
        drop(state);
        self.inner.monitor.lock().forget(node_id);
        let name = match action {
            NodeAction::Start => "nodeStarted",
            NodeAction::Stop => "nodeStopped",
        };
        self.publish(EventCategory::Node, name, node_id, attrs([("status", text(next.to_string()))]));
        Ok(reg)
    }

    /// Records a heartbeat for a node, e.g. one reported over the API.
    pub fn heartbeat(&self, node_id: &str) -> Result<(), TierError> {
        let state = self.inner.state.lock();
        let rt = state.nodes.get(node_id).ok_or_else(|| TierError::UnknownNode(node_id.into()))?;
        rt.heartbeat.store(self.now().max(1), Ordering::SeqCst);
        Ok(())
    }

    pub fn allocate_tier(
        &self,
        node_id: &str,
        kind: TierKind,
        instance_count: u32,
        config: &Configuration,
    ) -> Result<TierRegistration, TierError> {
        config.validate()?;
        if instance_count == 0 {
            return Err(TierError::InvalidConfig("instance count must be at least 1".into()));
        }
        let config = config.clone();
        let mut state = self.inner.state.lock();
        let node = state
            .keeper
            .node(node_id)
            .cloned()
            .ok_or_else(|| TierError::UnknownNode(node_id.into()))?;
        if node.status != NodeStatus::Started {
            return Err(TierError::NodeNotStarted(node_id.into()));
        }
        let dst = match kind {
            TierKind::Dgt | TierKind::Dwt => Some(
                state
                    .keeper
                    .choose_dst(&node.instance_id, &BTreeSet::new())
                    .ok_or(TierError::NoDstAvailable)?,
            ),
            _ => None,
        };
        let tier_id = format!("{}-{}", kind.to_string().to_ascii_lowercase(), state.next_id);
        let reg = TierRegistration {
            tier_id: tier_id.clone(),
            kind,
            node_id: node_id.into(),
            instance_count,
            config,
            state: TierState::Running,
        };
        let runtime = self.build_runtime(&state, &reg, dst.as_deref())?;
        state.next_id += 1;
        state.keeper.add_tier(reg.clone());
        state.tiers.insert(tier_id.clone(), runtime);
        if let Some(dst) = &dst {
            state.keeper.bind(&tier_id, dst);
        }
        if let TierRuntime::Dwt(_) = state.tiers[&tier_id] {
            self.restart_workers(&mut state, &tier_id, false)?;
        }
        let adopted = if kind == TierKind::Dst {
            self.adopt_orphans(&mut state, &node.instance_id)
        } else {
            Vec::new()
        };
        drop(state);
        let mut a = attrs([("kind", text(kind.to_string())), ("node", text(node_id))]);
        if let Some(dst) = dst {
            a.insert("dst".into(), text(dst));
        }
        self.publish(EventCategory::Tier, "tierAllocated", &tier_id, a);
        for (t, d) in adopted {
            self.publish(EventCategory::Tier, "tierRebound", &t, attrs([("dst", text(d))]));
        }
        Ok(reg)
    }

    pub fn deallocate_tier(&self, tier_id: &str) -> bool {
        let mut state = self.inner.state.lock();
        if state.keeper.tier(tier_id).is_none() {
            return false;
        }
        // Workers go first so their leases return to the store.
        if let Some(TierRuntime::Dwt(_)) = state.tiers.get(tier_id) {
            self.stop_workers(&mut state, tier_id, false);
        }
        let (reg, moved) = state.keeper.remove_tier(tier_id).expect("checked");
        if let Some(TierRuntime::Dst(dst)) = state.tiers.remove(tier_id) {
            if let Some(server) = dst.server {
                server.stop();
            }
        }
        for (t, _) in &moved {
            let is_worker = state.keeper.tier(t).map(|r| r.kind == TierKind::Dwt).unwrap_or(false);
            if is_worker {
                let active = self.node_active(&state, t);
                if let Err(e) = self.restart_workers(&mut state, t, !active) {
                    log::error!("rebinding {t}: {e}");
                }
            }
        }
        drop(state);
        self.publish(
            EventCategory::Tier,
            "tierDeallocated",
            tier_id,
            attrs([("kind", text(reg.kind.to_string()))]),
        );
        for (t, dst) in moved {
            match dst {
                Some(d) => self.publish(EventCategory::Tier, "tierRebound", &t, attrs([("dst", text(d))])),
                None => self.publish(EventCategory::Tier, "tierUnbound", &t, BTreeMap::new()),
            }
        }
        true
    }

    fn node_active(&self, state: &GmtState, tier_id: &str) -> bool {
        let Some(t) = state.keeper.tier(tier_id) else { return false };
        let started = state.keeper.node(&t.node_id).map(|n| n.status == NodeStatus::Started).unwrap_or(false);
        let alive = state.nodes.get(&t.node_id).map(|r| r.alive.load(Ordering::SeqCst)).unwrap_or(false);
        started && alive
    }

    /// Binds unbound generators and workers of an instance to a store.
    fn adopt_orphans(&self, state: &mut GmtState, instance_id: &str) -> Vec<(String, String)> {
        let orphans: Vec<_> = state
            .keeper
            .tiers()
            .iter()
            .filter(|t| t.state == TierState::NoDstAvailable)
            .filter(|t| state.keeper.node(&t.node_id).map(|n| n.instance_id == instance_id).unwrap_or(false))
            .map(|t| t.tier_id.clone())
            .collect();
        let mut adopted = Vec::new();
        for t in orphans {
            let Some(dst) = state.keeper.choose_dst(instance_id, &BTreeSet::new()) else { break };
            state.keeper.bind(&t, &dst);
            let active = self.node_active(state, &t);
            if !active {
                state.keeper.tier_mut(&t).expect("tier").state = TierState::Suspended;
            }
            if matches!(state.tiers.get(&t), Some(TierRuntime::Dwt(_))) && active {
                if let Err(e) = self.restart_workers(state, &t, false) {
                    log::error!("starting adopted {t}: {e}");
                }
            }
            adopted.push((t, dst));
        }
        adopted
    }

    fn build_runtime(&self, state: &GmtState, reg: &TierRegistration, dst: Option<&str>) -> Result<TierRuntime, TierError> {
        match reg.kind {
            TierKind::Dst => {
                let store = match reg.config.get(keys::DST_WAL_PATH) {
                    Some(path) => {
                        let cfg = StoreConfig {
                            wal_path: Some(PathBuf::from(path)),
                            default_lease_ms: self.inner.opts.lease_ms,
                            ..StoreConfig::default()
                        };
                        DemandStore::open(&cfg, self.inner.opts.clock.clone())?
                    }
                    None => DemandStore::with_clock(self.inner.opts.clock.clone()),
                };
                let store = Arc::new(store);
                let server = match reg.config.get(keys::DST_LISTEN) {
                    Some(addr) => {
                        let listener =
                            TcpListener::bind(addr).map_err(|e| TierError::InvalidConfig(format!("listen {addr}: {e}")))?;
                        let gate = SecurityGate::new(self.inner.engine.clone(), self.inner.opts.clock.clone());
                        let handler = TaHandler::new(store.clone(), self.inner.opts.secret.clone()).with_gate(Arc::new(gate));
                        Some(ta_serve(listener, Arc::new(handler)).map_err(|e| TierError::InvalidConfig(e.to_string()))?)
                    }
                    None => None,
                };
                Ok(TierRuntime::Dst(DstRuntime { store, server }))
            }
            TierKind::Dwt => {
                self.worker_pool(&reg.config)?;
                if let Some(dst) = dst {
                    self.check_link(state, &reg.config, dst)?;
                }
                Ok(TierRuntime::Dwt(DwtRuntime::default()))
            }
            TierKind::Dgt => {
                if let Some(dst) = dst {
                    self.check_link(state, &reg.config, dst)?;
                }
                Ok(TierRuntime::Dgt)
            }
            TierKind::Gmt => Ok(TierRuntime::Gmt),
        }
    }

    fn check_link(&self, state: &GmtState, config: &Configuration, dst: &str) -> Result<(), TierError> {
        parse_protocol(config)?;
        if wants_tcp(config)? && self.dst_addr_locked(state, dst).is_none() {
            return Err(TierError::InvalidConfig(format!("store {dst} does not listen for tcp")));
        }
        Ok(())
    }

    fn worker_pool(&self, config: &Configuration) -> Result<ProcedurePool, TierError> {
        let all = &self.inner.opts.procedures;
        match config.get(keys::DWT_PROCEDURES) {
            None => Ok(all.clone()),
            Some(list) => {
                let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                if let Some(bad) = names.iter().find(|n| !all.contains(n)) {
                    return Err(TierError::InvalidConfig(format!("unknown procedure `{bad}`")));
                }
                let pool = all.subset(names);
                if pool.is_empty() {
                    return Err(TierError::InvalidConfig("worker needs at least one procedure".into()));
                }
                Ok(pool)
            }
        }
    }

    fn dst_addr_locked(&self, state: &GmtState, dst: &str) -> Option<SocketAddr> {
        match state.tiers.get(dst) {
            Some(TierRuntime::Dst(d)) => d.server.as_ref().map(TaServer::addr),
            _ => None,
        }
    }

    fn link_for(&self, state: &GmtState, tier_id: &str, peer: &str) -> Result<Link, TierError> {
        let reg = state.keeper.tier(tier_id).ok_or_else(|| TierError::UnknownTier(tier_id.into()))?;
        let dst = state.keeper.binding(tier_id).ok_or(TierError::NoDstAvailable)?;
        let Some(TierRuntime::Dst(rt)) = state.tiers.get(dst) else {
            return Err(TierError::NoDstAvailable);
        };
        if !wants_tcp(&reg.config)? {
            return Ok(Link::Local(rt.store.clone()));
        }
        let addr = self
            .dst_addr_locked(state, dst)
            .ok_or_else(|| TierError::InvalidConfig(format!("store {dst} does not listen for tcp")))?;
        let mut endpoint = TcpEndpoint::new(addr, self.inner.opts.secret.clone(), peer);
        if let Some(p) = parse_protocol(&reg.config)? {
            endpoint = endpoint.with_preferred(p);
        }
        let policy = RetryPolicy {
            max_attempts: 5,
            initial_backoff: Duration::from_millis(20),
        };
        Ok(Link::Remote(Arc::new(TaClient::new(Box::new(endpoint), policy))))
    }

    fn store_locked(&self, state: &GmtState, dst: &str) -> Option<Arc<DemandStore>> {
        match state.tiers.get(dst) {
            Some(TierRuntime::Dst(d)) => Some(d.store.clone()),
            _ => None,
        }
    }

    /// Stops a worker tier's threads. A graceful stop joins them; a crash
    /// abandons them. Either way their leases return to the store.
    fn stop_workers(&self, state: &mut GmtState, tier_id: &str, crash: bool) {
        let store = state.keeper.binding(tier_id).and_then(|d| self.store_locked(state, d));
        let Some(TierRuntime::Dwt(rt)) = state.tiers.get_mut(tier_id) else { return };
        let workers = std::mem::take(&mut rt.workers);
        for w in &workers {
            if crash {
                w.control.crash();
            } else {
                w.control.stop();
            }
        }
        for mut w in workers {
            if !crash {
                if let Some(t) = w.thread.take() {
                    let _ = t.join();
                }
            }
            rt.retired_executions += w.control.executions();
            if let Some(store) = &store {
                if let Err(e) = store.expire_worker(&w.id) {
                    log::warn!("expiring leases of {}: {e}", w.id);
                }
            }
        }
    }

    /// Replaces a worker tier's threads with a fresh generation bound to
    /// its current store. With `idle` set the old threads are only stopped.
    fn restart_workers(&self, state: &mut GmtState, tier_id: &str, idle: bool) -> Result<(), TierError> {
        self.stop_workers(state, tier_id, true);
        if idle || state.keeper.binding(tier_id).is_none() {
            return Ok(());
        }
        let reg = state.keeper.tier(tier_id).cloned().ok_or_else(|| TierError::UnknownTier(tier_id.into()))?;
        let pool = self.worker_pool(&reg.config)?;
        let generation = match state.tiers.get_mut(tier_id) {
            Some(TierRuntime::Dwt(rt)) => {
                rt.generation += 1;
                rt.generation
            }
            _ => return Err(TierError::UnknownTier(tier_id.into())),
        };
        let mut workers = Vec::new();
        for k in 0..reg.instance_count {
            let id = format!("{tier_id}/w{k}.g{generation}");
            let link = self.link_for(state, tier_id, &id)?;
            let control = Arc::new(WorkerControl::new(self.inner.opts.worker_idle, self.inner.opts.lease_ms));
            let (c, p, wid, clock) = (control.clone(), pool.clone(), id.clone(), self.inner.opts.clock.clone());
            let thread = std::thread::Builder::new()
                .name(id.clone())
                .spawn(move || {
                    let space = link.space();
                    dwt_process_loop(&wid, &p, &*space, &c, &*clock);
                })
                .map_err(|e| TierError::InvalidConfig(format!("spawning worker: {e}")))?;
            workers.push(WorkerHandle {
                id,
                control,
                thread: Some(thread),
            });
        }
        if let Some(TierRuntime::Dwt(rt)) = state.tiers.get_mut(tier_id) {
            rt.workers = workers;
        }
        Ok(())
    }

    fn tier_executions(rt: &TierRuntime) -> u64 {
        match rt {
            TierRuntime::Dwt(d) => d.retired_executions + d.workers.iter().map(|w| w.control.executions()).sum::<u64>(),
            _ => 0,
        }
    }

    /// Procedure executions by a worker tier, over all its generations.
    pub fn executions(&self, tier_id: &str) -> u64 {
        self.inner.state.lock().tiers.get(tier_id).map(Self::tier_executions).unwrap_or(0)
    }

    pub fn total_executions(&self) -> u64 {
        self.inner.state.lock().tiers.values().map(Self::tier_executions).sum()
    }

    /// The live worker ids of a worker tier.
    pub fn worker_ids(&self, tier_id: &str) -> Vec<String> {
        match self.inner.state.lock().tiers.get(tier_id) {
            Some(TierRuntime::Dwt(d)) => d.workers.iter().map(|w| w.id.clone()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn store_of(&self, dst_id: &str) -> Option<Arc<DemandStore>> {
        self.store_locked(&self.inner.state.lock(), dst_id)
    }

    pub fn dst_addr(&self, dst_id: &str) -> Option<SocketAddr> {
        self.dst_addr_locked(&self.inner.state.lock(), dst_id)
    }

    pub fn gmt_snapshot(&self) -> InstanceTopology {
        let state = self.inner.state.lock();
        let keeper = &state.keeper;
        let mut relations = Vec::new();
        for (node, dst) in &keeper.relations.node_system {
            relations.push(Relation {
                kind: RelationKind::NodeSystem,
                from: node.clone(),
                to: dst.clone(),
            });
        }
        for t in keeper.tiers() {
            if let Some(dst) = keeper.binding(&t.tier_id) {
                relations.push(Relation {
                    kind: RelationKind::Binding,
                    from: t.tier_id.clone(),
                    to: dst.to_string(),
                });
            }
        }
        let mut metrics = BTreeMap::new();
        for (id, rt) in &state.tiers {
            let mut m = TierMetrics {
                executions: Self::tier_executions(rt),
                ..TierMetrics::default()
            };
            match rt {
                TierRuntime::Dst(d) => {
                    m.pending = d.store.pending_len() as u64;
                    m.in_flight = d.store.in_flight_len() as u64;
                    m.warehouse = d.store.warehouse_len() as u64;
                    m.listen = d.server.as_ref().map(|s| s.addr().to_string());
                }
                TierRuntime::Dwt(d) => m.workers = d.workers.len() as u64,
                _ => {}
            }
            metrics.insert(id.clone(), m);
        }
        InstanceTopology {
            taken_at: self.now(),
            instances: keeper.registry.instances.values().cloned().collect(),
            nodes: keeper.nodes().to_vec(),
            tiers: keeper.tiers().to_vec(),
            relations,
            metrics,
        }
    }

    pub fn inject_fault(&self, node_id: &str, fault: Fault) -> Result<(), TierError> {
        let mut state = self.inner.state.lock();
        if state.keeper.node(node_id).is_none() {
            return Err(TierError::UnknownNode(node_id.into()));
        }
        let tiers = state.keeper.tiers_on(node_id);
        match fault {
            Fault::Kill => {
                let rt = state.nodes.get_mut(node_id).expect("node runtime");
                rt.alive.store(false, Ordering::SeqCst);
                rt.stop_beating();
                for t in &tiers {
                    match state.tiers.get_mut(&t.tier_id) {
                        Some(TierRuntime::Dwt(d)) => {
                            for w in &d.workers {
                                w.control.crash();
                            }
                        }
                        Some(TierRuntime::Dst(d)) => {
                            if let Some(server) = d.server.take() {
                                server.stop();
                            }
                        }
                        _ => {}
                    }
                }
            }
            Fault::WedgeWorkers => {
                for t in &tiers {
                    if let Some(TierRuntime::Dwt(d)) = state.tiers.get(&t.tier_id) {
                        for w in &d.workers {
                            w.control.set_wedged(true);
                        }
                    }
                }
            }
            Fault::RefuseRestart => state.nodes.get_mut(node_id).expect("node runtime").refuse_restart = true,
        }
        drop(state);
        self.publish(EventCategory::Log, "faultInjected", node_id, attrs([("fault", text(format!("{fault:?}")))]));
        Ok(())
    }

    /// Moves every tier of a failed node to the least loaded live node and
    /// marks the failed node dead.
    pub fn replace_node(&self, failed: &str) -> Result<ReplacementPlan, TierError> {
        let now = self.now();
        let mut state = self.inner.state.lock();
        let node = state
            .keeper
            .node(failed)
            .cloned()
            .ok_or_else(|| TierError::UnknownNode(failed.into()))?;
        if node.status == NodeStatus::Dead {
            return Err(illegal(&node, "replace"));
        }
        let target = state
            .keeper
            .nodes()
            .iter()
            .filter(|n| n.node_id != failed && n.instance_id == node.instance_id && n.status == NodeStatus::Started)
            .filter(|n| state.nodes.get(&n.node_id).map(|r| r.alive.load(Ordering::SeqCst)).unwrap_or(false))
            .map(|n| (state.keeper.tiers_on(&n.node_id).len(), n.node_id.clone()))
            .min()
            .map(|(_, id)| id);
        let Some(target) = target else {
            drop(state);
            self.raise(Event::new(REPLACEMENT_FAILED, failed, now));
            return Err(TierError::NoReplacementNode(failed.into()));
        };
        state.keeper.node_mut(failed).expect("node").status = NodeStatus::Dead;
        let rt = state.nodes.get_mut(failed).expect("node runtime");
        rt.alive.store(false, Ordering::SeqCst);
        rt.stop_beating();
        let tiers = state.keeper.tiers_on(failed);
        // Stores move first so migrated workers bind to their new home.
        let mut order: Vec<_> = tiers.iter().filter(|t| t.kind == TierKind::Dst).collect();
        order.extend(tiers.iter().filter(|t| t.kind != TierKind::Dst));
        let mut moved = Vec::new();
        for t in order {
            if t.kind == TierKind::Dwt {
                self.stop_workers(&mut state, &t.tier_id, true);
            }
            state.keeper.move_tier(&t.tier_id, &target);
            if t.kind == TierKind::Dst {
                if let Some(TierRuntime::Dst(old)) = state.tiers.remove(&t.tier_id) {
                    if let Some(server) = old.server {
                        server.stop();
                    }
                    drop(old.store);
                }
                let reg = state.keeper.tier(&t.tier_id).cloned().expect("tier");
                match self.build_runtime(&state, &reg, None) {
                    Ok(rt) => {
                        state.tiers.insert(t.tier_id.clone(), rt);
                    }
                    Err(e) => {
                        log::error!("restarting store {} on {target}: {e}", t.tier_id);
                        let fallback = DemandStore::with_clock(self.inner.opts.clock.clone());
                        state.tiers.insert(
                            t.tier_id.clone(),
                            TierRuntime::Dst(DstRuntime {
                                store: Arc::new(fallback),
                                server: None,
                            }),
                        );
                    }
                }
                for bound in state.keeper.bound_to(&t.tier_id) {
                    if matches!(state.tiers.get(&bound), Some(TierRuntime::Dwt(_))) && bound != t.tier_id {
                        let active = self.node_active(&state, &bound);
                        let _ = self.restart_workers(&mut state, &bound, !active);
                    }
                }
            }
            if t.kind == TierKind::Dwt && t.state != TierState::NoDstAvailable {
                state.keeper.tier_mut(&t.tier_id).expect("tier").state = TierState::Running;
                self.restart_workers(&mut state, &t.tier_id, false)?;
            } else if t.state == TierState::Suspended {
                state.keeper.tier_mut(&t.tier_id).expect("tier").state = TierState::Running;
            }
            moved.push(t.tier_id.clone());
        }
        drop(state);
        self.inner.monitor.lock().forget(failed);
        self.publish(EventCategory::Node, "nodeDead", failed, attrs([("status", text("Dead"))]));
        for t in &moved {
            self.publish(EventCategory::Tier, "tierMigrated", t, attrs([("node", text(&target))]));
        }
        let tier_list = Value::Nested(moved.iter().map(text).collect());
        self.raise(
            Event::new(NODE_REPLACED, failed, now)
                .with("target", text(&target))
                .with("tiers", tier_list),
        );
        Ok(ReplacementPlan {
            failed: failed.into(),
            target,
            tiers: moved,
        })
    }

    /// Restarts a slow node's workers. A node that refuses is marked
    /// suspected and handed to the node-failure policy.
    pub fn recover_node(&self, node_id: &str) -> Result<RecoveryPlan, TierError> {
        let now = self.now();
        let slow = self.inner.engine.lock().is_active(IN_LOW_PERFORMANCE, node_id);
        let mut state = self.inner.state.lock();
        let node = state
            .keeper
            .node(node_id)
            .cloned()
            .ok_or_else(|| TierError::UnknownNode(node_id.into()))?;
        if !slow {
            return Ok(RecoveryPlan {
                node: node_id.into(),
                restarted: Vec::new(),
            });
        }
        if node.status == NodeStatus::Dead {
            return Err(illegal(&node, "recover"));
        }
        if state.nodes.get(node_id).map(|r| r.refuse_restart).unwrap_or(false) {
            state.keeper.node_mut(node_id).expect("node").status = NodeStatus::Suspected;
            drop(state);
            self.publish(EventCategory::Node, "nodeSuspected", node_id, attrs([("status", text("Suspected"))]));
            self.raise(Event::new(PERFORMANCE_NORM_FAILED, node_id, now));
            return Err(TierError::RecoveryFailed(node_id.into()));
        }
        let mut restarted = Vec::new();
        for t in state.keeper.tiers_on(node_id) {
            if t.kind == TierKind::Dwt && t.state == TierState::Running {
                self.restart_workers(&mut state, &t.tier_id, false)?;
                restarted.push(t.tier_id);
            }
        }
        drop(state);
        for t in &restarted {
            self.publish(EventCategory::Tier, "tierRestarted", t, BTreeMap::new());
        }
        self.raise(Event::new(PERFORMANCE_NORMALIZED, node_id, now));
        Ok(RecoveryPlan {
            node: node_id.into(),
            restarted,
        })
    }

    fn observations(&self) -> Vec<NodeObservation> {
        let state = self.inner.state.lock();
        let mut out = Vec::new();
        for n in state.keeper.nodes() {
            if !matches!(n.status, NodeStatus::Started | NodeStatus::Suspected) {
                continue;
            }
            let rt = &state.nodes[&n.node_id];
            let hb = rt.heartbeat.load(Ordering::SeqCst);
            let mut completed = 0;
            let mut stores = BTreeSet::new();
            for t in state.keeper.tiers_on(&n.node_id) {
                if t.kind != TierKind::Dwt {
                    continue;
                }
                completed += state.tiers.get(&t.tier_id).map(Self::tier_executions).unwrap_or(0);
                if let Some(d) = state.keeper.binding(&t.tier_id) {
                    stores.insert(d.to_string());
                }
            }
            let pending = stores
                .iter()
                .filter_map(|d| self.store_locked(&state, d))
                .map(|s| s.pending_len())
                .sum();
            out.push(NodeObservation {
                node_id: n.node_id.clone(),
                last_heartbeat: (hb > 0).then_some(hb),
                completed,
                pending,
            });
        }
        out
    }

    /// One round of the autonomic loop: expire leases, check heartbeats and
    /// throughput, and carry out whatever the policies call for.
    pub fn autonomic_tick(&self) {
        let now = self.now();
        let stores: Vec<_> = {
            let state = self.inner.state.lock();
            state
                .tiers
                .values()
                .filter_map(|rt| match rt {
                    TierRuntime::Dst(d) => Some(d.store.clone()),
                    _ => None,
                })
                .collect()
        };
        for s in stores {
            if let Err(e) = s.expire_leases(now) {
                log::warn!("lease expiry: {e}");
            }
        }
        let observations = self.observations();
        {
            let mut monitor = self.inner.monitor.lock();
            let mut engine = self.inner.engine.lock();
            monitor.observe(&mut engine, &observations, now);
        }
        for _ in 0..4 {
            let actions = self.inner.engine.lock().step_policies();
            if actions.is_empty() {
                break;
            }
            for a in actions {
                let outcome = match a.action.as_str() {
                    START_SELF_HEALING => self.recover_node(&a.subject).map(|p| format!("{p:?}")),
                    REPLACE_NODE => self.replace_node(&a.subject).map(|p| format!("{p:?}")),
                    _ => continue,
                };
                match outcome {
                    Ok(plan) => log::info!("{} on {}: {plan}", a.action, a.subject),
                    Err(e) => {
                        log::warn!("{} on {} failed: {e}", a.action, a.subject);
                        self.publish(
                            EventCategory::Error,
                            &a.action,
                            &a.subject,
                            attrs([("code", text(e.code())), ("message", text(e.to_string()))]),
                        );
                    }
                }
            }
        }
    }

    /// Runs [`Gmt::autonomic_tick`] every `period` until the manager is
    /// dropped or [`Gmt::shutdown`] is called.
    pub fn spawn_autonomic(&self, period: Duration) -> JoinHandle<()> {
        let weak: Weak<GmtInner> = Arc::downgrade(&self.inner);
        let stop = self.inner.autonomic_stop.clone();
        std::thread::spawn(move || loop {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            match weak.upgrade() {
                Some(inner) => Gmt { inner }.autonomic_tick(),
                None => return,
            }
            std::thread::sleep(period);
        })
    }

    fn link_state(client: &TaClient, link_id: &str) -> Option<LinkState> {
        let current = client.protocol()?;
        let (local_caps, remote_caps) = client.link_caps()?;
        Some(LinkState {
            link_id: link_id.into(),
            current,
            local_caps,
            remote_caps,
        })
    }

    fn run_evaluation(
        &self,
        eval_id: &str,
        dgt_id: &str,
        geer: &Geer,
        context: &Context,
        input: Value,
        cancel: Option<Arc<AtomicBool>>,
    ) -> Result<Evaluation, TierError> {
        let (link, dst) = {
            let state = self.inner.state.lock();
            let reg = state.keeper.tier(dgt_id).ok_or_else(|| TierError::UnknownTier(dgt_id.into()))?;
            if reg.kind != TierKind::Dgt {
                return Err(TierError::WrongKind {
                    tier: dgt_id.into(),
                    kind: reg.kind,
                    expected: TierKind::Dgt,
                });
            }
            match reg.state {
                TierState::Running => {}
                TierState::Suspended => return Err(TierError::NodeNotStarted(reg.node_id.clone())),
                TierState::NoDstAvailable => return Err(TierError::NoDstAvailable),
            }
            let dst = state.keeper.binding(dgt_id).ok_or(TierError::NoDstAvailable)?.to_string();
            (self.link_for(&state, dgt_id, &format!("{dgt_id}/{eval_id}"))?, dst)
        };
        let opts = EvalOptions {
            timeout: self.inner.opts.eval_timeout,
            requester: format!("{dgt_id}/{eval_id}"),
            catalog: Some(self.inner.opts.procedures.names().map(String::from).collect()),
            cancel,
        };
        let link_id = format!("{dgt_id}->{dst}");
        let mut observer = |i: usize, stage: &StagePlan, demand: &Demand| {
            let sig = demand.signature().map(|s| s.as_str().to_string()).unwrap_or_default();
            self.publish(
                EventCategory::Evaluation,
                "stageGenerated",
                eval_id,
                attrs([
                    ("stage", text(&stage.stage_name)),
                    ("index", Value::Int(i as i64)),
                    ("signature", text(sig)),
                ]),
            );
            if stage.stage_name != CLASSIFICATION_STAGE {
                return;
            }
            let links: Vec<LinkState> = match &link {
                Link::Remote(c) => Self::link_state(c, &link_id).into_iter().collect(),
                Link::Local(_) => Vec::new(),
            };
            let switches = self.inner.engine.lock().optimize_on_classification(dgt_id, &stage.stage_name, &links, self.now());
            if let Link::Remote(client) = &link {
                for s in switches {
                    match client.switch_protocol(s.to) {
                        Ok(now_on) => self.publish(
                            EventCategory::Autonomic,
                            "protocolSwitched",
                            &s.link_id,
                            attrs([("from", text(s.from.to_string())), ("to", text(now_on.to_string()))]),
                        ),
                        Err(e) => log::warn!("switching {} to {}: {e}", s.link_id, s.to),
                    }
                }
            }
        };
        let space = link.space();
        let out = dgt_evaluate(geer, context, input, &*space, &opts, &mut observer);
        if let Link::Remote(c) = &link {
            self.publish(
                EventCategory::Log,
                "linkLog",
                &link_id,
                attrs([(
                    "frames",
                    Value::Nested(
                        c.sent_log()
                            .into_iter()
                            .map(|(k, p)| Value::Nested(vec![text(format!("{k:?}")), text(p.to_string())]))
                            .collect(),
                    ),
                )]),
            );
        }
        out
    }

    fn next_eval_id(&self) -> String {
        let mut state = self.inner.state.lock();
        let id = format!("eval-{}", state.next_id);
        state.next_id += 1;
        id
    }

    fn finish(&self, eval_id: &str, outcome: &Result<Evaluation, TierError>) {
        let now = self.now();
        let mut evals = self.inner.evaluations.lock();
        let Some((rec, _)) = evals.get_mut(eval_id) else { return };
        rec.finished_at = Some(now);
        match outcome {
            Ok(ev) => {
                rec.status = EvalStatus::Completed;
                rec.result = Some(ev.result.value.clone());
                rec.stages = ev.stages.clone();
            }
            Err(TierError::Cancelled) => rec.status = EvalStatus::Cancelled,
            Err(e) => {
                rec.status = EvalStatus::Failed;
                rec.error_code = Some(e.code().into());
                rec.error = Some(e.to_string());
            }
        }
        let status = rec.status;
        let mut a = attrs([("status", text(format!("{status:?}"))), ("dgt", text(&rec.dgt_id))]);
        if let Some(v) = &rec.result {
            a.insert("result".into(), v.clone());
        }
        if let Some(e) = &rec.error {
            a.insert("error".into(), text(e));
        }
        drop(evals);
        let name = match status {
            EvalStatus::Completed => "evaluationCompleted",
            EvalStatus::Cancelled => "evaluationCancelled",
            _ => "evaluationFailed",
        };
        let category = if status == EvalStatus::Failed { EventCategory::Error } else { EventCategory::Evaluation };
        self.publish(category, name, eval_id, a);
    }

    fn begin(&self, dgt_id: &str, geer: &Geer) -> (String, Arc<AtomicBool>) {
        let eval_id = self.next_eval_id();
        let cancel = Arc::new(AtomicBool::new(false));
        let rec = EvalRecord {
            eval_id: eval_id.clone(),
            dgt_id: dgt_id.into(),
            geer_id: geer.geer_id.clone(),
            status: EvalStatus::Running,
            result: None,
            error_code: None,
            error: None,
            stages: Vec::new(),
            started_at: self.now(),
            finished_at: None,
        };
        self.inner.evaluations.lock().insert(eval_id.clone(), (rec, cancel.clone()));
        self.publish(
            EventCategory::Evaluation,
            "evaluationStarted",
            &eval_id,
            attrs([("dgt", text(dgt_id)), ("geer", text(&geer.geer_id))]),
        );
        (eval_id, cancel)
    }

    /// Runs an evaluation on a generator tier and waits for it.
    pub fn evaluate(&self, dgt_id: &str, geer: &Geer, context: &Context, input: Value) -> Result<Evaluation, TierError> {
        let (eval_id, cancel) = self.begin(dgt_id, geer);
        let out = self.run_evaluation(&eval_id, dgt_id, geer, context, input, Some(cancel));
        self.finish(&eval_id, &out);
        out
    }

    /// Starts an evaluation in the background and returns its id.
    pub fn start_evaluation(&self, dgt_id: &str, geer: Geer, context: Context, input: Value) -> Result<String, TierError> {
        {
            let state = self.inner.state.lock();
            let reg = state.keeper.tier(dgt_id).ok_or_else(|| TierError::UnknownTier(dgt_id.into()))?;
            if reg.kind != TierKind::Dgt {
                return Err(TierError::WrongKind {
                    tier: dgt_id.into(),
                    kind: reg.kind,
                    expected: TierKind::Dgt,
                });
            }
        }
        let (eval_id, cancel) = self.begin(dgt_id, &geer);
        let gmt = self.clone();
        let (id, dgt) = (eval_id.clone(), dgt_id.to_string());
        std::thread::spawn(move || {
            let out = gmt.run_evaluation(&id, &dgt, &geer, &context, input, Some(cancel));
            gmt.finish(&id, &out);
        });
        Ok(eval_id)
    }

    pub fn evaluation(&self, eval_id: &str) -> Option<EvalRecord> {
        self.inner.evaluations.lock().get(eval_id).map(|(r, _)| r.clone())
    }

    pub fn evaluations(&self) -> Vec<EvalRecord> {
        self.inner.evaluations.lock().values().map(|(r, _)| r.clone()).collect()
    }

    /// Asks a running evaluation to stop. Returns false if it had already
    /// finished.
    pub fn cancel_evaluation(&self, eval_id: &str) -> Result<bool, TierError> {
        let evals = self.inner.evaluations.lock();
        let (rec, cancel) = evals.get(eval_id).ok_or_else(|| TierError::UnknownEvaluation(eval_id.into()))?;
        if rec.status != EvalStatus::Running {
            return Ok(false);
        }
        cancel.store(true, Ordering::SeqCst);
        Ok(true)
    }

    /// Waits until an evaluation leaves the running state.
    pub fn wait_evaluation(&self, eval_id: &str, timeout: Duration) -> Option<EvalRecord> {
        let deadline = Instant::now() + timeout;
        loop {
            let rec = self.evaluation(eval_id)?;
            if rec.status != EvalStatus::Running || Instant::now() >= deadline {
                return Some(rec);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Rebuilds a saved topology in an empty manager. Nodes come back
    /// started; records keep their ids and order.
    pub fn restore(
        &self,
        instance: GipsyInstance,
        nodes: Vec<NodeRegistration>,
        tiers: Vec<TierRegistration>,
        bindings: Vec<(String, String)>,
    ) -> Result<InstanceTopology, TierError> {
        let mut keeper = GmtInfoKeeper::new();
        keeper.add_instance(instance.clone());
        for n in &nodes {
            if n.instance_id != instance.instance_id {
                return Err(TierError::Integrity(format!("node {} names instance {}", n.node_id, n.instance_id)));
            }
            if !valid_address(&n.address) {
                return Err(TierError::BadAddress(n.address.clone()));
            }
            if keeper.node(&n.node_id).is_some() {
                return Err(TierError::Integrity(format!("duplicate node {}", n.node_id)));
            }
            let mut n = n.clone();
            n.status = NodeStatus::Started;
            keeper.registry.nodes.push(n);
        }
        let bound: BTreeMap<_, _> = bindings.iter().cloned().collect();
        for t in &tiers {
            if keeper.node(&t.node_id).is_none() {
                return Err(TierError::Integrity(format!("tier {} on missing node {}", t.tier_id, t.node_id)));
            }
            if keeper.tier(&t.tier_id).is_some() {
                return Err(TierError::Integrity(format!("duplicate tier {}", t.tier_id)));
            }
            t.config.validate()?;
            let mut t = t.clone();
            t.state = if matches!(t.kind, TierKind::Dgt | TierKind::Dwt) && !bound.contains_key(&t.tier_id) {
                TierState::NoDstAvailable
            } else {
                TierState::Running
            };
            keeper.add_tier(t);
        }
        for (from, to) in &bindings {
            keeper.bind(from, to);
        }
        keeper.audit().map_err(TierError::Integrity)?;

        let mut state = self.inner.state.lock();
        if !state.keeper.nodes().is_empty() {
            return Err(TierError::Integrity("manager already has nodes".into()));
        }
        let mut runtimes = BTreeMap::new();
        let staged = GmtState {
            keeper: keeper.clone(),
            nodes: BTreeMap::new(),
            tiers: BTreeMap::new(),
            next_id: 0,
        };
        let mut staged = staged;
        for t in keeper.tiers().iter().filter(|t| t.kind == TierKind::Dst) {
            let rt = self.build_runtime(&staged, t, None)?;
            staged.tiers.insert(t.tier_id.clone(), rt);
        }
        for t in keeper.tiers().iter().filter(|t| t.kind != TierKind::Dst) {
            let rt = self.build_runtime(&staged, t, keeper.binding(&t.tier_id))?;
            runtimes.insert(t.tier_id.clone(), rt);
        }
        runtimes.append(&mut staged.tiers);
        let max_id = nodes
            .iter()
            .map(|n| n.node_id.as_str())
            .chain(tiers.iter().map(|t| t.tier_id.as_str()))
            .chain(std::iter::once(instance.instance_id.as_str()))
            .filter_map(id_number)
            .max()
            .unwrap_or(0);
        state.next_id = state.next_id.max(max_id + 1);
        state.keeper.registry.nodes = keeper.registry.nodes.clone();
        state.keeper.registry.tiers = keeper.registry.tiers.clone();
        state.keeper.registry.instances.insert(instance.instance_id.clone(), instance);
        state.keeper.relations = keeper.relations.clone();
        state.tiers = runtimes;
        let clock = self.inner.opts.clock.clone();
        let interval = self.inner.opts.heartbeat.interval_ms;
        for n in &nodes {
            let mut rt = NodeRuntime::new();
            rt.start_beating(clock.clone(), interval);
            state.nodes.insert(n.node_id.clone(), rt);
        }
        for t in keeper.tiers().iter().filter(|t| t.kind == TierKind::Dwt) {
            self.restart_workers(&mut state, &t.tier_id, false)?;
        }
        drop(state);
        self.publish(EventCategory::Log, "networkLoaded", "", attrs([("nodes", Value::Int(nodes.len() as i64))]));
        Ok(self.gmt_snapshot())
    }

    /// Stops every thread the manager started.
    pub fn shutdown(&self) {
        self.inner.autonomic_stop.store(true, Ordering::SeqCst);
        for (_, cancel) in self.inner.evaluations.lock().values() {
            cancel.store(true, Ordering::SeqCst);
        }
        let mut state = self.inner.state.lock();
        let ids: Vec<_> = state.tiers.keys().cloned().collect();
        for id in &ids {
            if matches!(state.tiers.get(id), Some(TierRuntime::Dwt(_))) {
                self.stop_workers(&mut state, id, false);
            }
        }
        for rt in state.tiers.values_mut() {
            if let TierRuntime::Dst(d) = rt {
                if let Some(server) = d.server.take() {
                    server.stop();
                }
            }
        }
        for rt in state.nodes.values_mut() {
            rt.stop_beating();
        }
    }
}

impl Drop for GmtInner {
    fn drop(&mut self) {
        self.autonomic_stop.store(true, Ordering::SeqCst);
        let state = self.state.get_mut();
        for rt in state.tiers.values_mut() {
            match rt {
                TierRuntime::Dwt(d) => {
                    for w in &d.workers {
                        w.control.stop();
                    }
                    for w in &mut d.workers {
                        if let Some(t) = w.thread.take() {
                            let _ = t.join();
                        }
                    }
                }
                TierRuntime::Dst(d) => {
                    if let Some(server) = d.server.take() {
                        server.stop();
                    }
                }
                _ => {}
            }
        }
        for rt in state.nodes.values_mut() {
            rt.stop_beating();
        }
    }
}
