use std::time::{Duration, Instant};

use proptest::prelude::*;

use edgrid_core::autonomic::vocab::*;
use edgrid_core::autonomic::HeartbeatConfig;
use edgrid_core::demand::{Context, Demand, Geer, StagePlan, Value};
use edgrid_core::marf::{build_marf_geer, run_local, MarfParams, ResultSet, ToneSynth, DEFAULT_SUBJECTS};
use edgrid_core::tiers::{
    keys, BusEvent, Configuration, EvalStatus, Fault, Gmt, GmtOptions, NodeAction, NodeStatus, RelationKind, TierError,
    TierKind, TierState,
};

const INSTANCE: &str = "instance-1";

fn gmt() -> Gmt {
    Gmt::new(GmtOptions {
        heartbeat: HeartbeatConfig {
            interval_ms: 20,
            missed_limit: 3,
            performance_window_ms: 150,
        },
        eval_timeout: Duration::from_secs(20),
        ..GmtOptions::default()
    })
}

fn started(g: &Gmt, name: &str, port: u16) -> String {
    let n = g.register_node(name, &format!("127.0.0.1:{port}"), "#3366cc", INSTANCE).unwrap();
    g.node_lifecycle(&n.node_id, NodeAction::Start).unwrap();
    n.node_id
}

fn alloc(g: &Gmt, node: &str, kind: TierKind) -> String {
    g.allocate_tier(node, kind, 1, &Configuration::new()).unwrap().tier_id
}

fn identity_geer() -> Geer {
    Geer::new("g", "p", vec![StagePlan::new("only", "identity", vec![])]).unwrap()
}

fn names(events: &[BusEvent]) -> Vec<&str> {
    events.iter().map(|e| e.name.as_str()).collect()
}

fn wait_for(what: &str, limit: Duration, mut done: impl FnMut() -> bool) {
    let deadline = Instant::now() + limit;
    while !done() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn node_registration_is_an_upsert() {
    let g = gmt();
    let a = g.register_node("n1", "127.0.0.1:7001", "#ff0000", INSTANCE).unwrap();
    assert_eq!(g.gmt_snapshot().nodes.len(), 1);
    let b = g.register_node("n1", "127.0.0.1:7001", "#00ff00", INSTANCE).unwrap();
    assert_eq!(a.node_id, b.node_id);
    let snap = g.gmt_snapshot();
    assert_eq!(snap.nodes.len(), 1);
    assert_eq!(snap.nodes[0].color, "#00ff00");
    assert_eq!(
        g.register_node("n2", "127.0.0.1:7002", "#ff0000", "nope"),
        Err(TierError::UnknownInstance("nope".into()))
    );
    assert!(matches!(g.register_node("n2", "nowhere", "#ff0000", INSTANCE), Err(TierError::BadAddress(_))));
    assert!(matches!(g.register_node("n2", "h:1", "red", INSTANCE), Err(TierError::BadColor(_))));
    g.audit().unwrap();
}

#[test]
fn allocation_rules() {
    let g = gmt();
    let idle = g.register_node("idle", "127.0.0.1:7000", "#000000", INSTANCE).unwrap();
    assert_eq!(
        g.allocate_tier(&idle.node_id, TierKind::Dst, 1, &Configuration::new()),
        Err(TierError::NodeNotStarted(idle.node_id.clone()))
    );
    assert!(matches!(
        g.allocate_tier("node-99", TierKind::Dst, 1, &Configuration::new()),
        Err(TierError::UnknownNode(_))
    ));
    let n = started(&g, "n1", 7001);
    assert_eq!(
        g.allocate_tier(&n, TierKind::Dwt, 1, &Configuration::new()),
        Err(TierError::NoDstAvailable)
    );
    let mut config = Configuration::from_pairs([("max.demands", "10")]).unwrap();
    let dst = g.allocate_tier(&n, TierKind::Dst, 1, &config).unwrap();
    config.set("max.demands", "99").unwrap();
    assert_eq!(g.keeper().tier(&dst.tier_id).unwrap().config.get("max.demands"), Some("10"));
    assert_eq!(g.keeper().relations.node_system.get(&n), Some(&dst.tier_id));
    let bad = Configuration::from_pairs([(keys::DWT_PROCEDURES, "nope")]).unwrap();
    assert!(matches!(g.allocate_tier(&n, TierKind::Dwt, 1, &bad), Err(TierError::InvalidConfig(_))));
    assert!(matches!(
        g.allocate_tier(&n, TierKind::Dwt, 0, &Configuration::new()),
        Err(TierError::InvalidConfig(_))
    ));
    g.audit().unwrap();
}

#[test]
fn snapshot_shapes() {
    let g = gmt();
    let empty = g.gmt_snapshot();
    assert!(empty.nodes.is_empty() && empty.tiers.is_empty());
    let n = started(&g, "n1", 7001);
    let dst = alloc(&g, &n, TierKind::Dst);
    let dwt = alloc(&g, &n, TierKind::Dwt);
    let snap = g.gmt_snapshot();
    assert_eq!(snap.nodes.len(), 1);
    assert_eq!(snap.tiers.len(), 2);
    assert!(snap
        .relations
        .iter()
        .any(|r| r.kind == RelationKind::Binding && r.from == dwt && r.to == dst));
    assert_eq!(snap.metrics[&dwt].workers, 1);
    snap.check().unwrap();
}

#[test]
fn deallocation_rebinds_or_orphans() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    let d1 = alloc(&g, &n, TierKind::Dst);
    let d2 = alloc(&g, &n, TierKind::Dst);
    let dgt = alloc(&g, &n, TierKind::Dgt);
    let dwt = alloc(&g, &n, TierKind::Dwt);
    // Least loaded with ties broken by id: the generator takes d1, the worker d2.
    assert_eq!(g.keeper().binding(&dgt), Some(d1.as_str()));
    assert_eq!(g.keeper().binding(&dwt), Some(d2.as_str()));

    assert!(g.deallocate_tier(&d1));
    assert_eq!(g.keeper().binding(&dgt), Some(d2.as_str()));
    g.audit().unwrap();
    assert!(g.deallocate_tier(&d2));
    let k = g.keeper();
    assert_eq!(k.tier(&dgt).unwrap().state, TierState::NoDstAvailable);
    assert_eq!(k.tier(&dwt).unwrap().state, TierState::NoDstAvailable);
    assert!(g.worker_ids(&dwt).is_empty());
    g.audit().unwrap();

    // A new store adopts the orphans.
    let d3 = alloc(&g, &n, TierKind::Dst);
    assert_eq!(g.keeper().binding(&dwt), Some(d3.as_str()));
    assert_eq!(g.worker_ids(&dwt).len(), 1);
    assert!(g.deallocate_tier(&dwt));
    assert_eq!(g.keeper().binding(&dwt), None);
    assert!(!g.deallocate_tier(&dwt));
    assert!(!g.deallocate_tier("unknown"));
    g.audit().unwrap();
}

#[test]
fn lifecycle_transitions() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    let dst = alloc(&g, &n, TierKind::Dst);
    let dwt = alloc(&g, &n, TierKind::Dwt);
    assert!(matches!(
        g.node_lifecycle(&n, NodeAction::Start),
        Err(TierError::IllegalTransition { from: NodeStatus::Started, .. })
    ));
    assert_eq!(g.node_lifecycle(&n, NodeAction::Stop).unwrap().status, NodeStatus::Stopped);
    assert_eq!(g.keeper().tier(&dwt).unwrap().state, TierState::Suspended);

    // A stopped node's worker pulls nothing.
    let store = g.store_of(&dst).unwrap();
    let d = Demand::procedural("g", "p", "echo", vec![Value::Int(1)], Context::new());
    store.deposit_demand(&d).unwrap();
    std::thread::sleep(Duration::from_millis(40));
    assert_eq!(store.pending_len(), 1);

    g.node_lifecycle(&n, NodeAction::Start).unwrap();
    let r = store.wait_result(&d.signature().unwrap(), "t", Duration::from_secs(5));
    assert!(r.is_some());
    assert_eq!(g.keeper().tier(&dwt).unwrap().state, TierState::Running);
    assert!(matches!(
        g.node_lifecycle("node-99", NodeAction::Start),
        Err(TierError::UnknownNode(_))
    ));
    g.audit().unwrap();
}

#[test]
fn dead_node_cannot_start() {
    let g = gmt();
    let a = started(&g, "a", 7001);
    let _b = started(&g, "b", 7002);
    alloc(&g, &a, TierKind::Dst);
    g.replace_node(&a).unwrap();
    assert!(matches!(
        g.node_lifecycle(&a, NodeAction::Start),
        Err(TierError::IllegalTransition { from: NodeStatus::Dead, .. })
    ));
}

#[test]
fn one_stage_identity_plan() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    let dst = alloc(&g, &n, TierKind::Dst);
    let dgt = alloc(&g, &n, TierKind::Dgt);
    alloc(&g, &n, TierKind::Dwt);
    let ev = g.evaluate(&dgt, &identity_geer(), &Context::new(), Value::Text("v".into())).unwrap();
    assert_eq!(ev.value(), &Value::Text("v".into()));
    assert_eq!(g.store_of(&dst).unwrap().warehouse_len(), 1);

    let bad = Geer::new("g", "p", vec![StagePlan::new("s", "no.such.proc", vec![])]).unwrap();
    match g.evaluate(&dgt, &bad, &Context::new(), Value::Int(0)) {
        Err(TierError::StageFailed { message, .. }) => assert!(message.contains("no.such.proc")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn marf_plan_twice_is_all_cached() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    let dst = alloc(&g, &n, TierKind::Dst);
    let dgt = alloc(&g, &n, TierKind::Dgt);
    let dwt = alloc(&g, &n, TierKind::Dwt);
    let params = MarfParams::default();
    let mut synth = ToneSynth::new(11);
    let training = synth.train(&params, &DEFAULT_SUBJECTS, 3).unwrap();
    let geer = build_marf_geer(&params, &training).unwrap();
    let input = synth.tone(450.0).to_value().unwrap();

    let first = g.evaluate(&dgt, &geer, &Context::new(), input.clone()).unwrap();
    assert_eq!(g.executions(&dwt), 4);
    let store = g.store_of(&dst).unwrap();
    let cached_before = store.stats().cached.load(std::sync::atomic::Ordering::SeqCst);
    let second = g.evaluate(&dgt, &geer, &Context::new(), input).unwrap();
    assert_eq!(g.executions(&dwt), 4);
    assert!(second.all_cached());
    assert_eq!(second.stages.len(), 4);
    assert_eq!(store.stats().cached.load(std::sync::atomic::Ordering::SeqCst) - cached_before, 4);
    assert_eq!(first.result.value, second.result.value);
    assert_eq!(ResultSet::from_value(second.value()).unwrap().best(), Some(2));
}

#[test]
fn grid_matches_in_process_composition() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    alloc(&g, &n, TierKind::Dst);
    let dgt = alloc(&g, &n, TierKind::Dgt);
    alloc(&g, &n, TierKind::Dwt);
    let params = MarfParams::default();
    let mut synth = ToneSynth::new(3);
    let training = synth.train(&params, &DEFAULT_SUBJECTS, 2).unwrap();
    let geer = build_marf_geer(&params, &training).unwrap();
    for freq in [200.0, 333.0, 450.0, 800.0, 1200.0] {
        let source = synth.tone(freq);
        let local = run_local(&params, &training, &source).unwrap();
        let grid = g.evaluate(&dgt, &geer, &Context::new(), source.to_value().unwrap()).unwrap();
        assert_eq!(ResultSet::from_value(grid.value()).unwrap(), local);
    }
}

#[test]
fn split_pools_cooperate() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    alloc(&g, &n, TierKind::Dst);
    let dgt = alloc(&g, &n, TierKind::Dgt);
    let only = |procs: &str| Configuration::from_pairs([(keys::DWT_PROCEDURES, procs)]).unwrap();
    let lpc = g.allocate_tier(&n, TierKind::Dwt, 1, &only("marf.load_sample,marf.preprocess,marf.lpc")).unwrap();
    let cls = g.allocate_tier(&n, TierKind::Dwt, 1, &only("marf.classify")).unwrap();
    let params = MarfParams::default();
    let mut synth = ToneSynth::new(8);
    let training = synth.train(&params, &DEFAULT_SUBJECTS, 2).unwrap();
    let geer = build_marf_geer(&params, &training).unwrap();
    let ev = g.evaluate(&dgt, &geer, &Context::new(), synth.tone(800.0).to_value().unwrap()).unwrap();
    assert_eq!(ResultSet::from_value(ev.value()).unwrap().best(), Some(3));
    assert_eq!(g.executions(&lpc.tier_id), 3);
    assert_eq!(g.executions(&cls.tier_id), 1);
}

#[test]
fn background_evaluation_and_cancel() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    alloc(&g, &n, TierKind::Dst);
    let dgt = alloc(&g, &n, TierKind::Dgt);
    let id = g.start_evaluation(&dgt, identity_geer(), Context::new(), Value::Int(5)).unwrap();
    // No worker yet: the evaluation waits until cancelled.
    std::thread::sleep(Duration::from_millis(30));
    assert!(g.cancel_evaluation(&id).unwrap());
    let rec = g.wait_evaluation(&id, Duration::from_secs(5)).unwrap();
    assert_eq!(rec.status, EvalStatus::Cancelled);
    assert!(!g.cancel_evaluation(&id).unwrap());
    assert!(matches!(g.cancel_evaluation("eval-0"), Err(TierError::UnknownEvaluation(_))));

    alloc(&g, &n, TierKind::Dwt);
    let id = g.start_evaluation(&dgt, identity_geer(), Context::new(), Value::Int(6)).unwrap();
    let rec = g.wait_evaluation(&id, Duration::from_secs(5)).unwrap();
    assert_eq!(rec.status, EvalStatus::Completed);
    assert_eq!(rec.result, Some(Value::Int(6)));
    assert!(matches!(
        g.start_evaluation(&n, identity_geer(), Context::new(), Value::Int(0)),
        Err(TierError::UnknownTier(_))
    ));
}

#[test]
fn killed_worker_node_is_replaced_and_evaluation_completes() {
    let g = gmt();
    let a = started(&g, "a", 7001);
    let b = started(&g, "b", 7002);
    alloc(&g, &a, TierKind::Dst);
    let dgt = alloc(&g, &a, TierKind::Dgt);
    let dwt = alloc(&g, &b, TierKind::Dwt);
    let events = g.bus().subscribe();
    let _loop = g.spawn_autonomic(Duration::from_millis(10));
    g.inject_fault(&b, Fault::Kill).unwrap();
    let id = g.start_evaluation(&dgt, identity_geer(), Context::new(), Value::Int(1)).unwrap();
    let rec = g.wait_evaluation(&id, Duration::from_secs(10)).unwrap();
    assert_eq!(rec.status, EvalStatus::Completed);
    assert_eq!(g.keeper().node(&b).unwrap().status, NodeStatus::Dead);
    assert_eq!(g.keeper().tier(&dwt).unwrap().node_id, a);
    let seen: Vec<_> = events.try_iter().filter(|e| e.subject == b).collect();
    let order: Vec<_> = names(&seen).into_iter().filter(|n| [NODE_DOWN, NODE_REPLACED].contains(n)).collect();
    assert_eq!(order, [NODE_DOWN, NODE_REPLACED]);
    g.audit().unwrap();
    g.shutdown();
}

#[test]
fn wedged_workers_are_restarted() {
    let g = gmt();
    let a = started(&g, "a", 7001);
    let dst = alloc(&g, &a, TierKind::Dst);
    let dwt = alloc(&g, &a, TierKind::Dwt);
    let before = g.worker_ids(&dwt);
    g.inject_fault(&a, Fault::WedgeWorkers).unwrap();
    let d = Demand::procedural("g", "p", "echo", vec![Value::Int(2)], Context::new());
    let store = g.store_of(&dst).unwrap();
    store.deposit_demand(&d).unwrap();
    let events = g.bus().subscribe();
    let _loop = g.spawn_autonomic(Duration::from_millis(10));
    assert!(store.wait_result(&d.signature().unwrap(), "t", Duration::from_secs(10)).is_some());
    assert_ne!(g.worker_ids(&dwt), before);
    wait_for("normalization", Duration::from_secs(5), || !g.engine().lock().is_active(IN_LOW_PERFORMANCE, &a));
    let seen: Vec<_> = events.try_iter().filter(|e| e.subject == a).collect();
    let order: Vec<_> = names(&seen)
        .into_iter()
        .filter(|n| [LOW_PERFORMANCE_DETECTED, PERFORMANCE_NORMALIZED].contains(n))
        .collect();
    assert_eq!(order, [LOW_PERFORMANCE_DETECTED, PERFORMANCE_NORMALIZED]);
    assert_eq!(g.keeper().node(&a).unwrap().status, NodeStatus::Started);
    g.shutdown();
}

#[test]
fn failed_recovery_escalates_to_replacement() {
    let g = gmt();
    let a = started(&g, "a", 7001);
    let b = started(&g, "b", 7002);
    let dst = alloc(&g, &b, TierKind::Dst);
    let dwt = alloc(&g, &a, TierKind::Dwt);
    g.inject_fault(&a, Fault::WedgeWorkers).unwrap();
    g.inject_fault(&a, Fault::RefuseRestart).unwrap();
    let d = Demand::procedural("g", "p", "echo", vec![Value::Int(3)], Context::new());
    let store = g.store_of(&dst).unwrap();
    store.deposit_demand(&d).unwrap();
    let events = g.bus().subscribe();
    let _loop = g.spawn_autonomic(Duration::from_millis(10));
    assert!(store.wait_result(&d.signature().unwrap(), "t", Duration::from_secs(10)).is_some());
    assert_eq!(g.keeper().node(&a).unwrap().status, NodeStatus::Dead);
    assert_eq!(g.keeper().tier(&dwt).unwrap().node_id, b);
    let seen: Vec<_> = events.try_iter().filter(|e| e.subject == a).collect();
    let order: Vec<_> = names(&seen)
        .into_iter()
        .filter(|n| [LOW_PERFORMANCE_DETECTED, PERFORMANCE_NORM_FAILED, NODE_REPLACED].contains(n))
        .collect();
    assert_eq!(order, [LOW_PERFORMANCE_DETECTED, PERFORMANCE_NORM_FAILED, NODE_REPLACED]);
    g.shutdown();
}

#[test]
fn replacement_without_a_live_node_fails() {
    let g = gmt();
    let a = started(&g, "a", 7001);
    alloc(&g, &a, TierKind::Dst);
    assert_eq!(g.replace_node(&a), Err(TierError::NoReplacementNode(a.clone())));
    let last: Vec<_> = g.engine().lock().recent_events().map(|e| e.name.clone()).collect();
    assert_eq!(last.last().map(String::as_str), Some(REPLACEMENT_FAILED));
    assert_eq!(g.recover_node(&a).unwrap().restarted, Vec::<String>::new());
}

#[test]
fn classification_switches_tcp_generator_to_binary() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    let listen = Configuration::from_pairs([(keys::DST_LISTEN, "127.0.0.1:0")]).unwrap();
    g.allocate_tier(&n, TierKind::Dst, 1, &listen).unwrap();
    let tcp_text = Configuration::from_pairs([(keys::TRANSPORT, "tcp"), (keys::PROTOCOL, "TcpText")]).unwrap();
    let dgt = g.allocate_tier(&n, TierKind::Dgt, 1, &tcp_text).unwrap().tier_id;
    alloc(&g, &n, TierKind::Dwt);
    let params = MarfParams::default();
    let mut synth = ToneSynth::new(21);
    let training = synth.train(&params, &DEFAULT_SUBJECTS, 2).unwrap();
    let geer = build_marf_geer(&params, &training).unwrap();
    let events = g.bus().subscribe();
    let ev = g.evaluate(&dgt, &geer, &Context::new(), synth.tone(200.0).to_value().unwrap()).unwrap();
    assert_eq!(ResultSet::from_value(ev.value()).unwrap().best(), Some(1));
    let all: Vec<_> = events.try_iter().collect();
    let log = all.iter().find(|e| e.name == "linkLog").expect("link log");
    let frames = log.attributes["frames"].as_nested().unwrap();
    let deposits: Vec<&str> = frames
        .iter()
        .filter_map(|f| {
            let f = f.as_nested()?;
            (f[0].as_text()? == "DepositDemand").then(|| f[1].as_text().unwrap())
        })
        .collect();
    assert_eq!(deposits, ["TcpText", "TcpText", "TcpText", "TcpBinary"]);
    assert!(all.iter().any(|e| e.name == "protocolSwitched"));
    assert!(names(&all).contains(&OPTIMIZATION_SUCCEEDED));
}

#[test]
fn tcp_workers_reach_their_store() {
    let g = gmt();
    let n = started(&g, "n1", 7001);
    let listen = Configuration::from_pairs([(keys::DST_LISTEN, "127.0.0.1:0")]).unwrap();
    g.allocate_tier(&n, TierKind::Dst, 1, &listen).unwrap();
    let dgt = alloc(&g, &n, TierKind::Dgt);
    let tcp = Configuration::from_pairs([(keys::TRANSPORT, "tcp")]).unwrap();
    g.allocate_tier(&n, TierKind::Dwt, 2, &tcp).unwrap();
    let ev = g.evaluate(&dgt, &identity_geer(), &Context::new(), Value::Int(9)).unwrap();
    assert_eq!(ev.value(), &Value::Int(9));

    let n2 = started(&g, "n2", 7002);
    alloc(&g, &n2, TierKind::Dst);
    assert!(matches!(
        g.allocate_tier(&n2, TierKind::Dwt, 1, &tcp),
        Err(TierError::InvalidConfig(_))
    ));
}

#[test]
fn restore_reproduces_a_topology() {
    let g = gmt();
    let a = started(&g, "a", 7001);
    let b = started(&g, "b", 7002);
    alloc(&g, &a, TierKind::Dst);
    alloc(&g, &b, TierKind::Dwt);
    alloc(&g, &b, TierKind::Dgt);
    let snap = g.gmt_snapshot();
    let k = g.keeper();
    let bindings: Vec<_> = k.relations.dgt_dwt.clone().into_iter().collect();

    let h = gmt();
    let restored = h
        .restore(snap.instances[0].clone(), k.nodes().to_vec(), k.tiers().to_vec(), bindings.clone())
        .unwrap();
    assert_eq!(restored.nodes, snap.nodes);
    assert_eq!(restored.tiers, snap.tiers);
    assert_eq!(restored.relations, snap.relations);
    h.audit().unwrap();
    // New ids do not collide with restored ones.
    let c = started(&h, "c", 7003);
    assert!(!snap.nodes.iter().any(|n| n.node_id == c));
    assert!(matches!(
        h.restore(snap.instances[0].clone(), vec![], vec![], vec![]),
        Err(TierError::Integrity(_))
    ));

    let mut dangling = k.tiers().to_vec();
    dangling[0].node_id = "node-404".into();
    assert!(matches!(
        gmt().restore(snap.instances[0].clone(), k.nodes().to_vec(), dangling, bindings),
        Err(TierError::Integrity(_))
    ));
}

#[derive(Debug, Clone)]
enum Op {
    Register(u8),
    Start(u8),
    Stop(u8),
    Alloc(u8, u8),
    Dealloc(u8),
    Replace(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..4).prop_map(Op::Register),
        (0u8..4).prop_map(Op::Start),
        (0u8..4).prop_map(Op::Stop),
        (0u8..4, 0u8..3).prop_map(|(n, k)| Op::Alloc(n, k)),
        (0u8..8).prop_map(Op::Dealloc),
        (0u8..4).prop_map(Op::Replace),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn churn_keeps_integrity(ops in proptest::collection::vec(op(), 1..25)) {
        let g = gmt();
        for op in ops {
            let nodes: Vec<String> = g.keeper().nodes().iter().map(|n| n.node_id.clone()).collect();
            let tiers: Vec<String> = g.keeper().tiers().iter().map(|t| t.tier_id.clone()).collect();
            let pick = |v: &[String], i: u8| v.get(i as usize % v.len().max(1)).cloned();
            match op {
                Op::Register(i) => {
                    g.register_node(&format!("n{i}"), &format!("127.0.0.1:{}", 7000 + i as u16), "#abcdef", INSTANCE).unwrap();
                }
                Op::Start(i) => if let Some(n) = pick(&nodes, i) { let _ = g.node_lifecycle(&n, NodeAction::Start); },
                Op::Stop(i) => if let Some(n) = pick(&nodes, i) { let _ = g.node_lifecycle(&n, NodeAction::Stop); },
                Op::Alloc(i, k) => if let Some(n) = pick(&nodes, i) {
                    let kind = [TierKind::Dst, TierKind::Dgt, TierKind::Dwt][k as usize];
                    let _ = g.allocate_tier(&n, kind, 1, &Configuration::new());
                },
                Op::Dealloc(i) => if let Some(t) = pick(&tiers, i) { g.deallocate_tier(&t); },
                Op::Replace(i) => if let Some(n) = pick(&nodes, i) { let _ = g.replace_node(&n); },
            }
            prop_assert_eq!(g.audit(), Ok(()));
            prop_assert_eq!(g.gmt_snapshot().check(), Ok(()));
        }
        g.shutdown();
    }
}
