//! The worker tier's demand processing loop.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use crate::clock::Clock;
use crate::demand::DemandResult;
use crate::procedure::ProcedurePool;
use crate::store::DemandSpace;

/// Shared switches and counters for one worker loop.
#[derive(Debug)]
pub struct WorkerControl {
    stop: AtomicBool,
    crashed: AtomicBool,
    wedged: AtomicBool,
    executions: AtomicU64,
    failures: AtomicU64,
    skipped: AtomicU64,
    last_active: AtomicU64,
    idle: Duration,
    lease_ms: u64,
}

impl Default for WorkerControl {
    fn default() -> Self {
        Self::new(Duration::from_millis(2), 30_000)
    }
}

impl WorkerControl {
    pub fn new(idle: Duration, lease_ms: u64) -> Self {
        Self {
            stop: AtomicBool::new(false),
            crashed: AtomicBool::new(false),
            wedged: AtomicBool::new(false),
            executions: AtomicU64::new(0),
            failures: AtomicU64::new(0),
            skipped: AtomicU64::new(0),
            last_active: AtomicU64::new(0),
            idle,
            lease_ms,
        }
    }

    /// Asks the loop to finish its current demand and return.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Makes the loop return at once, abandoning its lease and discarding
    /// any result it was about to deposit.
    pub fn crash(&self) {
        self.crashed.store(true, Ordering::SeqCst);
        self.stop();
    }

    /// A wedged worker keeps running but takes no demands.
    pub fn set_wedged(&self, wedged: bool) {
        self.wedged.store(wedged, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    pub fn is_wedged(&self) -> bool {
        self.wedged.load(Ordering::SeqCst)
    }

    /// Procedure invocations, failed ones included.
    pub fn executions(&self) -> u64 {
        self.executions.load(Ordering::SeqCst)
    }

    pub fn failures(&self) -> u64 {
        self.failures.load(Ordering::SeqCst)
    }

    /// Demands handed back because the pool lacks their procedure.
    pub fn skipped(&self) -> u64 {
        self.skipped.load(Ordering::SeqCst)
    }

    pub fn last_active(&self) -> u64 {
        self.last_active.load(Ordering::SeqCst)
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "procedure panicked".into()
    }
}

/// Withdraws demands, runs the matching procedure and deposits the result
/// until stopped. Demands this pool cannot run go back to the head of the
/// queue for other workers. Procedure errors and panics become failed
/// results.
pub fn dwt_process_loop(
    worker_id: &str,
    pool: &ProcedurePool,
    space: &dyn DemandSpace,
    control: &WorkerControl,
    clock: &dyn Clock,
) {
    while !control.is_stopped() {
        control.last_active.store(clock.now_millis(), Ordering::SeqCst);
        if control.is_wedged() {
            std::thread::sleep(control.idle);
            continue;
        }
        let demand = match space.withdraw(worker_id, control.lease_ms) {
            Ok(Some(d)) => d,
            Ok(None) => {
                std::thread::sleep(control.idle);
                continue;
            }
            Err(e) => {
                log::warn!("{worker_id}: withdraw failed: {e}");
                std::thread::sleep(control.idle);
                continue;
            }
        };
        let Ok(sig) = demand.signature() else {
            log::error!("{worker_id}: withdrew a demand with no signature");
            continue;
        };
        let name = match demand.procedure_name() {
            Some(name) if pool.contains(name) => name,
            _ => {
                control.skipped.fetch_add(1, Ordering::SeqCst);
                if let Err(e) = space.release(&sig, worker_id) {
                    log::warn!("{worker_id}: release failed: {e}");
                }
                std::thread::sleep(control.idle);
                continue;
            }
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| pool.call(name, demand.params())));
        if control.is_crashed() {
            return;
        }
        control.executions.fetch_add(1, Ordering::SeqCst);
        let now = clock.now_millis();
        let result = match outcome {
            Ok(Ok(value)) => DemandResult::success(sig, value, worker_id, now),
            Ok(Err(message)) => {
                control.failures.fetch_add(1, Ordering::SeqCst);
                DemandResult::failed(sig, message, worker_id, now)
            }
            Err(payload) => {
                control.failures.fetch_add(1, Ordering::SeqCst);
                DemandResult::failed(sig, format!("{name} panicked: {}", panic_message(&*payload)), worker_id, now)
            }
        };
        if let Err(e) = space.deposit_result(result) {
            log::warn!("{worker_id}: result deposit failed: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::clock::SystemClock;
    use crate::demand::{Context, Demand, Value};
    use crate::procedure::basic_procedures;
    use crate::store::DemandStore;

    fn run_until<F: Fn() -> bool>(done: F) {
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while !done() {
            assert!(std::time::Instant::now() < deadline, "timed out");
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    fn spawn(
        id: &str,
        pool: ProcedurePool,
        store: Arc<DemandStore>,
    ) -> (Arc<WorkerControl>, std::thread::JoinHandle<()>) {
        let control = Arc::new(WorkerControl::default());
        let c = control.clone();
        let id = id.to_string();
        let t = std::thread::spawn(move || dwt_process_loop(&id, &pool, &*store, &c, &SystemClock));
        (control, t)
    }

    fn demand(proc_name: &str, v: i64) -> Demand {
        Demand::procedural("g", "p", proc_name, vec![Value::Int(v)], Context::new())
    }

    #[test]
    fn echo_result_is_deposited() {
        let store = Arc::new(DemandStore::in_memory());
        let d = demand("echo", 4);
        store.deposit_demand(&d).unwrap();
        let (control, t) = spawn("w", basic_procedures().subset(["echo"]), store.clone());
        let sig = d.signature().unwrap();
        let r = store.wait_result(&sig, "t", Duration::from_secs(5)).unwrap();
        assert_eq!(r.value, Value::Nested(vec![Value::Int(4)]));
        control.stop();
        t.join().unwrap();
        assert_eq!(store.in_flight_len(), 0);
        assert_eq!(control.executions(), 1);
    }

    #[test]
    fn unsupported_demand_goes_to_a_capable_worker() {
        let store = Arc::new(DemandStore::in_memory());
        let d = demand("identity", 1);
        store.deposit_demand(&d).unwrap();
        let (echo_only, t1) = spawn("w1", basic_procedures().subset(["echo"]), store.clone());
        run_until(|| echo_only.skipped() > 0);
        assert_eq!(store.pending_len() + store.in_flight_len(), 1);
        let (capable, t2) = spawn("w2", basic_procedures().subset(["identity"]), store.clone());
        let r = store.wait_result(&d.signature().unwrap(), "t", Duration::from_secs(5)).unwrap();
        assert_eq!(r.worker_id, "w2");
        for (c, t) in [(echo_only, t1), (capable, t2)] {
            c.stop();
            t.join().unwrap();
        }
    }

    #[test]
    fn failures_and_panics_do_not_stop_the_loop() {
        let pool = basic_procedures().with("boom", |_: &[Value]| -> Result<Value, String> { panic!("kaput") });
        let store = Arc::new(DemandStore::in_memory());
        let bad = demand("fail", 1);
        let boom = demand("boom", 2);
        let good = demand("identity", 3);
        for d in [&bad, &boom, &good] {
            store.deposit_demand(d).unwrap();
        }
        let (control, t) = spawn("w", pool, store.clone());
        let wait = |d: &Demand| store.wait_result(&d.signature().unwrap(), "t", Duration::from_secs(5)).unwrap();
        assert!(wait(&bad).is_failure());
        assert!(wait(&boom).failure.unwrap().contains("kaput"));
        assert_eq!(wait(&good).value, Value::Int(3));
        control.stop();
        t.join().unwrap();
        assert_eq!(control.failures(), 2);
        assert_eq!(control.executions(), 3);
    }

    #[test]
    fn wedged_worker_takes_nothing() {
        let store = Arc::new(DemandStore::in_memory());
        let control = Arc::new(WorkerControl::default());
        control.set_wedged(true);
        let c = control.clone();
        let s = store.clone();
        let t = std::thread::spawn(move || dwt_process_loop("w", &basic_procedures(), &*s, &c, &SystemClock));
        store.deposit_demand(&demand("echo", 1)).unwrap();
        std::thread::sleep(Duration::from_millis(30));
        assert_eq!(store.pending_len(), 1);
        control.set_wedged(false);
        run_until(|| control.executions() == 1);
        control.stop();
        t.join().unwrap();
    }
}
