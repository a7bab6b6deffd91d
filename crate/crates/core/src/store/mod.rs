//! The demand store tier: result warehouse, FIFO pending queue, in-flight
//! leases and the write-ahead log behind them.
//!
//! Every mutating operation runs under one lock: the state change is turned
//! into a [`TransactionRecord`], appended to the log, and only then applied
//! to memory. Replay feeds the logged records through the same
//! [`StoreState::apply`] used by the live path.

mod wal;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use wal::{read_log, FlushPolicy, LogContents, RecordBody, TransactionRecord, Wal, WalOp};

use crate::clock::{Clock, SystemClock};
use crate::demand::{Demand, DemandError, DemandResult, SignatureKey};

pub const DEFAULT_LEASE_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("result signature {got} does not match {expected}")]
    SignatureMismatch { expected: SignatureKey, got: SignatureKey },
    #[error(transparent)]
    InvalidDemand(#[from] DemandError),
    #[error("invalid WAL record: {0}")]
    InvalidRecord(String),
    #[error("corrupt WAL at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("result value contains a non-finite float")]
    NonFiniteResult,
    #[error("worker id must be non-empty")]
    EmptyWorkerId,
}

impl StoreError {
    pub(crate) fn io(e: std::io::Error) -> Self {
        StoreError::Unavailable(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub worker_id: String,
    pub granted_at: u64,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DepositOutcome {
    Enqueued,
    AlreadyPending,
    Cached(DemandResult),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ack {
    Stored,
    DuplicateIgnored,
    /// The demand was cancelled while in flight; the result was discarded.
    Dropped,
}

#[derive(Debug, Clone, PartialEq)]
struct LiveDemand {
    demand: Demand,
    deposit_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct InFlight {
    lease: Lease,
    grant_seq: u64,
    cancelled: bool,
}

/// The store's in-memory state machine.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreState {
    warehouse: HashMap<SignatureKey, DemandResult>,
    pending: VecDeque<SignatureKey>,
    in_flight: HashMap<SignatureKey, InFlight>,
    live: HashMap<SignatureKey, LiveDemand>,
    waiters: HashMap<SignatureKey, BTreeSet<String>>,
    next_deposit_seq: u64,
    next_grant_seq: u64,
}

/// A comparable point-in-time view of the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreSnapshot {
    pub warehouse: BTreeMap<SignatureKey, DemandResult>,
    pub pending: Vec<SignatureKey>,
    pub in_flight: BTreeMap<SignatureKey, Lease>,
}

impl StoreState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one logged change. Records that no longer make sense against
    /// the current state (for example a lease on a demand that is not
    /// pending) are ignored, matching what the live path would have done.
    pub fn apply(&mut self, sig: &SignatureKey, body: RecordBody) {
        match body {
            RecordBody::DepositDemand(demand) => {
                if self.warehouse.contains_key(sig) {
                    return;
                }
                if let Some(f) = self.in_flight.get_mut(sig) {
                    f.cancelled = false;
                    return;
                }
                if self.live.contains_key(sig) {
                    return;
                }
                let deposit_seq = self.next_deposit_seq;
                self.next_deposit_seq += 1;
                self.live.insert(sig.clone(), LiveDemand { demand, deposit_seq });
                self.pending.push_back(sig.clone());
            }
            RecordBody::GrantLease(lease) => {
                if let Some(pos) = self.pending.iter().position(|s| s == sig) {
                    self.pending.remove(pos);
                    let grant_seq = self.next_grant_seq;
                    self.next_grant_seq += 1;
                    self.in_flight.insert(
                        sig.clone(),
                        InFlight {
                            lease,
                            grant_seq,
                            cancelled: false,
                        },
                    );
                }
            }
            RecordBody::DepositResult(result) => {
                if self.warehouse.contains_key(sig) {
                    return;
                }
                self.remove_live(sig);
                self.waiters.remove(sig);
                self.warehouse.insert(sig.clone(), result);
            }
            RecordBody::Cancel => {
                if let Some(f) = self.in_flight.get_mut(sig) {
                    f.cancelled = true;
                } else if self.live.contains_key(sig) {
                    self.remove_live(sig);
                }
            }
            RecordBody::Expire => {
                if let Some(f) = self.in_flight.remove(sig) {
                    if f.cancelled {
                        self.live.remove(sig);
                    } else {
                        self.pending.push_front(sig.clone());
                    }
                }
            }
        }
    }

    fn remove_live(&mut self, sig: &SignatureKey) {
        self.live.remove(sig);
        self.in_flight.remove(sig);
        if let Some(pos) = self.pending.iter().position(|s| s == sig) {
            self.pending.remove(pos);
        }
    }

    /// Returns leases to pending and restores deposit order, as after a
    /// crash: no worker survives a restart holding a lease.
    fn recover_leases(&mut self) {
        let held: Vec<(SignatureKey, bool)> = self.in_flight.drain().map(|(s, f)| (s, f.cancelled)).collect();
        for (sig, cancelled) in held {
            if cancelled {
                self.live.remove(&sig);
            } else {
                self.pending.push_back(sig);
            }
        }
        let live = &self.live;
        self.pending
            .make_contiguous()
            .sort_by_key(|s| live.get(s).map(|l| l.deposit_seq).unwrap_or(u64::MAX));
    }

    pub fn lookup(&self, sig: &SignatureKey) -> Option<&DemandResult> {
        self.warehouse.get(sig)
    }

    pub fn warehouse_len(&self) -> usize {
        self.warehouse.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn pending_demands(&self) -> Vec<Demand> {
        self.pending
            .iter()
            .filter_map(|s| self.live.get(s).map(|l| l.demand.clone()))
            .collect()
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            warehouse: self.warehouse.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            pending: self.pending.iter().cloned().collect(),
            in_flight: self
                .in_flight
                .iter()
                .map(|(k, v)| (k.clone(), v.lease.clone()))
                .collect(),
        }
    }

    /// Checks that every signature sits in at most one of pending,
    /// in-flight and warehouse, and that the bookkeeping maps agree.
    pub fn audit(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for sig in &self.pending {
            if !seen.insert(sig) {
                return Err(format!("{sig} pending twice"));
            }
            if self.in_flight.contains_key(sig) {
                return Err(format!("{sig} both pending and in flight"));
            }
        }
        for sig in self.pending.iter().chain(self.in_flight.keys()) {
            if self.warehouse.contains_key(sig) {
                return Err(format!("{sig} both live and in warehouse"));
            }
            if !self.live.contains_key(sig) {
                return Err(format!("{sig} has no demand body"));
            }
        }
        if self.live.len() != self.pending.len() + self.in_flight.len() {
            return Err("live demand table out of sync".into());
        }
        for f in self.in_flight.values() {
            if f.lease.expires_at <= f.lease.granted_at {
                return Err("lease expires before grant".into());
            }
        }
        Ok(())
    }
}

/// Rebuilds store state from a log file. Leases found in the log are
/// treated as expired and their demands return to pending in original
/// deposit order.
pub fn wal_replay(path: impl AsRef<Path>) -> Result<StoreState, StoreError> {
    let contents = read_log(path.as_ref())?;
    replay_records(&contents.records)
}

pub fn replay_records(records: &[TransactionRecord]) -> Result<StoreState, StoreError> {
    let mut state = StoreState::new();
    for rec in records {
        let sig = rec.signature()?;
        state.apply(&sig, rec.body()?);
    }
    state.recover_leases();
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub wal_path: Option<PathBuf>,
    pub flush: FlushPolicy,
    pub default_lease_ms: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            wal_path: None,
            flush: FlushPolicy::EveryAppend,
            default_lease_ms: DEFAULT_LEASE_MS,
        }
    }
}

/// Outcome counters, for hit-rate reporting.
#[derive(Debug, Default)]
pub struct StoreStats {
    pub enqueued: AtomicU64,
    pub already_pending: AtomicU64,
    pub cached: AtomicU64,
    pub stored: AtomicU64,
    pub duplicates: AtomicU64,
}

impl StoreStats {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

struct Shared {
    state: StoreState,
    wal: Option<Wal>,
    next_txn: u64,
}

pub struct DemandStore {
    shared: Mutex<Shared>,
    results: Condvar,
    clock: Arc<dyn Clock>,
    default_lease_ms: u64,
    stats: StoreStats,
}

impl std::fmt::Debug for DemandStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DemandStore").finish_non_exhaustive()
    }
}

impl DemandStore {
    /// A store with no log; contents are lost with the process.
    pub fn in_memory() -> Self {
        Self::with_parts(StoreState::new(), None, 1, Arc::new(SystemClock), DEFAULT_LEASE_MS)
    }

    /// Opens a store, replaying and continuing the configured log if any.
    pub fn open(config: &StoreConfig, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let Some(path) = &config.wal_path else {
            return Ok(Self::with_parts(StoreState::new(), None, 1, clock, config.default_lease_ms));
        };
        let (wal, records) = Wal::open(path, config.flush)?;
        let state = replay_records(&records)?;
        let next_txn = wal.last_txn_id().map_or(1, |t| t + 1);
        Ok(Self::with_parts(state, Some(wal), next_txn, clock, config.default_lease_ms))
    }

    pub fn with_clock(clock: Arc<dyn Clock>) -> Self {
        Self::with_parts(StoreState::new(), None, 1, clock, DEFAULT_LEASE_MS)
    }

    fn with_parts(state: StoreState, wal: Option<Wal>, next_txn: u64, clock: Arc<dyn Clock>, default_lease_ms: u64) -> Self {
        Self {
            shared: Mutex::new(Shared { state, wal, next_txn }),
            results: Condvar::new(),
            clock,
            default_lease_ms,
            stats: StoreStats::default(),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn default_lease_ms(&self) -> u64 {
        self.default_lease_ms
    }

    pub fn stats(&self) -> &StoreStats {
        &self.stats
    }

    /// Logs `body` for `sig`, then applies it.
    fn commit(&self, shared: &mut Shared, sig: &SignatureKey, body: RecordBody) -> Result<(), StoreError> {
        if let Some(wal) = shared.wal.as_mut() {
            let record = TransactionRecord::new(shared.next_txn, sig, &body, self.clock.now_millis())?;
            wal.append(&record)?;
            shared.next_txn += 1;
        }
        shared.state.apply(sig, body);
        Ok(())
    }

    pub fn deposit_demand(&self, demand: &Demand) -> Result<DepositOutcome, StoreError> {
        let sig = demand.signature()?;
        let mut shared = self.shared.lock();
        if let Some(result) = shared.state.warehouse.get(&sig) {
            self.stats.cached.fetch_add(1, Ordering::Relaxed);
            return Ok(DepositOutcome::Cached(result.clone()));
        }
        if let Some(f) = shared.state.in_flight.get(&sig) {
            if f.cancelled {
                // Re-demanding a cancelled in-flight demand revives it.
                self.commit(&mut shared, &sig, RecordBody::DepositDemand(demand.clone()))?;
            }
            self.stats.already_pending.fetch_add(1, Ordering::Relaxed);
            return Ok(DepositOutcome::AlreadyPending);
        }
        if shared.state.live.contains_key(&sig) {
            self.stats.already_pending.fetch_add(1, Ordering::Relaxed);
            return Ok(DepositOutcome::AlreadyPending);
        }
        self.commit(&mut shared, &sig, RecordBody::DepositDemand(demand.clone()))?;
        self.stats.enqueued.fetch_add(1, Ordering::Relaxed);
        Ok(DepositOutcome::Enqueued)
    }

    /// Leases the head of the pending queue to `worker_id`.
    pub fn withdraw_pending(&self, worker_id: &str, now: u64, lease_ms: u64) -> Result<Option<Demand>, StoreError> {
        if worker_id.is_empty() {
            return Err(StoreError::EmptyWorkerId);
        }
        let mut shared = self.shared.lock();
        let Some(sig) = shared.state.pending.front().cloned() else {
            return Ok(None);
        };
        let lease = Lease {
            worker_id: worker_id.to_string(),
            granted_at: now,
            expires_at: now + lease_ms.max(1),
        };
        self.commit(&mut shared, &sig, RecordBody::GrantLease(lease))?;
        Ok(shared.state.live.get(&sig).map(|l| l.demand.clone()))
    }

    pub fn deposit_result(&self, sig: &SignatureKey, result: DemandResult) -> Result<Ack, StoreError> {
        if &result.signature != sig {
            return Err(StoreError::SignatureMismatch {
                expected: sig.clone(),
                got: result.signature,
            });
        }
        if !result.value.is_finite() {
            return Err(StoreError::NonFiniteResult);
        }
        let mut shared = self.shared.lock();
        if shared.state.warehouse.contains_key(sig) {
            self.stats.duplicates.fetch_add(1, Ordering::Relaxed);
            return Ok(Ack::DuplicateIgnored);
        }
        if shared.state.in_flight.get(sig).is_some_and(|f| f.cancelled) {
            self.commit(&mut shared, sig, RecordBody::Expire)?;
            return Ok(Ack::Dropped);
        }
        self.commit(&mut shared, sig, RecordBody::DepositResult(result))?;
        drop(shared);
        self.stats.stored.fetch_add(1, Ordering::Relaxed);
        self.results.notify_all();
        Ok(Ack::Stored)
    }

    pub fn lookup(&self, sig: &SignatureKey) -> Option<DemandResult> {
        self.shared.lock().state.lookup(sig).cloned()
    }

    /// Cancels a pending demand, or marks an in-flight one so its result is
    /// dropped. Returns false when the demand is unknown or already computed.
    pub fn cancel(&self, sig: &SignatureKey) -> Result<bool, StoreError> {
        let mut shared = self.shared.lock();
        let cancellable = match shared.state.in_flight.get(sig) {
            Some(f) => !f.cancelled,
            None => shared.state.live.contains_key(sig),
        };
        if !cancellable {
            return Ok(false);
        }
        self.commit(&mut shared, sig, RecordBody::Cancel)?;
        Ok(true)
    }

    /// Returns every lease that expired by `now` to the pending head, in
    /// lease-grant order.
    pub fn expire_leases(&self, now: u64) -> Result<Vec<SignatureKey>, StoreError> {
        self.expire_where(|f| f.lease.expires_at <= now)
    }

    /// Ends every lease held by `worker_id` immediately.
    pub fn expire_worker(&self, worker_id: &str) -> Result<Vec<SignatureKey>, StoreError> {
        self.expire_where(|f| f.lease.worker_id == worker_id)
    }

    fn expire_where(&self, pred: impl Fn(&InFlight) -> bool) -> Result<Vec<SignatureKey>, StoreError> {
        let mut shared = self.shared.lock();
        let mut expired: Vec<(u64, SignatureKey, bool)> = shared
            .state
            .in_flight
            .iter()
            .filter(|(_, f)| pred(f))
            .map(|(s, f)| (f.grant_seq, s.clone(), f.cancelled))
            .collect();
        expired.sort();
        // Pushing to the front in reverse keeps the earliest grant at the head.
        for (_, sig, _) in expired.iter().rev() {
            self.commit(&mut shared, sig, RecordBody::Expire)?;
        }
        Ok(expired
            .into_iter()
            .filter(|(_, _, cancelled)| !cancelled)
            .map(|(_, s, _)| s)
            .collect())
    }

    /// Hands a leased demand back to the pending head, for a worker that
    /// cannot process it.
    pub fn release(&self, sig: &SignatureKey, worker_id: &str) -> Result<bool, StoreError> {
        let mut shared = self.shared.lock();
        let held = shared
            .state
            .in_flight
            .get(sig)
            .is_some_and(|f| f.lease.worker_id == worker_id);
        if held {
            self.commit(&mut shared, sig, RecordBody::Expire)?;
        }
        Ok(held)
    }

    /// Blocks until a result for `sig` is in the warehouse or `timeout`
    /// elapses.
    pub fn wait_result(&self, sig: &SignatureKey, requester: &str, timeout: Duration) -> Option<DemandResult> {
        let deadline = Instant::now() + timeout;
        let mut shared = self.shared.lock();
        loop {
            if let Some(r) = shared.state.warehouse.get(sig) {
                return Some(r.clone());
            }
            shared
                .state
                .waiters
                .entry(sig.clone())
                .or_default()
                .insert(requester.to_string());
            if self.results.wait_until(&mut shared, deadline).timed_out() {
                let r = shared.state.warehouse.get(sig).cloned();
                if let Some(set) = shared.state.waiters.get_mut(sig) {
                    set.remove(requester);
                    if set.is_empty() {
                        shared.state.waiters.remove(sig);
                    }
                }
                return r;
            }
        }
    }

    pub fn waiters(&self, sig: &SignatureKey) -> BTreeSet<String> {
        self.shared.lock().state.waiters.get(sig).cloned().unwrap_or_default()
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        self.shared.lock().state.snapshot()
    }

    pub fn state(&self) -> StoreState {
        self.shared.lock().state.clone()
    }

    pub fn audit(&self) -> Result<(), String> {
        self.shared.lock().state.audit()
    }

    pub fn pending_len(&self) -> usize {
        self.shared.lock().state.pending_len()
    }

    pub fn in_flight_len(&self) -> usize {
        self.shared.lock().state.in_flight_len()
    }

    pub fn warehouse_len(&self) -> usize {
        self.shared.lock().state.warehouse_len()
    }

    pub fn wal_path(&self) -> Option<PathBuf> {
        self.shared.lock().wal.as_ref().map(|w| w.path().to_path_buf())
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        match self.shared.lock().wal.as_mut() {
            Some(w) => w.sync(),
            None => Ok(()),
        }
    }
}

/// The demand space as seen by generators and workers, whether the store is
/// local or behind a transport.
pub trait DemandSpace: Send + Sync {
    fn deposit_demand(&self, demand: &Demand) -> Result<DepositOutcome, StoreError>;
    fn withdraw(&self, worker_id: &str, lease_ms: u64) -> Result<Option<Demand>, StoreError>;
    fn deposit_result(&self, result: DemandResult) -> Result<Ack, StoreError>;
    fn lookup(&self, sig: &SignatureKey) -> Result<Option<DemandResult>, StoreError>;
    fn release(&self, sig: &SignatureKey, worker_id: &str) -> Result<(), StoreError>;
    fn wait_result(&self, sig: &SignatureKey, requester: &str, timeout: Duration) -> Result<Option<DemandResult>, StoreError>;
    fn pending_len(&self) -> Result<usize, StoreError>;
}

impl DemandSpace for DemandStore {
    fn deposit_demand(&self, demand: &Demand) -> Result<DepositOutcome, StoreError> {
        DemandStore::deposit_demand(self, demand)
    }

    fn withdraw(&self, worker_id: &str, lease_ms: u64) -> Result<Option<Demand>, StoreError> {
        self.withdraw_pending(worker_id, self.clock.now_millis(), lease_ms)
    }

    fn deposit_result(&self, result: DemandResult) -> Result<Ack, StoreError> {
        let sig = result.signature.clone();
        DemandStore::deposit_result(self, &sig, result)
    }

    fn lookup(&self, sig: &SignatureKey) -> Result<Option<DemandResult>, StoreError> {
        Ok(DemandStore::lookup(self, sig))
    }

    fn release(&self, sig: &SignatureKey, worker_id: &str) -> Result<(), StoreError> {
        DemandStore::release(self, sig, worker_id).map(|_| ())
    }

    fn wait_result(&self, sig: &SignatureKey, requester: &str, timeout: Duration) -> Result<Option<DemandResult>, StoreError> {
        Ok(DemandStore::wait_result(self, sig, requester, timeout))
    }

    fn pending_len(&self) -> Result<usize, StoreError> {
        Ok(DemandStore::pending_len(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::demand::{Context, Value};

    fn demand(n: i64) -> Demand {
        Demand::procedural("g", "p", "echo", vec![Value::Int(n)], Context::new())
    }

    fn result_for(d: &Demand, v: i64, worker: &str) -> DemandResult {
        DemandResult::success(d.signature().unwrap(), Value::Int(v), worker, 1)
    }

    fn audited(store: &DemandStore) {
        store.audit().expect("store invariants");
    }

    #[test]
    fn deposit_dedupes_and_caches() {
        let store = DemandStore::in_memory();
        let d = demand(1);
        assert_eq!(store.deposit_demand(&d).unwrap(), DepositOutcome::Enqueued);
        assert_eq!(store.deposit_demand(&d).unwrap(), DepositOutcome::AlreadyPending);
        let got = store.withdraw_pending("w", 0, 100).unwrap().unwrap();
        assert_eq!(got, d);
        assert_eq!(store.deposit_demand(&d).unwrap(), DepositOutcome::AlreadyPending);
        let r = result_for(&d, 42, "w");
        assert_eq!(store.deposit_result(&r.signature.clone(), r.clone()).unwrap(), Ack::Stored);
        assert_eq!(store.deposit_demand(&d).unwrap(), DepositOutcome::Cached(r));
        audited(&store);
    }

    #[test]
    fn fifo_withdrawal() {
        let store = DemandStore::in_memory();
        for n in 1..=3 {
            store.deposit_demand(&demand(n)).unwrap();
        }
        for n in 1..=3 {
            assert_eq!(store.withdraw_pending("w", 0, 100).unwrap(), Some(demand(n)));
            audited(&store);
        }
        assert_eq!(store.withdraw_pending("w", 0, 100).unwrap(), None);
    }

    #[test]
    fn withdraw_requires_worker_id() {
        let store = DemandStore::in_memory();
        assert_eq!(store.withdraw_pending("", 0, 1), Err(StoreError::EmptyWorkerId));
        assert_eq!(store.withdraw_pending("w", 0, 1).unwrap(), None);
    }

    #[test]
    fn in_flight_is_not_reissued_until_expiry() {
        let clock = Arc::new(ManualClock::new(1_000));
        let store = DemandStore::with_clock(clock.clone());
        let d = demand(1);
        store.deposit_demand(&d).unwrap();
        assert_eq!(store.withdraw_pending("w1", 1_000, 500).unwrap(), Some(d.clone()));
        assert_eq!(store.withdraw_pending("w2", 1_000, 500).unwrap(), None);
        assert!(store.expire_leases(1_499).unwrap().is_empty());
        let expired = store.expire_leases(clock.advance(500)).unwrap();
        assert_eq!(expired, vec![d.signature().unwrap()]);
        assert_eq!(store.withdraw_pending("w2", 1_500, 500).unwrap(), Some(d));
        audited(&store);
    }

    #[test]
    fn expired_leases_requeue_in_grant_order() {
        let store = DemandStore::in_memory();
        for n in 1..=3 {
            store.deposit_demand(&demand(n)).unwrap();
        }
        store.withdraw_pending("a", 0, 10).unwrap();
        store.withdraw_pending("b", 1, 10).unwrap();
        assert!(store.expire_leases(5).unwrap().is_empty());
        let expired = store.expire_leases(100).unwrap();
        assert_eq!(expired, vec![demand(1).signature().unwrap(), demand(2).signature().unwrap()]);
        let order: Vec<_> = (0..3)
            .map(|_| store.withdraw_pending("c", 200, 10).unwrap().unwrap())
            .collect();
        assert_eq!(order, vec![demand(1), demand(2), demand(3)]);
    }

    #[test]
    fn first_result_wins() {
        let store = DemandStore::in_memory();
        let d = demand(1);
        store.deposit_demand(&d).unwrap();
        store.withdraw_pending("a", 0, 10).unwrap();
        let sig = d.signature().unwrap();
        let first = result_for(&d, 1, "a");
        let second = result_for(&d, 2, "b");
        assert_eq!(store.deposit_result(&sig, first.clone()).unwrap(), Ack::Stored);
        assert_eq!(store.deposit_result(&sig, second).unwrap(), Ack::DuplicateIgnored);
        assert_eq!(store.lookup(&sig), Some(first));
    }

    #[test]
    fn mismatched_result_rejected() {
        let store = DemandStore::in_memory();
        let r = result_for(&demand(1), 1, "a");
        let other = demand(2).signature().unwrap();
        assert!(matches!(store.deposit_result(&other, r), Err(StoreError::SignatureMismatch { .. })));
    }

    #[test]
    fn non_finite_result_rejected() {
        let store = DemandStore::in_memory();
        let d = demand(1);
        let r = DemandResult::success(d.signature().unwrap(), Value::Float(f64::NAN), "w", 0);
        assert_eq!(store.deposit_result(&d.signature().unwrap(), r), Err(StoreError::NonFiniteResult));
    }

    #[test]
    fn lookup_is_pure() {
        let store = DemandStore::in_memory();
        store.deposit_demand(&demand(1)).unwrap();
        store.deposit_demand(&demand(2)).unwrap();
        let before = store.snapshot();
        assert_eq!(store.lookup(&demand(9).signature().unwrap()), None);
        assert_eq!(store.lookup(&demand(1).signature().unwrap()), None);
        assert_eq!(store.snapshot(), before);
    }

    #[test]
    fn cancel_pending_and_unknown() {
        let store = DemandStore::in_memory();
        let d = demand(1);
        store.deposit_demand(&d).unwrap();
        assert!(store.cancel(&d.signature().unwrap()).unwrap());
        assert_eq!(store.withdraw_pending("w", 0, 10).unwrap(), None);
        assert!(!store.cancel(&demand(2).signature().unwrap()).unwrap());
        audited(&store);
    }

    #[test]
    fn cancel_in_flight_drops_result() {
        let store = DemandStore::in_memory();
        let d = demand(1);
        let sig = d.signature().unwrap();
        store.deposit_demand(&d).unwrap();
        store.withdraw_pending("w", 0, 10).unwrap();
        assert!(store.cancel(&sig).unwrap());
        assert_eq!(store.deposit_result(&sig, result_for(&d, 1, "w")).unwrap(), Ack::Dropped);
        assert_eq!(store.lookup(&sig), None);
        assert_eq!(store.warehouse_len(), 0);
        assert_eq!(store.in_flight_len(), 0);
        audited(&store);
        // Cancelling a computed demand is refused.
        store.deposit_demand(&d).unwrap();
        store.withdraw_pending("w", 0, 10).unwrap();
        store.deposit_result(&sig, result_for(&d, 1, "w")).unwrap();
        assert!(!store.cancel(&sig).unwrap());
    }

    #[test]
    fn release_returns_to_head() {
        let store = DemandStore::in_memory();
        store.deposit_demand(&demand(1)).unwrap();
        store.deposit_demand(&demand(2)).unwrap();
        let d = store.withdraw_pending("w", 0, 10).unwrap().unwrap();
        assert!(!store.release(&d.signature().unwrap(), "other").unwrap());
        assert!(store.release(&d.signature().unwrap(), "w").unwrap());
        assert_eq!(store.withdraw_pending("x", 0, 10).unwrap(), Some(demand(1)));
    }

    #[test]
    fn wait_result_wakes_on_deposit() {
        let store = Arc::new(DemandStore::in_memory());
        let d = demand(1);
        let sig = d.signature().unwrap();
        store.deposit_demand(&d).unwrap();
        let waiter = {
            let store = store.clone();
            let sig = sig.clone();
            std::thread::spawn(move || store.wait_result(&sig, "dgt", Duration::from_secs(5)))
        };
        while store.waiters(&sig).is_empty() {
            std::thread::yield_now();
        }
        store.deposit_result(&sig, result_for(&d, 5, "w")).unwrap();
        assert_eq!(waiter.join().unwrap().unwrap().value, Value::Int(5));
        assert!(store.waiters(&sig).is_empty());
        assert_eq!(store.wait_result(&demand(2).signature().unwrap(), "dgt", Duration::from_millis(5)), None);
    }

    #[test]
    fn concurrent_deposits_enqueue_once() {
        let store = Arc::new(DemandStore::in_memory());
        let d = demand(7);
        let outcomes: Vec<_> = (0..16)
            .map(|_| {
                let store = store.clone();
                let d = d.clone();
                std::thread::spawn(move || store.deposit_demand(&d).unwrap())
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect();
        assert_eq!(outcomes.iter().filter(|o| **o == DepositOutcome::Enqueued).count(), 1);
    }

    #[test]
    fn replay_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.log");
        std::fs::write(&path, "").unwrap();
        assert_eq!(wal_replay(&path).unwrap().snapshot(), StoreSnapshot::default());
    }

    #[test]
    fn replay_restores_pending_and_warehouse() {
        let dir = tempfile::tempdir().unwrap();
        let config = StoreConfig {
            wal_path: Some(dir.path().join("w.log")),
            ..StoreConfig::default()
        };
        let oracle = DemandStore::in_memory();
        {
            let store = DemandStore::open(&config, Arc::new(SystemClock)).unwrap();
            for s in [&store, &oracle] {
                s.deposit_demand(&demand(1)).unwrap();
                s.deposit_demand(&demand(2)).unwrap();
                let r = result_for(&demand(1), 10, "w");
                s.deposit_result(&r.signature.clone(), r).unwrap();
            }
        }
        let replayed = wal_replay(config.wal_path.as_ref().unwrap()).unwrap();
        assert_eq!(replayed.snapshot(), oracle.snapshot());
        assert_eq!(replayed.snapshot().pending, vec![demand(2).signature().unwrap()]);
        replayed.audit().unwrap();
    }

    #[test]
    fn replay_treats_leases_as_expired() {
        let dir = tempfile::tempdir().unwrap();
        let config = StoreConfig {
            wal_path: Some(dir.path().join("w.log")),
            ..StoreConfig::default()
        };
        {
            let store = DemandStore::open(&config, Arc::new(SystemClock)).unwrap();
            for n in 1..=3 {
                store.deposit_demand(&demand(n)).unwrap();
            }
            store.withdraw_pending("w", 0, 10).unwrap();
            store.withdraw_pending("w", 0, 10).unwrap();
            store.cancel(&demand(2).signature().unwrap()).unwrap();
        }
        let store = DemandStore::open(&config, Arc::new(SystemClock)).unwrap();
        let snap = store.snapshot();
        assert!(snap.in_flight.is_empty());
        assert_eq!(
            snap.pending,
            vec![demand(1).signature().unwrap(), demand(3).signature().unwrap()]
        );
        // The reopened store keeps logging after the replayed records.
        store.deposit_demand(&demand(4)).unwrap();
        drop(store);
        assert_eq!(wal_replay(config.wal_path.as_ref().unwrap()).unwrap().pending_len(), 3);
    }

    #[test]
    fn unwritable_wal_leaves_state_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.log");
        let config = StoreConfig {
            wal_path: Some(path.clone()),
            ..StoreConfig::default()
        };
        let store = DemandStore::open(&config, Arc::new(SystemClock)).unwrap();
        store.deposit_demand(&demand(1)).unwrap();
        // Swap the log file descriptor for a read-only handle.
        {
            let mut shared = store.shared.lock();
            let ro = std::fs::File::open(&path).unwrap();
            let wal = shared.wal.as_mut().unwrap();
            wal_swap_file(wal, ro);
        }
        let before = store.snapshot();
        assert!(matches!(store.deposit_demand(&demand(2)), Err(StoreError::Unavailable(_))));
        assert_eq!(store.snapshot(), before);
    }

    fn wal_swap_file(wal: &mut Wal, file: std::fs::File) {
        wal.replace_file_for_test(file);
    }
}
