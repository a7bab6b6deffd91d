//! Demand-driven eduction grid.
//!
//! Generators deposit demands into a demand store, workers withdraw and
//! compute them, and every result is memoized in the store's warehouse. The
//! manager tier registers nodes and allocates tiers; an autonomic policy
//! engine heals, protects and optimizes the running grid. The MARF speaker
//! identification pipeline is the bundled workload.

pub mod demand;
pub mod clock;
pub mod store;
pub mod transport;
pub mod procedure;
pub mod marf;
pub mod autonomic;
pub mod tiers;
