//! Turns node heartbeats and throughput into healing events.

use std::collections::{BTreeMap, VecDeque};

use super::vocab::*;
use super::{Event, PolicyEngine};
use crate::demand::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatConfig {
    pub interval_ms: u64,
    /// Consecutive missed heartbeats before a node is reported down.
    pub missed_limit: u64,
    /// A node with pending work and no completions for this long is slow.
    pub performance_window_ms: u64,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            interval_ms: 1000,
            missed_limit: 3,
            performance_window_ms: 5000,
        }
    }
}

/// What the manager knows about one node at a point in time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeObservation {
    pub node_id: String,
    pub last_heartbeat: Option<u64>,
    /// Total demands completed by the node's workers so far.
    pub completed: u64,
    /// Demands waiting in the store the node's workers pull from.
    pub pending: usize,
}

#[derive(Debug, Default)]
struct NodeTrack {
    down_reported: bool,
    slow_reported: bool,
    samples: VecDeque<(u64, u64, usize)>,
}

#[derive(Debug, Default)]
pub struct HeartbeatMonitor {
    config: HeartbeatConfig,
    nodes: BTreeMap<String, NodeTrack>,
}

impl HeartbeatMonitor {
    pub fn new(config: HeartbeatConfig) -> Self {
        Self {
            config,
            nodes: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> HeartbeatConfig {
        self.config
    }

    /// Forgets a node, e.g. after it was replaced.
    pub fn forget(&mut self, node_id: &str) {
        self.nodes.remove(node_id);
    }

    /// Examines the observations taken at `now`, raises the resulting events
    /// on `engine` and returns them.
    pub fn observe(&mut self, engine: &mut PolicyEngine, observations: &[NodeObservation], now: u64) -> Vec<Event> {
        let mut raised = Vec::new();
        for obs in observations {
            let track = self.nodes.entry(obs.node_id.clone()).or_default();
            let missed = match obs.last_heartbeat {
                Some(t) => now.saturating_sub(t) / self.config.interval_ms.max(1),
                None => 0,
            };
            if missed >= self.config.missed_limit {
                if !track.down_reported {
                    track.down_reported = true;
                    raised.push(Event::new(NODE_DOWN, &obs.node_id, now).with("missed", Value::Int(missed as i64)));
                }
                continue;
            }
            track.down_reported = false;

            track.samples.push_back((now, obs.completed, obs.pending));
            let horizon = now.saturating_sub(self.config.performance_window_ms);
            while track.samples.len() > 1 && track.samples[1].0 <= horizon {
                track.samples.pop_front();
            }
            let (first_t, first_completed, _) = track.samples[0];
            let covers_window = now - first_t >= self.config.performance_window_ms;
            let stalled = obs.completed == first_completed && track.samples.iter().all(|(_, _, p)| *p > 0);
            if covers_window && stalled {
                if !track.slow_reported {
                    track.slow_reported = true;
                    raised.push(Event::new(LOW_PERFORMANCE_DETECTED, &obs.node_id, now).with("pending", Value::Int(obs.pending as i64)));
                }
            } else if track.slow_reported && obs.completed > first_completed {
                track.slow_reported = false;
                if engine.is_active(IN_LOW_PERFORMANCE, &obs.node_id) {
                    raised.push(Event::new(PERFORMANCE_NORMALIZED, &obs.node_id, now));
                }
            }
        }
        for ev in &raised {
            engine.raise_event(ev.clone()).expect("default vocabulary");
        }
        raised
    }
}
