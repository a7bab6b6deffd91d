//! Fan-out of manager events to any number of subscribers.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::demand::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventCategory {
    Log,
    Error,
    Autonomic,
    Node,
    Tier,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusEvent {
    pub seq: u64,
    pub at: u64,
    pub category: EventCategory,
    pub name: String,
    pub subject: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Value>,
}

pub type Subscription = Receiver<BusEvent>;

const HISTORY: usize = 1024;

struct BusInner {
    next_seq: u64,
    subscribers: Vec<SyncSender<BusEvent>>,
    history: VecDeque<BusEvent>,
}

/// Subscribers get events in publication order. A subscriber whose buffer
/// is full is disconnected rather than waited for.
pub struct EventBus {
    capacity: usize,
    inner: Mutex<BusInner>,
}

impl Default for EventBus {
    fn default() -> Self {
        Self::new(4096)
    }
}

impl EventBus {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            inner: Mutex::new(BusInner {
                next_seq: 1,
                subscribers: Vec::new(),
                history: VecDeque::new(),
            }),
        }
    }

    pub fn subscribe(&self) -> Subscription {
        let (tx, rx) = sync_channel(self.capacity);
        self.inner.lock().subscribers.push(tx);
        rx
    }

    pub fn subscriber_count(&self) -> usize {
        self.inner.lock().subscribers.len()
    }

    pub fn publish(
        &self,
        category: EventCategory,
        name: impl Into<String>,
        subject: impl Into<String>,
        attributes: BTreeMap<String, Value>,
        at: u64,
    ) -> u64 {
        let mut inner = self.inner.lock();
        let event = BusEvent {
            seq: inner.next_seq,
            at,
            category,
            name: name.into(),
            subject: subject.into(),
            attributes,
        };
        inner.next_seq += 1;
        inner.subscribers.retain(|tx| match tx.try_send(event.clone()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                log::warn!("dropping slow event subscriber");
                false
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
        if inner.history.len() == HISTORY {
            inner.history.pop_front();
        }
        inner.history.push_back(event.clone());
        event.seq
    }

    /// Most recent events, oldest first.
    pub fn history(&self) -> Vec<BusEvent> {
        self.inner.lock().history.iter().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn publish(bus: &EventBus, name: &str) -> u64 {
        bus.publish(EventCategory::Log, name, "s", BTreeMap::new(), 0)
    }

    #[test]
    fn every_subscriber_sees_every_event_in_order() {
        let bus = EventBus::new(16);
        let a = bus.subscribe();
        let b = bus.subscribe();
        for i in 0..5 {
            publish(&bus, &format!("e{i}"));
        }
        for rx in [a, b] {
            let names: Vec<_> = rx.try_iter().map(|e| e.name).collect();
            assert_eq!(names, ["e0", "e1", "e2", "e3", "e4"]);
        }
    }

    #[test]
    fn slow_subscriber_is_disconnected() {
        let bus = EventBus::new(2);
        let slow = bus.subscribe();
        let fast = bus.subscribe();
        publish(&bus, "a");
        publish(&bus, "b");
        fast.try_iter().count();
        publish(&bus, "c");
        assert_eq!(bus.subscriber_count(), 1);
        assert_eq!(slow.try_iter().count(), 2);
        assert!(slow.try_recv().is_err());
        assert_eq!(fast.try_iter().map(|e| e.name).collect::<Vec<_>>(), ["c"]);
    }

    #[test]
    fn dropped_receivers_are_pruned() {
        let bus = EventBus::new(4);
        drop(bus.subscribe());
        assert_eq!(publish(&bus, "x"), 1);
        assert_eq!(bus.subscriber_count(), 0);
        assert_eq!(bus.history().len(), 1);
    }
}
