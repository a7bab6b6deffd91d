//! The manager's bookkeeping: who is registered, and who is bound to whom.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{valid_color, GipsyInstance, NodeRegistration, NodeStatus, TierKind, TierRegistration, TierState};

/// A tier and the store it is bound to after a removal, if any.
pub type Rebinding = (String, Option<String>);

/// Registered instances, nodes and tiers, in registration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub instances: BTreeMap<String, GipsyInstance>,
    pub nodes: Vec<NodeRegistration>,
    pub tiers: Vec<TierRegistration>,
}

/// Node to store tier, and generator or worker tier to the store it uses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relations {
    pub node_system: BTreeMap<String, String>,
    pub dgt_dwt: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GmtInfoKeeper {
    pub registry: Registry,
    pub relations: Relations,
}

impl GmtInfoKeeper {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_instance(&mut self, instance: GipsyInstance) -> bool {
        if self.registry.instances.contains_key(&instance.instance_id) {
            return false;
        }
        self.registry.instances.insert(instance.instance_id.clone(), instance);
        true
    }

    pub fn instance(&self, id: &str) -> Option<&GipsyInstance> {
        self.registry.instances.get(id)
    }

    /// Inserts a node, or updates the one with the same name and address.
    /// Returns the stored record and whether it already existed.
    pub fn upsert_node(&mut self, mut reg: NodeRegistration) -> (NodeRegistration, bool) {
        let existing = self
            .registry
            .nodes
            .iter_mut()
            .find(|n| n.node_name == reg.node_name && n.address == reg.address);
        match existing {
            Some(n) => {
                n.color = reg.color;
                n.instance_id = reg.instance_id;
                n.registered_at = reg.registered_at;
                (n.clone(), true)
            }
            None => {
                reg.status = NodeStatus::Registered;
                self.registry.nodes.push(reg.clone());
                (reg, false)
            }
        }
    }

    pub fn node(&self, id: &str) -> Option<&NodeRegistration> {
        self.registry.nodes.iter().find(|n| n.node_id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut NodeRegistration> {
        self.registry.nodes.iter_mut().find(|n| n.node_id == id)
    }

    pub fn nodes(&self) -> &[NodeRegistration] {
        &self.registry.nodes
    }

    pub fn tier(&self, id: &str) -> Option<&TierRegistration> {
        self.registry.tiers.iter().find(|t| t.tier_id == id)
    }

    pub fn tier_mut(&mut self, id: &str) -> Option<&mut TierRegistration> {
        self.registry.tiers.iter_mut().find(|t| t.tier_id == id)
    }

    pub fn tiers(&self) -> &[TierRegistration] {
        &self.registry.tiers
    }

    pub fn tiers_on(&self, node_id: &str) -> Vec<TierRegistration> {
        self.registry.tiers.iter().filter(|t| t.node_id == node_id).cloned().collect()
    }

    pub fn dst_registrations(&self) -> Vec<&TierRegistration> {
        self.registry.tiers.iter().filter(|t| t.kind == TierKind::Dst).collect()
    }

    /// Store tier a generator or worker is bound to.
    pub fn binding(&self, tier_id: &str) -> Option<&str> {
        self.relations.dgt_dwt.get(tier_id).map(String::as_str)
    }

    /// Tiers bound to `dst_id`, in registration order.
    pub fn bound_to(&self, dst_id: &str) -> Vec<String> {
        self.registry
            .tiers
            .iter()
            .filter(|t| self.binding(&t.tier_id) == Some(dst_id))
            .map(|t| t.tier_id.clone())
            .collect()
    }

    /// Least loaded store tier of `instance_id` on a node that is not dead,
    /// ties broken by tier id.
    pub fn choose_dst(&self, instance_id: &str, exclude: &BTreeSet<String>) -> Option<String> {
        let mut load: BTreeMap<&str, usize> = BTreeMap::new();
        for t in self.dst_registrations() {
            if exclude.contains(&t.tier_id) {
                continue;
            }
            match self.node(&t.node_id) {
                Some(n) if n.instance_id == instance_id && n.status != NodeStatus::Dead => {
                    load.insert(&t.tier_id, 0);
                }
                _ => {}
            }
        }
        for dst in self.relations.dgt_dwt.values() {
            if let Some(n) = load.get_mut(dst.as_str()) {
                *n += 1;
            }
        }
        load.into_iter().min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0))).map(|(id, _)| id.to_string())
    }

    pub fn add_tier(&mut self, reg: TierRegistration) {
        if reg.kind == TierKind::Dst {
            self.relations.node_system.entry(reg.node_id.clone()).or_insert_with(|| reg.tier_id.clone());
        }
        self.registry.tiers.push(reg);
    }

    pub fn bind(&mut self, tier_id: &str, dst_id: &str) {
        self.relations.dgt_dwt.insert(tier_id.to_string(), dst_id.to_string());
        if let Some(t) = self.tier_mut(tier_id) {
            if t.state == TierState::NoDstAvailable {
                t.state = TierState::Running;
            }
        }
    }

    /// Removes a tier and the relations naming it. Tiers bound to a removed
    /// store move to the least loaded remaining store or become unbound.
    /// Returns the removed record and each affected tier's new store.
    pub fn remove_tier(&mut self, tier_id: &str) -> Option<(TierRegistration, Vec<Rebinding>)> {
        let pos = self.registry.tiers.iter().position(|t| t.tier_id == tier_id)?;
        let reg = self.registry.tiers.remove(pos);
        self.relations.dgt_dwt.remove(tier_id);
        let mut moved = Vec::new();
        if reg.kind == TierKind::Dst {
            if self.relations.node_system.get(&reg.node_id).map(String::as_str) == Some(tier_id) {
                self.relations.node_system.remove(&reg.node_id);
                let next = self
                    .registry
                    .tiers
                    .iter()
                    .find(|t| t.kind == TierKind::Dst && t.node_id == reg.node_id)
                    .map(|t| t.tier_id.clone());
                if let Some(next) = next {
                    self.relations.node_system.insert(reg.node_id.clone(), next);
                }
            }
            let instance = self.node(&reg.node_id).map(|n| n.instance_id.clone()).unwrap_or_default();
            for bound in self.bound_to(tier_id) {
                let target = self.choose_dst(&instance, &BTreeSet::new());
                match &target {
                    Some(dst) => self.bind(&bound, dst),
                    None => {
                        self.relations.dgt_dwt.remove(&bound);
                        if let Some(t) = self.tier_mut(&bound) {
                            t.state = TierState::NoDstAvailable;
                        }
                    }
                }
                moved.push((bound, target));
            }
        }
        Some((reg, moved))
    }

    /// Moves a tier to another node, keeping its id and bindings.
    pub fn move_tier(&mut self, tier_id: &str, node_id: &str) {
        let Some(t) = self.tier_mut(tier_id) else { return };
        let from = std::mem::replace(&mut t.node_id, node_id.to_string());
        if t.kind == TierKind::Dst {
            if self.relations.node_system.get(&from).map(String::as_str) == Some(tier_id) {
                self.relations.node_system.remove(&from);
                let next = self
                    .registry
                    .tiers
                    .iter()
                    .find(|t| t.kind == TierKind::Dst && t.node_id == from)
                    .map(|t| t.tier_id.clone());
                if let Some(next) = next {
                    self.relations.node_system.insert(from, next);
                }
            }
            self.relations.node_system.entry(node_id.to_string()).or_insert_with(|| tier_id.to_string());
        }
    }

    /// Removes a node with its tiers and every relation naming them.
    pub fn remove_node(&mut self, node_id: &str) -> Option<NodeRegistration> {
        let pos = self.registry.nodes.iter().position(|n| n.node_id == node_id)?;
        for t in self.tiers_on(node_id) {
            self.remove_tier(&t.tier_id);
        }
        self.relations.node_system.remove(node_id);
        Some(self.registry.nodes.remove(pos))
    }

    /// Checks referential integrity and registration invariants.
    pub fn audit(&self) -> Result<(), String> {
        let mut node_ids = BTreeSet::new();
        for n in &self.registry.nodes {
            if !node_ids.insert(n.node_id.as_str()) {
                return Err(format!("duplicate node id {}", n.node_id));
            }
            if !valid_color(&n.color) {
                return Err(format!("node {} has bad color {}", n.node_id, n.color));
            }
            if !self.registry.instances.contains_key(&n.instance_id) {
                return Err(format!("node {} names unknown instance {}", n.node_id, n.instance_id));
            }
        }
        let mut tier_ids = BTreeSet::new();
        for t in &self.registry.tiers {
            if !tier_ids.insert(t.tier_id.as_str()) {
                return Err(format!("duplicate tier id {}", t.tier_id));
            }
            if !node_ids.contains(t.node_id.as_str()) {
                return Err(format!("tier {} on unknown node {}", t.tier_id, t.node_id));
            }
            if t.instance_count == 0 {
                return Err(format!("tier {} has no instances", t.tier_id));
            }
            if matches!(t.kind, TierKind::Dgt | TierKind::Dwt) {
                let bound = self.relations.dgt_dwt.contains_key(&t.tier_id);
                if bound == (t.state == TierState::NoDstAvailable) {
                    return Err(format!("tier {} binding disagrees with state {:?}", t.tier_id, t.state));
                }
            }
        }
        let is_dst = |id: &str| self.tier(id).map(|t| t.kind == TierKind::Dst).unwrap_or(false);
        for (node, dst) in &self.relations.node_system {
            if !node_ids.contains(node.as_str()) {
                return Err(format!("node relation names unknown node {node}"));
            }
            if !is_dst(dst) || self.tier(dst).map(|t| &t.node_id) != Some(node) {
                return Err(format!("node {node} relation names {dst}, not a store on that node"));
            }
        }
        for t in self.dst_registrations() {
            if !self.relations.node_system.contains_key(&t.node_id) {
                return Err(format!("store {} missing from node relation", t.tier_id));
            }
        }
        for (tier, dst) in &self.relations.dgt_dwt {
            match self.tier(tier) {
                Some(t) if matches!(t.kind, TierKind::Dgt | TierKind::Dwt) => {}
                _ => return Err(format!("binding names unknown generator or worker {tier}")),
            }
            if !is_dst(dst) {
                return Err(format!("tier {tier} bound to unknown store {dst}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiers::Configuration;

    fn node(id: &str, name: &str) -> NodeRegistration {
        NodeRegistration {
            node_id: id.into(),
            node_name: name.into(),
            address: format!("127.0.0.1:{}", 7000 + id.len()),
            color: "#00ff00".into(),
            registered_at: 0,
            status: NodeStatus::Started,
            instance_id: "i".into(),
        }
    }

    fn tier(id: &str, kind: TierKind, node: &str) -> TierRegistration {
        TierRegistration {
            tier_id: id.into(),
            kind,
            node_id: node.into(),
            instance_count: 1,
            config: Configuration::new(),
            state: TierState::Running,
        }
    }

    fn keeper() -> GmtInfoKeeper {
        let mut k = GmtInfoKeeper::new();
        k.add_instance(GipsyInstance {
            instance_id: "i".into(),
            instance_name: "main".into(),
        });
        k.upsert_node(node("n1", "a"));
        k.upsert_node(node("n2", "b"));
        k
    }

    #[test]
    fn upsert_updates_in_place() {
        let mut k = keeper();
        let mut again = node("n9", "a");
        again.address = k.node("n1").unwrap().address.clone();
        again.color = "#123456".into();
        let (stored, existed) = k.upsert_node(again);
        assert!(existed);
        assert_eq!(stored.node_id, "n1");
        assert_eq!(k.nodes().len(), 2);
        assert_eq!(k.node("n1").unwrap().color, "#123456");
    }

    #[test]
    fn least_loaded_store_with_id_tie_break() {
        let mut k = keeper();
        k.add_tier(tier("dst-b", TierKind::Dst, "n1"));
        k.add_tier(tier("dst-a", TierKind::Dst, "n2"));
        assert_eq!(k.choose_dst("i", &BTreeSet::new()).as_deref(), Some("dst-a"));
        k.add_tier(tier("w1", TierKind::Dwt, "n1"));
        k.bind("w1", "dst-a");
        assert_eq!(k.choose_dst("i", &BTreeSet::new()).as_deref(), Some("dst-b"));
        assert_eq!(k.choose_dst("other", &BTreeSet::new()), None);
        k.audit().unwrap();
    }

    #[test]
    fn removing_a_store_rebinds_or_orphans() {
        let mut k = keeper();
        k.add_tier(tier("d1", TierKind::Dst, "n1"));
        k.add_tier(tier("d2", TierKind::Dst, "n2"));
        k.add_tier(tier("g", TierKind::Dgt, "n1"));
        k.bind("g", "d1");
        let (_, moved) = k.remove_tier("d1").unwrap();
        assert_eq!(moved, vec![("g".to_string(), Some("d2".to_string()))]);
        assert_eq!(k.binding("g"), Some("d2"));
        k.audit().unwrap();
        let (_, moved) = k.remove_tier("d2").unwrap();
        assert_eq!(moved, vec![("g".to_string(), None)]);
        assert_eq!(k.tier("g").unwrap().state, TierState::NoDstAvailable);
        k.audit().unwrap();
        assert!(k.remove_tier("d2").is_none());
    }

    #[test]
    fn removing_a_node_drops_its_relations() {
        let mut k = keeper();
        k.add_tier(tier("d1", TierKind::Dst, "n1"));
        k.add_tier(tier("w", TierKind::Dwt, "n2"));
        k.bind("w", "d1");
        k.remove_node("n1").unwrap();
        assert!(k.relations.node_system.is_empty());
        assert_eq!(k.binding("w"), None);
        k.audit().unwrap();
    }

    #[test]
    fn moving_a_store_updates_node_relation() {
        let mut k = keeper();
        k.add_tier(tier("d1", TierKind::Dst, "n1"));
        k.move_tier("d1", "n2");
        assert_eq!(k.relations.node_system.get("n2").map(String::as_str), Some("d1"));
        assert!(!k.relations.node_system.contains_key("n1"));
        k.audit().unwrap();
    }

    #[test]
    fn auditor_catches_dangling_binding() {
        let mut k = keeper();
        k.add_tier(tier("w", TierKind::Dwt, "n1"));
        k.relations.dgt_dwt.insert("w".into(), "ghost".into());
        assert!(k.audit().is_err());
    }
}
