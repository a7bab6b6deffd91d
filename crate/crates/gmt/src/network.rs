//! Saved grid layouts: nodes, tiers and which store each tier uses.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use edgrid_core::demand::to_canonical_string;
use edgrid_core::tiers::{
    Configuration, GipsyInstance, Gmt, DEFAULT_INSTANCE, InstanceTopology, NodeRegistration, NodeStatus, TierError, TierKind,
    TierRegistration, TierState,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("the manager already has nodes")]
    NotEmpty,
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tier(#[from] TierError),
}

impl NetworkError {
    pub fn code(&self) -> &'static str {
        match self {
            NetworkError::Integrity(_) => "IntegrityError",
            NetworkError::NotEmpty => "NotEmpty",
            NetworkError::Malformed(_) => "InvalidBody",
            NetworkError::Tier(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub node_id: String,
    pub node_name: String,
    pub address: String,
    pub color: String,
    pub registered_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierEntry {
    pub tier_id: String,
    pub kind: TierKind,
    pub node_id: String,
    pub instance_count: u32,
    pub config: Configuration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub instance: GipsyInstance,
    pub nodes: Vec<NodeEntry>,
    pub tiers: Vec<TierEntry>,
    /// Generator or worker tier, then the store tier it uses.
    pub edges: Vec<(String, String)>,
}

impl NetworkDocument {
    pub fn to_canonical(&self) -> String {
        to_canonical_string(self).expect("documents hold no floats")
    }

    pub fn parse(text: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(text).map_err(|e| NetworkError::Malformed(e.to_string()))
    }

    /// Every tier sits on a listed node and every edge joins a generator or
    /// worker to a store.
    pub fn check(&self) -> Result<(), NetworkError> {
        let mut nodes = BTreeSet::new();
        for n in &self.nodes {
            if !nodes.insert(n.node_id.as_str()) {
                return Err(NetworkError::Integrity(format!("duplicate node {}", n.node_id)));
            }
        }
        let mut kinds = std::collections::BTreeMap::new();
        for t in &self.tiers {
            if !nodes.contains(t.node_id.as_str()) {
                return Err(NetworkError::Integrity(format!(
                    "tier {} references missing node {}",
                    t.tier_id, t.node_id
                )));
            }
            if kinds.insert(t.tier_id.as_str(), t.kind).is_some() {
                return Err(NetworkError::Integrity(format!("duplicate tier {}", t.tier_id)));
            }
        }
        let mut sources = BTreeSet::new();
        for (from, to) in &self.edges {
            match kinds.get(from.as_str()) {
                Some(TierKind::Dgt | TierKind::Dwt) => {}
                Some(k) => return Err(NetworkError::Integrity(format!("edge from {from}, a {k}"))),
                None => return Err(NetworkError::Integrity(format!("edge from missing tier {from}"))),
            }
            if kinds.get(to.as_str()) != Some(&TierKind::Dst) {
                return Err(NetworkError::Integrity(format!("edge to {to}, which is not a store")));
            }
            if !sources.insert(from.as_str()) {
                return Err(NetworkError::Integrity(format!("tier {from} has two stores")));
            }
        }
        Ok(())
    }
}

/// Document for the manager's default instance.
pub fn save_network(gmt: &Gmt) -> NetworkDocument {
    let keeper = gmt.keeper();
    let instance = keeper
        .instance(DEFAULT_INSTANCE)
        .cloned()
        .expect("the default instance always exists");
    let nodes: Vec<NodeEntry> = keeper
        .nodes()
        .iter()
        .filter(|n| n.instance_id == instance.instance_id)
        .map(|n| NodeEntry {
            node_id: n.node_id.clone(),
            node_name: n.node_name.clone(),
            address: n.address.clone(),
            color: n.color.clone(),
            registered_at: n.registered_at,
        })
        .collect();
    let ids: BTreeSet<_> = nodes.iter().map(|n| n.node_id.clone()).collect();
    let tiers: Vec<TierEntry> = keeper
        .tiers()
        .iter()
        .filter(|t| ids.contains(&t.node_id))
        .map(|t| TierEntry {
            tier_id: t.tier_id.clone(),
            kind: t.kind,
            node_id: t.node_id.clone(),
            instance_count: t.instance_count,
            config: t.config.clone(),
        })
        .collect();
    let edges = tiers
        .iter()
        .filter_map(|t| keeper.binding(&t.tier_id).map(|d| (t.tier_id.clone(), d.to_string())))
        .collect();
    NetworkDocument {
        instance,
        nodes,
        tiers,
        edges,
    }
}

/// Rebuilds a document's topology in a manager with no nodes. Nodes come
/// back started and tiers keep their ids and order.
pub fn load_network(gmt: &Gmt, doc: &NetworkDocument) -> Result<InstanceTopology, NetworkError> {
    doc.check()?;
    if !gmt.keeper().nodes().is_empty() {
        return Err(NetworkError::NotEmpty);
    }
    let nodes = doc
        .nodes
        .iter()
        .map(|n| NodeRegistration {
            node_id: n.node_id.clone(),
            node_name: n.node_name.clone(),
            address: n.address.clone(),
            color: n.color.clone(),
            registered_at: n.registered_at,
            status: NodeStatus::Started,
            instance_id: doc.instance.instance_id.clone(),
        })
        .collect();
    let tiers = doc
        .tiers
        .iter()
        .map(|t| TierRegistration {
            tier_id: t.tier_id.clone(),
            kind: t.kind,
            node_id: t.node_id.clone(),
            instance_count: t.instance_count,
            config: t.config.clone(),
            state: TierState::Running,
        })
        .collect();
    gmt.restore(doc.instance.clone(), nodes, tiers, doc.edges.clone()).map_err(|e| match e {
        TierError::Integrity(m) => NetworkError::Integrity(m),
        other => NetworkError::Tier(other),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgrid_core::tiers::NodeAction;

    fn populated() -> Gmt {
        let g = Gmt::default();
        let a = g.register_node("a", "127.0.0.1:7001", "#ff0000", "instance-1").unwrap();
        let b = g.register_node("b", "127.0.0.1:7002", "#0000ff", "instance-1").unwrap();
        for n in [&a, &b] {
            g.node_lifecycle(&n.node_id, NodeAction::Start).unwrap();
        }
        let cfg = Configuration::from_pairs([("max.demands", "5")]).unwrap();
        g.allocate_tier(&a.node_id, TierKind::Dst, 1, &cfg).unwrap();
        g.allocate_tier(&b.node_id, TierKind::Dwt, 2, &Configuration::new()).unwrap();
        g.allocate_tier(&a.node_id, TierKind::Dgt, 1, &Configuration::new()).unwrap();
        g
    }

    #[test]
    fn fresh_manager_saves_an_empty_document() {
        let doc = save_network(&Gmt::default());
        assert!(doc.nodes.is_empty() && doc.tiers.is_empty() && doc.edges.is_empty());
    }

    #[test]
    fn save_load_save_is_a_fixed_point() {
        let a = save_network(&populated()).to_canonical();
        let fresh = Gmt::default();
        load_network(&fresh, &NetworkDocument::parse(&a).unwrap()).unwrap();
        let b = save_network(&fresh).to_canonical();
        assert_eq!(a, b);
        fresh.audit().unwrap();
        assert!(fresh.keeper().nodes().iter().all(|n| n.status == NodeStatus::Started));
    }

    #[test]
    fn dangling_references_are_rejected() {
        let mut doc = save_network(&populated());
        doc.tiers[0].node_id = "node-404".into();
        assert!(matches!(load_network(&Gmt::default(), &doc), Err(NetworkError::Integrity(_))));
        let mut doc = save_network(&populated());
        doc.edges.push(("dst-3".into(), "dwt-4".into()));
        assert!(matches!(doc.check(), Err(NetworkError::Integrity(_))));
    }

    #[test]
    fn loading_twice_is_refused() {
        let doc = save_network(&populated());
        let g = Gmt::default();
        load_network(&g, &doc).unwrap();
        assert_eq!(load_network(&g, &doc), Err(NetworkError::NotEmpty));
    }

    #[test]
    fn malformed_text() {
        assert!(matches!(NetworkDocument::parse("{"), Err(NetworkError::Malformed(_))));
    }
}
