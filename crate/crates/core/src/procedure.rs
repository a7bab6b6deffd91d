//! Named procedures a worker can execute for procedural demands.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::demand::Value;

pub type ProcedureFn = dyn Fn(&[Value]) -> Result<Value, String> + Send + Sync;

/// A worker's procedure class pool, keyed by procedure name.
#[derive(Clone, Default)]
pub struct ProcedurePool {
    procedures: BTreeMap<String, Arc<ProcedureFn>>,
}

impl ProcedurePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: impl Into<String>, f: F) -> &mut Self
    where
        F: Fn(&[Value]) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.procedures.insert(name.into(), Arc::new(f));
        self
    }

    pub fn with<F>(mut self, name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[Value]) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.register(name, f);
        self
    }

    /// Pool holding only the named procedures of `self`.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Self {
        let procedures = names
            .into_iter()
            .filter_map(|n| self.procedures.get_key_value(n).map(|(k, v)| (k.clone(), v.clone())))
            .collect();
        Self { procedures }
    }

    pub fn merge(mut self, other: ProcedurePool) -> Self {
        self.procedures.extend(other.procedures);
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.procedures.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Arc<ProcedureFn>> {
        self.procedures.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.procedures.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.procedures.is_empty()
    }

    pub fn call(&self, name: &str, params: &[Value]) -> Result<Value, String> {
        match self.procedures.get(name) {
            Some(f) => f(params),
            None => Err(format!("procedure `{name}` is not registered")),
        }
    }
}

impl fmt::Debug for ProcedurePool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.procedures.keys()).finish()
    }
}

/// Procedures useful for wiring tests and demos.
pub fn basic_procedures() -> ProcedurePool {
    ProcedurePool::new()
        .with("identity", |params| params.last().cloned().ok_or_else(|| "identity needs an argument".to_string()))
        .with("echo", |params| Ok(Value::Nested(params.to_vec())))
        .with("fail", |_| Err("procedure failed on purpose".to_string()))
}
