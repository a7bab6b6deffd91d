//! Demands, contexts, values and results, plus their canonical encoding.
//!
//! Every demand has exactly one valid byte form: a compact JSON object with
//! lexicographically sorted keys and no whitespace. The SHA-256 of that form
//! is the demand's [`SignatureKey`], used by the store for memoization and
//! duplicate suppression.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors from building, validating or decoding demand-model values.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DemandError {
    #[error("invalid demand: {0}")]
    InvalidDemand(String),
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    #[error("unknown demand kind `{0}`")]
    UnknownKind(String),
    #[error("non-finite float in value")]
    NonFinite,
}

/// Serializes `value` to its canonical text form.
///
/// Object keys come out sorted because `serde_json` maps are ordered maps.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String, DemandError> {
    let tree = serde_json::to_value(value).map_err(|e| DemandError::MalformedEncoding(e.to_string()))?;
    Ok(tree.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Multidimensional evaluation context: dimension name to integer tag.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context {
    entries: BTreeMap<String, i64>,
}

impl Context {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a context from `(dimension, tag)` pairs; later duplicates win.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, DemandError>
    where
        I: IntoIterator<Item = (S, i64)>,
        S: Into<String>,
    {
        let mut ctx = Self::new();
        for (dim, tag) in pairs {
            ctx.insert(dim, tag)?;
        }
        Ok(ctx)
    }

    pub fn insert(&mut self, dimension: impl Into<String>, tag: i64) -> Result<(), DemandError> {
        let dimension = dimension.into();
        if dimension.is_empty() {
            return Err(DemandError::InvalidDemand("empty context dimension name".into()));
        }
        self.entries.insert(dimension, tag);
        Ok(())
    }

    pub fn get(&self, dimension: &str) -> Option<i64> {
        self.entries.get(dimension).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, i64)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Returns `base` refined by `overrides`: shared dimensions take the
    /// override's tag.
    pub fn merge(base: &Context, overrides: &Context) -> Context {
        let mut entries = base.entries.clone();
        entries.extend(overrides.entries.iter().map(|(k, v)| (k.clone(), *v)));
        Context { entries }
    }

    fn validate(&self) -> Result<(), DemandError> {
        if self.entries.keys().any(String::is_empty) {
            return Err(DemandError::InvalidDemand("empty context dimension name".into()));
        }
        Ok(())
    }
}

/// A serializable value carried in demand parameters and results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Int(i64),
    Float(#[serde(with = "canonical_f64")] f64),
    Text(String),
    Bytes(#[serde(with = "hex_bytes")] Vec<u8>),
    FloatVector(#[serde(with = "canonical_f64_vec")] Vec<f64>),
    Nested(Vec<Value>),
}

impl Value {
    pub fn is_finite(&self) -> bool {
        match self {
            Value::Float(f) => f.is_finite(),
            Value::FloatVector(v) => v.iter().all(|f| f.is_finite()),
            Value::Nested(items) => items.iter().all(Value::is_finite),
            Value::Int(_) | Value::Text(_) | Value::Bytes(_) => true,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(f) => Some(*f),
            Value::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_float_vector(&self) -> Option<&[f64]> {
        match self {
            Value::FloatVector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_nested(&self) -> Option<&[Value]> {
        match self {
            Value::Nested(v) => Some(v),
            _ => None,
        }
    }
}

// -0.0 is folded into 0.0 so equal values share one encoding.
fn fold_zero(f: f64) -> f64 {
    if f == 0.0 {
        0.0
    } else {
        f
    }
}

mod canonical_f64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &f64, s: S) -> Result<S::Ok, S::Error> {
        if !f.is_finite() {
            return Err(serde::ser::Error::custom("non-finite float"));
        }
        s.serialize_f64(super::fold_zero(*f))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let f = f64::deserialize(d)?;
        if !f.is_finite() {
            return Err(D::Error::custom("non-finite float"));
        }
        Ok(f)
    }
}

mod canonical_f64_vec {
    use serde::{de::Error as _, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for f in v {
            if !f.is_finite() {
                return Err(serde::ser::Error::custom("non-finite float"));
            }
            seq.serialize_element(&super::fold_zero(*f))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.iter().any(|f| !f.is_finite()) {
            return Err(D::Error::custom("non-finite float"));
        }
        Ok(v)
    }
}

mod hex_bytes {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(D::Error::custom)
    }
}

/// The four demand kinds. Each variant holds exactly its mandated fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Demand {
    Intensional {
        geer_id: String,
        program_id: String,
        context: Context,
    },
    /// `procedure_name` names a procedure registered in worker pools; it
    /// replaces mobile code.
    Procedural {
        geer_id: String,
        program_id: String,
        procedure_name: String,
        params: Vec<Value>,
        context: Context,
    },
    Resource {
        resource_type_id: String,
        resource_id: String,
    },
    System {
        destination_tier_id: String,
        system_demand_type_id: String,
        params: Vec<Value>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DemandKind {
    Intensional,
    Procedural,
    Resource,
    System,
}

impl DemandKind {
    pub const ALL: [DemandKind; 4] = [
        DemandKind::Intensional,
        DemandKind::Procedural,
        DemandKind::Resource,
        DemandKind::System,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DemandKind::Intensional => "Intensional",
            DemandKind::Procedural => "Procedural",
            DemandKind::Resource => "Resource",
            DemandKind::System => "System",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl Demand {
    pub fn procedural(
        geer_id: impl Into<String>,
        program_id: impl Into<String>,
        procedure_name: impl Into<String>,
        params: Vec<Value>,
        context: Context,
    ) -> Self {
        Demand::Procedural {
            geer_id: geer_id.into(),
            program_id: program_id.into(),
            procedure_name: procedure_name.into(),
            params,
            context,
        }
    }

    pub fn kind(&self) -> DemandKind {
        match self {
            Demand::Intensional { .. } => DemandKind::Intensional,
            Demand::Procedural { .. } => DemandKind::Procedural,
            Demand::Resource { .. } => DemandKind::Resource,
            Demand::System { .. } => DemandKind::System,
        }
    }

    pub fn procedure_name(&self) -> Option<&str> {
        match self {
            Demand::Procedural { procedure_name, .. } => Some(procedure_name),
            _ => None,
        }
    }

    pub fn params(&self) -> &[Value] {
        match self {
            Demand::Procedural { params, .. } | Demand::System { params, .. } => params,
            _ => &[],
        }
    }

    pub fn context(&self) -> Option<&Context> {
        match self {
            Demand::Intensional { context, .. } | Demand::Procedural { context, .. } => Some(context),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), DemandError> {
        match self {
            Demand::Intensional { context, .. } => context.validate(),
            Demand::Procedural {
                procedure_name,
                params,
                context,
                ..
            } => {
                if procedure_name.is_empty() {
                    return Err(DemandError::InvalidDemand(
                        "procedural demand without procedure_name".into(),
                    ));
                }
                if !params.iter().all(Value::is_finite) {
                    return Err(DemandError::NonFinite);
                }
                context.validate()
            }
            Demand::Resource { .. } => Ok(()),
            Demand::System { params, .. } => {
                if params.iter().all(Value::is_finite) {
                    Ok(())
                } else {
                    Err(DemandError::NonFinite)
                }
            }
        }
    }

    /// Canonical byte form. Decoding these bytes yields an equal demand.
    pub fn encode(&self) -> Result<Vec<u8>, DemandError> {
        self.validate()?;
        Ok(to_canonical_string(self)?.into_bytes())
    }

    /// Parses a canonical encoding. Bytes that decode but are not in
    /// canonical form (key order, whitespace, number spelling) are rejected.
    pub fn decode(bytes: &[u8]) -> Result<Demand, DemandError> {
        if bytes.is_empty() {
            return Err(DemandError::MalformedEncoding("empty input".into()));
        }
        let tree: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| DemandError::MalformedEncoding(e.to_string()))?;
        let kind = tree
            .get("kind")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| DemandError::MalformedEncoding("missing kind tag".into()))?;
        if DemandKind::from_name(kind).is_none() {
            return Err(DemandError::UnknownKind(kind.to_string()));
        }
        let demand: Demand =
            serde_json::from_value(tree).map_err(|e| DemandError::MalformedEncoding(e.to_string()))?;
        demand.validate()?;
        if demand.encode()? != bytes {
            return Err(DemandError::MalformedEncoding("not in canonical form".into()));
        }
        Ok(demand)
    }

    pub fn signature(&self) -> Result<SignatureKey, DemandError> {
        Ok(SignatureKey(sha256_hex(&self.encode()?)))
    }
}

/// SHA-256 digest of a demand's canonical encoding, as lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SignatureKey(String);

impl SignatureKey {
    pub fn parse(digest: &str) -> Result<Self, DemandError> {
        let ok = digest.len() == 64 && digest.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if ok {
            Ok(SignatureKey(digest.to_string()))
        } else {
            Err(DemandError::MalformedEncoding(format!("bad signature digest `{digest}`")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SignatureKey {
    type Error = DemandError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        SignatureKey::parse(&s)
    }
}

impl From<SignatureKey> for String {
    fn from(k: SignatureKey) -> String {
        k.0
    }
}

impl fmt::Display for SignatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Computes the signature of a demand.
pub fn canonical_signature(demand: &Demand) -> Result<SignatureKey, DemandError> {
    demand.signature()
}

/// A computed value for one demand signature.
///
/// `failure` is set when the worker's procedure reported an error; the value
/// is then [`Value::Nested`] of nothing and should be ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandResult {
    pub signature: SignatureKey,
    pub value: Value,
    pub worker_id: String,
    pub computed_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl DemandResult {
    pub fn success(signature: SignatureKey, value: Value, worker_id: impl Into<String>, computed_at: u64) -> Self {
        Self {
            signature,
            value,
            worker_id: worker_id.into(),
            computed_at,
            failure: None,
        }
    }

    pub fn failed(signature: SignatureKey, message: impl Into<String>, worker_id: impl Into<String>, computed_at: u64) -> Self {
        Self {
            signature,
            value: Value::Nested(Vec::new()),
            worker_id: worker_id.into(),
            computed_at,
            failure: Some(message.into()),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

/// One stage of a generator plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_name: String,
    pub procedure_name: String,
    pub param_template: Vec<Value>,
}

impl StagePlan {
    pub fn new(stage_name: impl Into<String>, procedure_name: impl Into<String>, param_template: Vec<Value>) -> Self {
        Self {
            stage_name: stage_name.into(),
            procedure_name: procedure_name.into(),
            param_template,
        }
    }
}

/// Generic eduction engine resource: a program id plus an ordered stage plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geer {
    pub geer_id: String,
    pub program_id: String,
    pub plan: Vec<StagePlan>,
}

impl Geer {
    pub fn new(geer_id: impl Into<String>, program_id: impl Into<String>, plan: Vec<StagePlan>) -> Result<Self, DemandError> {
        let geer = Self {
            geer_id: geer_id.into(),
            program_id: program_id.into(),
            plan,
        };
        geer.validate()?;
        Ok(geer)
    }

    pub fn validate(&self) -> Result<(), DemandError> {
        if self.plan.is_empty() {
            return Err(DemandError::InvalidDemand("empty plan".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for stage in &self.plan {
            if !seen.insert(stage.stage_name.as_str()) {
                return Err(DemandError::InvalidDemand(format!("duplicate stage `{}`", stage.stage_name)));
            }
            if stage.procedure_name.is_empty() {
                return Err(DemandError::InvalidDemand(format!(
                    "stage `{}` has no procedure",
                    stage.stage_name
                )));
            }
        }
        Ok(())
    }
}
