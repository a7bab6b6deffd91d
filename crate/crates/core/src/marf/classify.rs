use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MarfError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: Vec<f64>,
    pub count: u64,
}

/// Per-subject mean feature vectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub clusters: BTreeMap<i64, Cluster>,
}

impl TrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.clusters.values().next().map(|c| c.mean.len())
    }
}

/// Subjects ranked by ascending distance, ties by ascending subject id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub ranked: Vec<(i64, f64)>,
}

impl ResultSet {
    pub fn best(&self) -> Option<i64> {
        self.ranked.first().map(|(id, _)| *id)
    }
}

fn check_dimension(ts: &TrainingSet, features: &[f64]) -> Result<(), MarfError> {
    match ts.dimension() {
        Some(d) if d != features.len() => Err(MarfError::DimensionMismatch {
            expected: d,
            got: features.len(),
        }),
        _ => Ok(()),
    }
}

/// Folds `features` into the subject's running mean.
pub fn train(ts: &TrainingSet, subject_id: i64, features: &[f64]) -> Result<TrainingSet, MarfError> {
    check_dimension(ts, features)?;
    if features.iter().any(|x| !x.is_finite()) {
        return Err(MarfError::BadParams("features must be finite".into()));
    }
    let mut out = ts.clone();
    match out.clusters.get_mut(&subject_id) {
        Some(c) => {
            let n = c.count as f64;
            for (m, x) in c.mean.iter_mut().zip(features) {
                *m = (*m * n + x) / (n + 1.0);
            }
            c.count += 1;
        }
        None => {
            out.clusters.insert(
                subject_id,
                Cluster {
                    mean: features.to_vec(),
                    count: 1,
                },
            );
        }
    }
    Ok(out)
}

pub fn classify(ts: &TrainingSet, features: &[f64]) -> Result<ResultSet, MarfError> {
    if ts.is_empty() {
        return Err(MarfError::EmptyTrainingSet);
    }
    check_dimension(ts, features)?;
    let mut ranked: Vec<(i64, f64)> = ts
        .clusters
        .iter()
        .map(|(id, c)| {
            let d = c.mean.iter().zip(features).map(|(m, x)| (m - x) * (m - x)).sum::<f64>().sqrt();
            (*id, d)
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ResultSet { ranked })
}

/// Reads network outputs as the bits of an id, most significant first.
pub fn interpret_as_binary(outputs: &[f64]) -> u64 {
    outputs.iter().fold(0u64, |id, o| id * 2 + u64::from(*o > 0.5))
}
