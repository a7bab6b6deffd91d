//! The generator tier: walks a plan, one procedural demand per stage.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::TierError;
use crate::demand::{Context, Demand, DemandResult, Geer, SignatureKey, StagePlan, Value};
use crate::store::{DemandSpace, DepositOutcome};

/// Dimension added to the context to tell the stages of one plan apart.
pub const STAGE_DIMENSION: &str = "stage";

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Longest wait for any one stage's result.
    pub timeout: Duration,
    /// Name the generator waits under.
    pub requester: String,
    /// Procedures some worker can run. A stage naming any other fails
    /// before its demand is generated.
    pub catalog: Option<BTreeSet<String>>,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            requester: "dgt".into(),
            catalog: None,
            cancel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_name: String,
    pub procedure_name: String,
    pub signature: SignatureKey,
    /// `Enqueued`, `AlreadyPending` or `Cached`.
    pub outcome: String,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub result: DemandResult,
    pub stages: Vec<StageRecord>,
}

impl Evaluation {
    pub fn value(&self) -> &Value {
        &self.result.value
    }

    /// True when every stage was answered from the warehouse.
    pub fn all_cached(&self) -> bool {
        self.stages.iter().all(|s| s.outcome == "Cached")
    }
}

fn outcome_name(o: &DepositOutcome) -> &'static str {
    match o {
        DepositOutcome::Enqueued => "Enqueued",
        DepositOutcome::AlreadyPending => "AlreadyPending",
        DepositOutcome::Cached(_) => "Cached",
    }
}

fn cancelled(opts: &EvalOptions) -> bool {
    opts.cancel.as_ref().map(|c| c.load(Ordering::SeqCst)).unwrap_or(false)
}

fn await_result(
    space: &dyn DemandSpace,
    sig: &SignatureKey,
    stage: &StagePlan,
    opts: &EvalOptions,
) -> Result<DemandResult, TierError> {
    const SLICE: Duration = Duration::from_millis(50);
    let deadline = Instant::now() + opts.timeout;
    loop {
        if cancelled(opts) {
            return Err(TierError::Cancelled);
        }
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(TierError::EvaluationTimeout {
                stage: stage.stage_name.clone(),
            });
        }
        if let Some(r) = space.wait_result(sig, &opts.requester, left.min(SLICE))? {
            return Ok(r);
        }
    }
}

/// Evaluates `geer` on `input`. Each stage's demand carries the stage's
/// template parameters followed by the previous stage's value. `observer`
/// sees each demand just before it is deposited.
pub fn dgt_evaluate(
    geer: &Geer,
    context: &Context,
    input: Value,
    space: &dyn DemandSpace,
    opts: &EvalOptions,
    observer: &mut dyn FnMut(usize, &StagePlan, &Demand),
) -> Result<Evaluation, TierError> {
    geer.validate()
        .map_err(|e| TierError::InvalidConfig(e.to_string()))?;
    let mut previous = input;
    let mut stages = Vec::with_capacity(geer.plan.len());
    let mut last = None;
    for (i, stage) in geer.plan.iter().enumerate() {
        if cancelled(opts) {
            return Err(TierError::Cancelled);
        }
        if let Some(catalog) = &opts.catalog {
            if !catalog.contains(&stage.procedure_name) {
                return Err(TierError::StageFailed {
                    stage: stage.stage_name.clone(),
                    message: format!("procedure `{}` is not registered", stage.procedure_name),
                });
            }
        }
        let started = Instant::now();
        let mut params = stage.param_template.clone();
        params.push(previous);
        let mut stage_ctx = Context::new();
        stage_ctx
            .insert(STAGE_DIMENSION, i as i64)
            .map_err(|e| TierError::InvalidConfig(e.to_string()))?;
        let demand = Demand::procedural(
            &geer.geer_id,
            &geer.program_id,
            &stage.procedure_name,
            params,
            Context::merge(context, &stage_ctx),
        );
        let sig = demand.signature().map_err(|e| TierError::StageFailed {
            stage: stage.stage_name.clone(),
            message: e.to_string(),
        })?;
        observer(i, stage, &demand);
        let outcome = space.deposit_demand(&demand)?;
        let name = outcome_name(&outcome);
        let result = match outcome {
            DepositOutcome::Cached(r) => r,
            _ => await_result(space, &sig, stage, opts)?,
        };
        if let Some(message) = &result.failure {
            return Err(TierError::StageFailed {
                stage: stage.stage_name.clone(),
                message: message.clone(),
            });
        }
        stages.push(StageRecord {
            stage_name: stage.stage_name.clone(),
            procedure_name: stage.procedure_name.clone(),
            signature: sig,
            outcome: name.into(),
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
        previous = result.value.clone();
        last = Some(result);
    }
    let result = last.ok_or_else(|| TierError::InvalidConfig("empty plan".into()))?;
    Ok(Evaluation { result, stages })
}
