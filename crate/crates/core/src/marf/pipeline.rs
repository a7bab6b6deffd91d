//! The workload as a generator plan plus worker procedures.
//!
//! Each stage procedure takes its plan parameters followed by the previous
//! stage's value. Values on the wire:
//!
//! - source: `["sine", freq, rate, n]`, `["wav", bytes]` or `["raw", rate, data]`
//! - sample: `[rate, data]`
//! - features: a float vector
//! - training set: `[[subject, count, mean], ...]`
//! - result set: `[[subject, distance], ...]`

use serde::Serialize;

use super::{
    classify, load_sample, lpc_features, normalize, remove_noise, remove_silence, MarfError, ResultSet, Sample,
    SampleFormat, SampleSource, TrainingSet,
};
use crate::demand::{sha256_hex, to_canonical_string, Geer, StagePlan, Value};
use crate::procedure::ProcedurePool;

pub const PROC_LOAD: &str = "marf.load_sample";
pub const PROC_PREPROCESS: &str = "marf.preprocess";
pub const PROC_EXTRACT: &str = "marf.lpc";
pub const PROC_CLASSIFY: &str = "marf.classify";

pub const STAGE_NAMES: [&str; 4] = ["sample_loading", "preprocessing", "feature_extraction", "classification"];
pub const CLASSIFICATION_STAGE: &str = "classification";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarfParams {
    pub window_len: usize,
    pub poles: usize,
    pub silence_threshold: f64,
}

impl Default for MarfParams {
    fn default() -> Self {
        Self {
            window_len: 128,
            poles: 20,
            silence_threshold: 0.01,
        }
    }
}

impl MarfParams {
    pub fn validate(&self) -> Result<(), MarfError> {
        if self.window_len < 2 || !self.window_len.is_multiple_of(2) {
            return Err(MarfError::BadParams(format!("window length {} must be even", self.window_len)));
        }
        if self.poles == 0 || self.poles >= self.window_len {
            return Err(MarfError::BadParams(format!(
                "poles {} must be in 1..{}",
                self.poles, self.window_len
            )));
        }
        if !(0.0..1.0).contains(&self.silence_threshold) {
            return Err(MarfError::BadParams(format!(
                "silence threshold {} outside [0, 1)",
                self.silence_threshold
            )));
        }
        Ok(())
    }
}

impl SampleSource {
    pub fn to_value(&self) -> Result<Value, MarfError> {
        Ok(match self {
            SampleSource::WavFile(path) => {
                let bytes = std::fs::read(path).map_err(|e| MarfError::Io(format!("{}: {e}", path.display())))?;
                Value::Nested(vec![Value::Text("wav".into()), Value::Bytes(bytes)])
            }
            SampleSource::WavBytes(bytes) => Value::Nested(vec![Value::Text("wav".into()), Value::Bytes(bytes.clone())]),
            SampleSource::Sine { freq, rate, n } => Value::Nested(vec![
                Value::Text("sine".into()),
                Value::Float(*freq),
                Value::Int(*rate as i64),
                Value::Int(*n as i64),
            ]),
            SampleSource::Raw { rate, data } => Value::Nested(vec![
                Value::Text("raw".into()),
                Value::Int(*rate as i64),
                Value::FloatVector(data.clone()),
            ]),
        })
    }

    pub fn from_value(v: &Value) -> Result<SampleSource, MarfError> {
        let bad = || MarfError::UnsupportedFormat(format!("not a sample source: {v:?}"));
        let items = v.as_nested().ok_or_else(bad)?;
        match (items.first().and_then(Value::as_text), &items[1..]) {
            (Some("wav"), [Value::Bytes(b)]) => Ok(SampleSource::WavBytes(b.clone())),
            (Some("sine"), [Value::Float(freq), Value::Int(rate), Value::Int(n)]) => Ok(SampleSource::Sine {
                freq: *freq,
                rate: u32::try_from(*rate).map_err(|_| bad())?,
                n: usize::try_from(*n).map_err(|_| bad())?,
            }),
            (Some("raw"), [Value::Int(rate), Value::FloatVector(data)]) => Ok(SampleSource::Raw {
                rate: u32::try_from(*rate).map_err(|_| bad())?,
                data: data.clone(),
            }),
            _ => Err(bad()),
        }
    }
}

impl Sample {
    pub fn to_value(&self) -> Value {
        Value::Nested(vec![Value::Int(self.sample_rate as i64), Value::FloatVector(self.data.clone())])
    }

    pub fn from_value(v: &Value) -> Result<Sample, MarfError> {
        match v.as_nested() {
            Some([Value::Int(rate), Value::FloatVector(data)]) => Ok(Sample::new(
                data.clone(),
                u32::try_from(*rate).map_err(|_| MarfError::BadParams(format!("bad rate {rate}")))?,
                SampleFormat::RawF64,
            )),
            _ => Err(MarfError::UnsupportedFormat(format!("not a sample: {v:?}"))),
        }
    }
}

impl TrainingSet {
    pub fn to_value(&self) -> Value {
        Value::Nested(
            self.clusters
                .iter()
                .map(|(id, c)| {
                    Value::Nested(vec![Value::Int(*id), Value::Int(c.count as i64), Value::FloatVector(c.mean.clone())])
                })
                .collect(),
        )
    }

    pub fn from_value(v: &Value) -> Result<TrainingSet, MarfError> {
        let bad = || MarfError::BadParams("not a training set".into());
        let mut ts = TrainingSet::new();
        for entry in v.as_nested().ok_or_else(bad)? {
            match entry.as_nested() {
                Some([Value::Int(id), Value::Int(count), Value::FloatVector(mean)]) if *count >= 1 => {
                    ts.clusters.insert(
                        *id,
                        super::Cluster {
                            mean: mean.clone(),
                            count: *count as u64,
                        },
                    );
                }
                _ => return Err(bad()),
            }
        }
        Ok(ts)
    }
}

impl ResultSet {
    pub fn to_value(&self) -> Value {
        Value::Nested(
            self.ranked
                .iter()
                .map(|(id, d)| Value::Nested(vec![Value::Int(*id), Value::Float(*d)]))
                .collect(),
        )
    }

    pub fn from_value(v: &Value) -> Result<ResultSet, MarfError> {
        let bad = || MarfError::BadParams("not a result set".into());
        let ranked = v
            .as_nested()
            .ok_or_else(bad)?
            .iter()
            .map(|e| match e.as_nested() {
                Some([Value::Int(id), Value::Float(d)]) => Ok((*id, *d)),
                _ => Err(bad()),
            })
            .collect::<Result<_, _>>()?;
        Ok(ResultSet { ranked })
    }
}

fn usize_param(v: &Value, what: &str) -> Result<usize, String> {
    v.as_int()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| format!("{what} must be a non-negative integer"))
}

fn split_input(params: &[Value], template_len: usize, name: &str) -> Result<(Vec<Value>, Value), String> {
    if params.len() != template_len + 1 {
        return Err(format!("{name} expects {} parameters, got {}", template_len + 1, params.len()));
    }
    Ok((params[..template_len].to_vec(), params[template_len].clone()))
}

fn preprocess(sample: &Sample, threshold: f64) -> Result<Sample, MarfError> {
    remove_silence(&remove_noise(&normalize(sample)), threshold)
}

/// Worker procedures for every workload stage.
pub fn marf_procedures() -> ProcedurePool {
    ProcedurePool::new()
        .with(PROC_LOAD, |params| {
            let (_, input) = split_input(params, 0, PROC_LOAD)?;
            let source = SampleSource::from_value(&input).map_err(|e| e.to_string())?;
            Ok(load_sample(&source).map_err(|e| e.to_string())?.to_value())
        })
        .with(PROC_PREPROCESS, |params| {
            let (template, input) = split_input(params, 1, PROC_PREPROCESS)?;
            let threshold = template[0].as_float().ok_or("threshold must be a float")?;
            let sample = Sample::from_value(&input).map_err(|e| e.to_string())?;
            Ok(preprocess(&sample, threshold).map_err(|e| e.to_string())?.to_value())
        })
        .with(PROC_EXTRACT, |params| {
            let (template, input) = split_input(params, 2, PROC_EXTRACT)?;
            let window = usize_param(&template[0], "window length")?;
            let poles = usize_param(&template[1], "poles")?;
            let sample = Sample::from_value(&input).map_err(|e| e.to_string())?;
            Ok(Value::FloatVector(lpc_features(&sample, window, poles).map_err(|e| e.to_string())?))
        })
        .with(PROC_CLASSIFY, |params| {
            let (template, input) = split_input(params, 1, PROC_CLASSIFY)?;
            let ts = TrainingSet::from_value(&template[0]).map_err(|e| e.to_string())?;
            let features = input.as_float_vector().ok_or("classification input must be a float vector")?;
            Ok(classify(&ts, features).map_err(|e| e.to_string())?.to_value())
        })
}

fn feature_stages(params: &MarfParams) -> Vec<StagePlan> {
    vec![
        StagePlan::new(STAGE_NAMES[0], PROC_LOAD, vec![]),
        StagePlan::new(STAGE_NAMES[1], PROC_PREPROCESS, vec![Value::Float(params.silence_threshold)]),
        StagePlan::new(
            STAGE_NAMES[2],
            PROC_EXTRACT,
            vec![Value::Int(params.window_len as i64), Value::Int(params.poles as i64)],
        ),
    ]
}

fn plan_id(prefix: &str, plan: &[StagePlan]) -> String {
    let canonical = to_canonical_string(plan).expect("plans hold finite values");
    format!("{prefix}-{}", &sha256_hex(canonical.as_bytes())[..16])
}

/// Full four-stage speaker identification plan. The training set travels in
/// the classification stage's parameters, so retraining changes the stage's
/// demand signature and never hits a stale cached result.
pub fn build_marf_geer(params: &MarfParams, training: &TrainingSet) -> Result<Geer, MarfError> {
    params.validate()?;
    let mut plan = feature_stages(params);
    plan.push(StagePlan::new(CLASSIFICATION_STAGE, PROC_CLASSIFY, vec![training.to_value()]));
    let id = plan_id("marf", &plan);
    Geer::new(id, "marf.speaker-id", plan).map_err(|e| MarfError::BadParams(e.to_string()))
}

/// Plan stopping after feature extraction, used to train.
pub fn build_feature_geer(params: &MarfParams) -> Result<Geer, MarfError> {
    params.validate()?;
    let plan = feature_stages(params);
    let id = plan_id("marf-features", &plan);
    Geer::new(id, "marf.features", plan).map_err(|e| MarfError::BadParams(e.to_string()))
}

/// The first three stages composed in-process.
pub fn run_local_features(params: &MarfParams, source: &SampleSource) -> Result<Vec<f64>, MarfError> {
    params.validate()?;
    let sample = load_sample(source)?;
    let clean = preprocess(&sample, params.silence_threshold)?;
    lpc_features(&clean, params.window_len, params.poles)
}

/// All four stages composed in-process.
pub fn run_local(params: &MarfParams, training: &TrainingSet, source: &SampleSource) -> Result<ResultSet, MarfError> {
    classify(training, &run_local_features(params, source)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marf::train;

    #[test]
    fn default_plan_shape() {
        let ts = train(&TrainingSet::new(), 1, &[0.0; 20]).unwrap();
        let geer = build_marf_geer(&MarfParams::default(), &ts).unwrap();
        let names: Vec<_> = geer.plan.iter().map(|s| s.stage_name.as_str()).collect();
        assert_eq!(names, STAGE_NAMES);
        assert_eq!(build_marf_geer(&MarfParams::default(), &ts).unwrap(), geer);
    }

    #[test]
    fn bad_params_rejected() {
        let p = MarfParams {
            window_len: 16,
            poles: 16,
            ..MarfParams::default()
        };
        assert!(matches!(build_marf_geer(&p, &TrainingSet::new()), Err(MarfError::BadParams(_))));
        assert!(matches!(build_feature_geer(&p), Err(MarfError::BadParams(_))));
    }

    #[test]
    fn procedures_compose_like_local() {
        let params = MarfParams::default();
        let source = SampleSource::Sine { freq: 300.0, rate: 8000, n: 1024 };
        let pool = marf_procedures();
        let mut value = source.to_value().unwrap();
        for stage in feature_stages(&params) {
            let mut args = stage.param_template.clone();
            args.push(value);
            value = pool.call(&stage.procedure_name, &args).unwrap();
        }
        let local = run_local_features(&params, &source).unwrap();
        assert_eq!(value, Value::FloatVector(local.clone()));

        let ts = train(&TrainingSet::new(), 4, &local).unwrap();
        let out = pool.call(PROC_CLASSIFY, &[ts.to_value(), value]).unwrap();
        assert_eq!(ResultSet::from_value(&out).unwrap(), run_local(&params, &ts, &source).unwrap());
    }

    #[test]
    fn value_conversions_roundtrip() {
        for source in [
            SampleSource::Sine { freq: 1.5, rate: 8000, n: 3 },
            SampleSource::Raw { rate: 10, data: vec![0.1, -0.2] },
            SampleSource::WavBytes(vec![1, 2, 3]),
        ] {
            assert_eq!(SampleSource::from_value(&source.to_value().unwrap()).unwrap(), source);
        }
        let mut ts = train(&TrainingSet::new(), 2, &[1.0, 2.0]).unwrap();
        ts = train(&ts, 2, &[3.0, 2.0]).unwrap();
        assert_eq!(TrainingSet::from_value(&ts.to_value()).unwrap(), ts);
    }

    #[test]
    fn procedure_reports_arity() {
        assert!(marf_procedures().call(PROC_EXTRACT, &[Value::Int(1)]).is_err());
    }
}
