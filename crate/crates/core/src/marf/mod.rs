//! The MARF speaker identification workload.
//!
//! Sample loading, preprocessing, LPC feature extraction and nearest-mean
//! classification, each a pure function so the same code runs in-process or
//! as a worker procedure behind the demand store.

mod classify;
mod lpc;
mod pipeline;
mod preprocess;
mod synth;

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classify::{classify, interpret_as_binary, train, Cluster, ResultSet, TrainingSet};
pub use lpc::{autocorrelation, levinson_durbin, lpc_features, window_starts};
pub use pipeline::{
    build_feature_geer, build_marf_geer, marf_procedures, run_local, run_local_features, MarfParams, CLASSIFICATION_STAGE,
    PROC_CLASSIFY, PROC_EXTRACT, PROC_LOAD, PROC_PREPROCESS, STAGE_NAMES,
};
pub use synth::{ToneSynth, DEFAULT_SUBJECTS, SYNTH_RATE};
pub use preprocess::{hamming_window, normalize, remove_noise, remove_noise_with_cutoff, remove_silence, DEFAULT_NOISE_CUTOFF_HZ};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarfError {
    #[error("unsupported sample format: {0}")]
    UnsupportedFormat(String),
    #[error("every sample is below the silence threshold")]
    AllSilence,
    #[error("frame of {0} samples is too short for a window")]
    FrameTooShort(usize),
    #[error("sample of {len} values is shorter than the {window}-sample window")]
    SampleTooShort { len: usize, window: usize },
    #[error("feature length {got} does not match the training set's {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("cannot read sample: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleFormat {
    WavPcm16,
    RawF64,
    Sine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub data: Vec<f64>,
    pub sample_rate: u32,
    pub format: SampleFormat,
}

impl Sample {
    pub fn new(data: Vec<f64>, sample_rate: u32, format: SampleFormat) -> Self {
        Self {
            data,
            sample_rate,
            format,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn with_data(&self, data: Vec<f64>) -> Sample {
        Sample {
            data,
            sample_rate: self.sample_rate,
            format: self.format,
        }
    }
}

/// Where a sample comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    WavFile(std::path::PathBuf),
    WavBytes(Vec<u8>),
    Sine { freq: f64, rate: u32, n: usize },
    Raw { rate: u32, data: Vec<f64> },
}

pub fn load_sample(source: &SampleSource) -> Result<Sample, MarfError> {
    match source {
        SampleSource::WavFile(path) => load_wav_file(path),
        SampleSource::WavBytes(bytes) => decode_wav(bytes),
        SampleSource::Sine { freq, rate, n } => {
            if *rate == 0 || !freq.is_finite() {
                return Err(MarfError::BadParams("sine needs a finite frequency and a positive rate".into()));
            }
            let data = (0..*n)
                .map(|t| (2.0 * std::f64::consts::PI * freq * t as f64 / *rate as f64).sin())
                .collect();
            Ok(Sample::new(data, *rate, SampleFormat::Sine))
        }
        SampleSource::Raw { rate, data } => {
            if data.iter().any(|x| !x.is_finite()) {
                return Err(MarfError::BadParams("raw samples must be finite".into()));
            }
            Ok(Sample::new(data.clone(), *rate, SampleFormat::RawF64))
        }
    }
}

fn load_wav_file(path: &Path) -> Result<Sample, MarfError> {
    let bytes = std::fs::read(path).map_err(|e| MarfError::Io(format!("{}: {e}", path.display())))?;
    decode_wav(&bytes)
}

fn decode_wav(bytes: &[u8]) -> Result<Sample, MarfError> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| MarfError::UnsupportedFormat(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(MarfError::UnsupportedFormat(format!("{} channels, only mono is supported", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(MarfError::UnsupportedFormat(format!(
            "{:?} {}-bit, only PCM16 is supported",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let data = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| MarfError::UnsupportedFormat(e.to_string()))?;
    Ok(Sample::new(data, spec.sample_rate, SampleFormat::WavPcm16))
}

/// Writes PCM16 mono WAV bytes; amplitudes are clamped to [-1, 1].
pub fn encode_wav_pcm16(data: &[f64], sample_rate: u32) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut out, spec).expect("in-memory writer");
        for x in data {
            let v = (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            writer.write_sample(v).expect("in-memory write");
        }
        writer.finalize().expect("in-memory finalize");
    }
    out.into_inner()
}
