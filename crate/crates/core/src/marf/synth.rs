//! Synthetic speakers: sine tones with uniform noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run_local_features, train, MarfError, MarfParams, SampleSource, TrainingSet};

pub const SYNTH_RATE: u32 = 8000;

/// Subjects and their tone frequencies in Hz.
pub const DEFAULT_SUBJECTS: [(i64, f64); 3] = [(1, 200.0), (2, 450.0), (3, 800.0)];

/// Source of noisy tones, reproducible from its seed.
#[derive(Debug, Clone)]
pub struct ToneSynth {
    rng: ChaCha8Rng,
    pub len: usize,
    pub noise: f64,
}

impl ToneSynth {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len: 2048,
            noise: 0.01,
        }
    }

    pub fn with_len(mut self, len: usize) -> Self {
        self.len = len;
        self
    }

    /// A unit sine at `freq` plus noise drawn from `[-noise, noise]`.
    pub fn tone(&mut self, freq: f64) -> SampleSource {
        let data = (0..self.len)
            .map(|t| {
                let clean = (2.0 * std::f64::consts::PI * freq * t as f64 / SYNTH_RATE as f64).sin();
                clean + self.rng.gen_range(-self.noise..=self.noise)
            })
            .collect();
        SampleSource::Raw {
            rate: SYNTH_RATE,
            data,
        }
    }

    /// Trains each subject on `instances` fresh tones, features computed
    /// in-process.
    pub fn train(&mut self, params: &MarfParams, subjects: &[(i64, f64)], instances: usize) -> Result<TrainingSet, MarfError> {
        let mut ts = TrainingSet::new();
        for &(id, freq) in subjects {
            for _ in 0..instances {
                let features = run_local_features(params, &self.tone(freq))?;
                ts = train(&ts, id, &features)?;
            }
        }
        Ok(ts)
    }
}
