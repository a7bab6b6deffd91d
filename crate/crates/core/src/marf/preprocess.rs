use super::{MarfError, Sample};

pub const DEFAULT_NOISE_CUTOFF_HZ: f64 = 2000.0;

/// Scales the peak absolute amplitude to 1.0. All-zero input is returned
/// unchanged.
pub fn normalize(sample: &Sample) -> Sample {
    let peak = sample.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return sample.clone();
    }
    sample.with_data(sample.data.iter().map(|x| x / peak).collect())
}

/// Drops samples whose magnitude is below `threshold`.
pub fn remove_silence(sample: &Sample, threshold: f64) -> Result<Sample, MarfError> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(MarfError::BadParams(format!("silence threshold {threshold} outside [0, 1)")));
    }
    let data: Vec<f64> = sample.data.iter().copied().filter(|x| x.abs() >= threshold).collect();
    if data.is_empty() {
        return Err(MarfError::AllSilence);
    }
    Ok(sample.with_data(data))
}

pub fn remove_noise(sample: &Sample) -> Sample {
    remove_noise_with_cutoff(sample, DEFAULT_NOISE_CUTOFF_HZ)
}

/// Single-pole low-pass `y[n] = a*y[n-1] + (1-a)*x[n]` with
/// `a = exp(-2*pi*cutoff/rate)` and `y[-1] = 0`.
pub fn remove_noise_with_cutoff(sample: &Sample, cutoff_hz: f64) -> Sample {
    let rate = sample.sample_rate.max(1) as f64;
    let a = (-2.0 * std::f64::consts::PI * cutoff_hz / rate).exp();
    let mut y = 0.0;
    let data = sample
        .data
        .iter()
        .map(|x| {
            y = a * y + (1.0 - a) * x;
            y
        })
        .collect();
    sample.with_data(data)
}

pub fn hamming_window(frame: &[f64]) -> Result<Vec<f64>, MarfError> {
    let n = frame.len();
    if n < 2 {
        return Err(MarfError::FrameTooShort(n));
    }
    let denom = (n - 1) as f64;
    Ok(frame
        .iter()
        .enumerate()
        .map(|(i, x)| x * (0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos()))
        .collect())
}
