//! Linear predictive coding by the autocorrelation method.
//!
//! Coefficients `a[1..=p]` predict `x[n] ~ sum_k a[k] * x[n-k]`.

use super::{hamming_window, MarfError, Sample};

pub fn autocorrelation(frame: &[f64], max_lag: usize) -> Vec<f64> {
    (0..=max_lag)
        .map(|lag| {
            if lag >= frame.len() {
                return 0.0;
            }
            frame[lag..].iter().zip(frame).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Solves for `r.len() - 1` predictor coefficients. A zero-energy frame
/// yields zeros; if the prediction error reaches zero early the remaining
/// coefficients stay zero.
pub fn levinson_durbin(r: &[f64]) -> Vec<f64> {
    let p = r.len().saturating_sub(1);
    let mut a = vec![0.0; p];
    let mut err = r[0];
    if err <= 0.0 {
        return a;
    }
    let mut prev = vec![0.0; p];
    for i in 0..p {
        let mut acc = r[i + 1];
        for j in 0..i {
            acc -= a[j] * r[i - j];
        }
        let k = acc / err;
        prev[..i].copy_from_slice(&a[..i]);
        a[i] = k;
        for j in 0..i {
            a[j] = prev[j] - k * prev[i - 1 - j];
        }
        err *= 1.0 - k * k;
        if err <= 0.0 {
            break;
        }
    }
    a
}

/// Offsets of the analysis windows: stride `window_len / 2`, starting at 0,
/// while the whole window fits.
pub fn window_starts(len: usize, window_len: usize) -> Vec<usize> {
    let half = window_len / 2;
    if half == 0 {
        return Vec::new();
    }
    (0..).map(|i| i * half).take_while(|s| s + window_len <= len).collect()
}

/// Averages the per-window LPC coefficients over all windows.
pub fn lpc_features(sample: &Sample, window_len: usize, poles: usize) -> Result<Vec<f64>, MarfError> {
    if window_len < 2 || !window_len.is_multiple_of(2) {
        return Err(MarfError::BadParams(format!("window length {window_len} must be even and at least 2")));
    }
    if poles == 0 || poles >= window_len {
        return Err(MarfError::BadParams(format!(
            "poles must be in 1..{window_len}, got {poles}"
        )));
    }
    if sample.len() < window_len {
        return Err(MarfError::SampleTooShort {
            len: sample.len(),
            window: window_len,
        });
    }
    let starts = window_starts(sample.len(), window_len);
    let mut features = vec![0.0; poles];
    for start in &starts {
        let windowed = hamming_window(&sample.data[*start..start + window_len])?;
        let coeffs = levinson_durbin(&autocorrelation(&windowed, poles));
        for (f, c) in features.iter_mut().zip(coeffs) {
            *f += c;
        }
    }
    let count = starts.len() as f64;
    for f in &mut features {
        *f /= count;
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marf::SampleFormat;

    #[test]
    fn window_count_for_512_by_128() {
        assert_eq!(window_starts(512, 128), vec![0, 64, 128, 192, 256, 320, 384]);
        assert_eq!(window_starts(127, 128), Vec::<usize>::new());
        assert_eq!(window_starts(128, 128), vec![0]);
    }

    #[test]
    fn zero_sample_gives_zero_features() {
        let s = Sample::new(vec![0.0; 300], 8000, SampleFormat::RawF64);
        assert_eq!(lpc_features(&s, 128, 20).unwrap(), vec![0.0; 20]);
    }

    #[test]
    fn first_order_recursion_by_hand() {
        // r = [1, 0.5]: a1 = 0.5
        assert_eq!(levinson_durbin(&[1.0, 0.5]), vec![0.5]);
        // r = [2, 1, 0.5]: a = R^-1 r with R = [[2,1],[1,2]] -> [0.5, 0]
        let a = levinson_durbin(&[2.0, 1.0, 0.5]);
        assert!((a[0] - 0.5).abs() < 1e-15 && a[1].abs() < 1e-15);
    }

    #[test]
    fn bad_params() {
        let s = Sample::new(vec![0.1; 300], 8000, SampleFormat::RawF64);
        assert!(matches!(lpc_features(&s, 128, 128), Err(MarfError::BadParams(_))));
        assert!(matches!(lpc_features(&s, 127, 4), Err(MarfError::BadParams(_))));
        assert_eq!(
            lpc_features(&Sample::new(vec![0.1; 100], 8000, SampleFormat::RawF64), 128, 4),
            Err(MarfError::SampleTooShort { len: 100, window: 128 })
        );
    }
}
