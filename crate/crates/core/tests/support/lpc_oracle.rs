//! Reference LPC written straight from the textbook recursion, sharing no
//! code with the library.

#![allow(dead_code)]

use std::f64::consts::PI;

/// Windows centred on `c = half, 2*half, ...` while `c + half <= n`.
pub fn windows(n: usize, window_len: usize) -> Vec<(usize, usize)> {
    let half = window_len / 2;
    let mut out = Vec::new();
    let mut c = half;
    while c + half <= n {
        out.push((c - half, c + half));
        c += half;
    }
    out
}

/// Levinson-Durbin with a 1-based coefficient table alpha[i][j].
pub fn levinson(r: &[f64], p: usize) -> Vec<f64> {
    if r[0] == 0.0 {
        return vec![0.0; p];
    }
    let mut alpha = vec![vec![0.0f64; p + 1]; p + 1];
    let mut e = vec![0.0f64; p + 1];
    e[0] = r[0];
    let mut last = 0;
    for i in 1..=p {
        let mut s = 0.0;
        for j in 1..i {
            s += alpha[i - 1][j] * r[i - j];
        }
        let k = (r[i] - s) / e[i - 1];
        alpha[i][i] = k;
        for j in 1..i {
            alpha[i][j] = alpha[i - 1][j] - k * alpha[i - 1][i - j];
        }
        e[i] = (1.0 - k * k) * e[i - 1];
        last = i;
        if e[i] <= 0.0 {
            break;
        }
    }
    (1..=p).map(|j| if j <= last { alpha[last][j] } else { 0.0 }).collect()
}

/// Gaussian elimination on the Yule-Walker normal equations.
pub fn yule_walker(r: &[f64], p: usize) -> Vec<f64> {
    let mut m: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut row: Vec<f64> = (0..p).map(|j| r[(i as isize - j as isize).unsigned_abs()]).collect();
            row.push(r[i + 1]);
            row
        })
        .collect();
    for col in 0..p {
        let pivot = (col..p).max_by(|a, b| m[*a][col].abs().total_cmp(&m[*b][col].abs())).unwrap();
        m.swap(col, pivot);
        for row in 0..p {
            if row != col {
                let f = m[row][col] / m[col][col];
                #[allow(clippy::needless_range_loop)]
                for k in col..=p {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    (0..p).map(|i| m[i][p] / m[i][i]).collect()
}

pub fn features(data: &[f64], window_len: usize, p: usize) -> Vec<f64> {
    let ws = windows(data.len(), window_len);
    let mut sum = vec![0.0; p];
    for (a, b) in &ws {
        let n = b - a;
        let x: Vec<f64> = (0..n)
            .map(|i| data[a + i] * (0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
            .collect();
        let mut r = vec![0.0; p + 1];
        for (k, rk) in r.iter_mut().enumerate() {
            for i in k..n {
                *rk += x[i] * x[i - k];
            }
        }
        for (s, c) in sum.iter_mut().zip(levinson(&r, p)) {
            *s += c;
        }
    }
    sum.iter().map(|s| s / ws.len() as f64).collect()
}
