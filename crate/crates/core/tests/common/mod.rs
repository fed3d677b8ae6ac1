//! Reference implementations used as test oracles, written with plain loops
//! rather than the crate's own helpers.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| gaussian(rng))
}

/// `|X(k)|^2` for bins `0..=U/2` by the defining sum.
pub fn naive_power_spectrum(frame: &[f64]) -> Vec<f64> {
    let u = frame.len();
    (0..=u / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * n % u) as f64 / u as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangle weight of filter `m` at frequency `f`, edges equally spaced in
/// mel from 0 to Nyquist.
fn triangle(m: usize, n_mels: usize, f: f64, nyquist: f64) -> f64 {
    let step = mel(nyquist) / (n_mels + 1) as f64;
    let lo = inv_mel(step * m as f64);
    let mid = inv_mel(step * (m + 1) as f64);
    let hi = inv_mel(step * (m + 2) as f64);
    if f <= lo || f >= hi {
        0.0
    } else if f <= mid {
        (f - lo) / (mid - lo)
    } else {
        (hi - f) / (hi - mid)
    }
}

/// Cepstra of one already-windowed frame: naive DFT, triangular mel
/// weights, natural log floored at 1e-10, orthonormal DCT-II.
pub fn naive_mfcc(frame: &[f64], sample_rate: f64, n_mels: usize, n_ceps: usize) -> Vec<f64> {
    let u = frame.len();
    let power = naive_power_spectrum(frame);
    let nyquist = sample_rate / 2.0;
    let logs: Vec<f64> = (0..n_mels)
        .map(|m| {
            let mut e = 0.0;
            for (k, p) in power.iter().enumerate() {
                e += triangle(m, n_mels, k as f64 * sample_rate / u as f64, nyquist) * p;
            }
            e.max(1e-10).ln()
        })
        .collect();
    (0..n_ceps)
        .map(|j| {
            let mut s = 0.0;
            for (i, l) in logs.iter().enumerate() {
                s += l * (PI * j as f64 * (2 * i + 1) as f64 / (2 * n_mels) as f64).cos();
            }
            let norm = if j == 0 { 1.0 / n_mels as f64 } else { 2.0 / n_mels as f64 };
            s * norm.sqrt()
        })
        .collect()
}

/// Amari index of the averaged row-normalized magnitudes of `g[k]`.
pub fn joint_isi_oracle(g: &[DMatrix<f64>]) -> f64 {
    let n = g[0].nrows();
    let mut avg = vec![vec![0.0; n]; n];
    for gk in g {
        for i in 0..n {
            let mut m = 0.0f64;
            for j in 0..n {
                m = m.max(gk[(i, j)].abs());
            }
            for j in 0..n {
                avg[i][j] += gk[(i, j)].abs() / m / g.len() as f64;
            }
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let (mut s, mut m) = (0.0, 0.0f64);
        for j in 0..n {
            s += avg[i][j];
            m = m.max(avg[i][j]);
        }
        total += s / m - 1.0;
    }
    for j in 0..n {
        let (mut s, mut m) = (0.0, 0.0f64);
        for row in &avg {
            s += row[j];
            m = m.max(row[j]);
        }
        total += s / m - 1.0;
    }
    total / (2.0 * n as f64 * (n as f64 - 1.0))
}

fn det(m: &[Vec<f64>]) -> f64 {
    // Gaussian elimination with partial pivoting
    let n = m.len();
    let mut a = m.to_vec();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    d
}

/// Gaussian IVA cost `sum_n 1/2 log det Psi_n - sum_k log|det W^[k]|` with
/// `Psi_n` the uncentered second moment of the n-th SCV.
pub fn iva_cost_oracle(w: &[DMatrix<f64>], x: &[DMatrix<f64>]) -> f64 {
    let (k, n, t) = (w.len(), w[0].nrows(), x[0].ncols());
    let mut cost = 0.0;
    for c in 0..n {
        let y: Vec<Vec<f64>> = (0..k)
            .map(|kk| (0..t).map(|s| (0..n).map(|j| w[kk][(c, j)] * x[kk][(j, s)]).sum()).collect())
            .collect();
        let psi: Vec<Vec<f64>> = (0..k)
            .map(|a| (0..k).map(|b| (0..t).map(|s| y[a][s] * y[b][s]).sum::<f64>() / t as f64).collect())
            .collect();
        cost += 0.5 * det(&psi).ln();
    }
    for wk in w {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| wk[(i, j)]).collect()).collect();
        cost -= det(&rows).abs().ln();
    }
    cost
}

/// Max absolute difference over max absolute reference entry.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Regression delta over a window of 2 with edge replication.
pub fn naive_delta(row: &[f64]) -> Vec<f64> {
    let last = row.len() as isize - 1;
    let at = |t: isize| row[t.clamp(0, last) as usize];
    (0..row.len() as isize)
        .map(|t| (at(t + 1) - at(t - 1) + 2.0 * (at(t + 2) - at(t - 2))) / 10.0)
        .collect()
}

/// Analytic row gradient and exact Hessian against central differences of
/// [`iva_cost_oracle`] and of the analytic gradient, step 1e-6, on a random
/// Gaussian instance. Returns `(gradient error, Hessian error)`.
pub fn iva_fd_errors(n: usize, k: usize, t: usize, seed: u64) -> (f64, f64) {
    use ivafuse::features::FeatureTensor;
    use ivafuse::iva::{self, DemixingTensor};

    let mut r = rng(seed);
    let xs: Vec<DMatrix<f64>> = (0..k).map(|_| gaussian_matrix(&mut r, n, t)).collect();
    let mut ws: Vec<DMatrix<f64>> = (0..k).map(|_| gaussian_matrix(&mut r, n, n)).collect();
    for w in &mut ws {
        *w += DMatrix::identity(n, n) * 2.0;
    }
    let row = r.random_range(0..n);
    let x = FeatureTensor::from_matrices(xs.clone()).unwrap();
    let w = DemixingTensor { matrices: ws.clone() };
    let grad_at = |w: &DemixingTensor| {
        let y = iva::demix(w, &x).unwrap();
        iva::gradient_wn(row, w, &x, &y, &iva::scv_covariances(&y, Some(&x))).unwrap()
    };
    let bump = |i: usize, h: f64| {
        let mut m = ws.clone();
        m[i / n][(row, i % n)] += h;
        m
    };

    let h = 1e-6;
    let grad = grad_at(&w);
    let y = iva::demix(&w, &x).unwrap();
    let hess = iva::exact_hessian(row, &w, &iva::scv_covariances(&y, Some(&x))).unwrap();
    let mut fd_grad = Vec::with_capacity(k * n);
    let mut fd_hess = DMatrix::zeros(k * n, k * n);
    for i in 0..k * n {
        let (p, m) = (bump(i, h), bump(i, -h));
        fd_grad.push((iva_cost_oracle(&p, &xs) - iva_cost_oracle(&m, &xs)) / (2.0 * h));
        let gp = grad_at(&DemixingTensor { matrices: p });
        let gm = grad_at(&DemixingTensor { matrices: m });
        fd_hess.set_column(i, &((gp - gm) / (2.0 * h)));
    }
    (rel_err(grad.as_slice(), &fd_grad), rel_err(hess.as_slice(), fd_hess.as_slice()))
}
