//! LPC and MFCC feature matrices, the stacked feature tensor and per-slab
//! whitening.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio_io::FrameMatrix;
use crate::error::{Error, Result};

pub const DELTA_WINDOW: usize = 2;
pub const LOG_FLOOR: f64 = 1e-10;
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Lpc,
    Mfcc,
    Other,
}

/// `N x T` matrix: base coefficients, then their deltas, then delta-deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

/// `K` feature matrices of identical shape, slab order preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub slabs: Vec<FeatureMatrix>,
}

impl FeatureTensor {
    pub fn dim(&self) -> usize {
        self.slabs[0].dim()
    }

    pub fn frames(&self) -> usize {
        self.slabs[0].frames()
    }

    pub fn datasets(&self) -> usize {
        self.slabs.len()
    }

    pub fn from_matrices(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        build_tensor(
            mats.into_iter()
                .map(|values| FeatureMatrix { values, kind: FeatureKind::Other })
                .collect(),
        )
    }

    pub fn matrices(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.slabs.iter().map(|s| &s.values)
    }
}

/// Per-slab affine map `x -> P (x - mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub matrices: Vec<DMatrix<f64>>,
    pub means: Vec<DVector<f64>>,
}

impl WhiteningTransform {
    pub fn apply(&self, tensor: &FeatureTensor) -> Result<FeatureTensor> {
        if tensor.datasets() != self.matrices.len() || tensor.dim() != self.means[0].len() {
            return Err(Error::ShapeMismatch("whitening transform does not match tensor".into()));
        }
        let slabs = tensor
            .slabs
            .iter()
            .zip(self.matrices.iter().zip(&self.means))
            .map(|(slab, (p, mu))| {
                let mut centered = slab.values.clone();
                for mut col in centered.column_iter_mut() {
                    col -= mu;
                }
                FeatureMatrix { values: p * centered, kind: slab.kind }
            })
            .collect();
        Ok(FeatureTensor { slabs })
    }
}

/// Autocorrelation `r[0..=order]` of one frame.
pub fn autocorrelation(frame: &[f64], order: usize) -> Vec<f64> {
    (0..=order)
        .map(|lag| {
            if lag >= frame.len() {
                return 0.0;
            }
            frame[lag..].iter().zip(frame).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Levinson-Durbin recursion. Returns predictor coefficients `o_1..o_R` with
/// `q(u) ~ sum_r o_r q(u - r)`; all zeros when `r[0]` vanishes.
pub fn levinson_durbin(r: &[f64], order: usize) -> Vec<f64> {
    let mut a = vec![0.0; order];
    if r.is_empty() || r[0] <= f64::MIN_POSITIVE {
        return a;
    }
    let mut err = r[0];
    let mut prev = vec![0.0; order];
    for i in 0..order {
        let acc = r[i + 1] - (0..i).map(|j| a[j] * r[i - j]).sum::<f64>();
        let k = acc / err;
        prev[..i].copy_from_slice(&a[..i]);
        for j in 0..i {
            a[j] = prev[j] - k * prev[i - 1 - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
        if err <= 0.0 {
            break;
        }
    }
    a
}

/// Regression deltas `d(t) = sum_i i (f(t+i) - f(t-i)) / (2 sum_i i^2)` with
/// edge frames replicated.
pub fn delta(features: &DMatrix<f64>, window: usize) -> DMatrix<f64> {
    let (rows, cols) = features.shape();
    if cols == 0 || window == 0 {
        return DMatrix::zeros(rows, cols);
    }
    let denom = 2.0 * (1..=window).map(|i| (i * i) as f64).sum::<f64>();
    let last = cols as isize - 1;
    let at = |t: isize| t.clamp(0, last) as usize;
    DMatrix::from_fn(rows, cols, |n, t| {
        let t = t as isize;
        (1..=window)
            .map(|i| {
                let i = i as isize;
                i as f64 * (features[(n, at(t + i))] - features[(n, at(t - i))])
            })
            .sum::<f64>()
            / denom
    })
}

fn stack_with_deltas(base: DMatrix<f64>) -> DMatrix<f64> {
    let d1 = delta(&base, DELTA_WINDOW);
    let d2 = delta(&d1, DELTA_WINDOW);
    let (r, t) = base.shape();
    let mut out = DMatrix::zeros(3 * r, t);
    out.rows_mut(0, r).copy_from(&base);
    out.rows_mut(r, r).copy_from(&d1);
    out.rows_mut(2 * r, r).copy_from(&d2);
    out
}

/// LPCs of order `order` per frame plus deltas: `3 * order` rows.
pub fn lpc_features(frames: &FrameMatrix, order: usize) -> Result<FeatureMatrix> {
    let (frame_len, n_frames) = frames.frames.shape();
    if order == 0 || order >= frame_len {
        return Err(Error::InvalidConfig(format!(
            "LPC order must satisfy 0 < R < U, got R={order}, U={frame_len}"
        )));
    }
    let mut base = DMatrix::zeros(order, n_frames);
    for (t, col) in frames.frames.column_iter().enumerate() {
        let frame: Vec<f64> = col.iter().copied().collect();
        let coeffs = levinson_durbin(&autocorrelation(&frame, order), order);
        base.column_mut(t).copy_from_slice(&coeffs);
    }
    Ok(FeatureMatrix { values: stack_with_deltas(base), kind: FeatureKind::Lpc })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels x (n_fft / 2 + 1)` triangular filterbank evaluated at the bin
/// centre frequencies, with edges equally spaced on the mel scale over
/// `0..sample_rate / 2`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> DMatrix<f64> {
    let n_bins = n_fft / 2 + 1;
    let f_max = f64::from(sample_rate) / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    DMatrix::from_fn(n_mels, n_bins, |m, b| {
        let f = b as f64 * f64::from(sample_rate) / n_fft as f64;
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rising = (f - lo) / (centre - lo);
        let falling = (hi - f) / (hi - centre);
        rising.min(falling).max(0.0)
    })
}

/// Orthonormal DCT-II, keeping the first `n_out` coefficients.
pub fn dct2(input: &[f64], n_out: usize) -> Vec<f64> {
    let m = input.len() as f64;
    (0..n_out)
        .map(|j| {
            let scale = if j == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * (PI * j as f64 * (i as f64 + 0.5) / m).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Power spectrum `|DFT|^2` of each frame, bins `0..=U/2`, `n_bins x T`.
pub fn power_spectrum(frames: &FrameMatrix) -> DMatrix<f64> {
    let (frame_len, n_frames) = frames.frames.shape();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_len);
    let n_bins = frame_len / 2 + 1;
    let mut out = DMatrix::zeros(n_bins, n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    for (t, col) in frames.frames.column_iter().enumerate() {
        for (b, &x) in buf.iter_mut().zip(col.iter()) {
            *b = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[(k, t)] = buf[k].norm_sqr();
        }
    }
    out
}

/// Log mel energies of every frame, `n_mels x T`.
pub fn log_mel(frames: &FrameMatrix, n_mels: usize) -> DMatrix<f64> {
    let fb = mel_filterbank(n_mels, frames.frames.nrows(), frames.sample_rate);
    (fb * power_spectrum(frames)).map(|e| e.max(LOG_FLOOR).ln())
}

/// MFCCs (`n_ceps` per frame) plus deltas: `3 * n_ceps` rows.
pub fn mfcc_features(frames: &FrameMatrix, n_mels: usize, n_ceps: usize) -> Result<FeatureMatrix> {
    if n_ceps == 0 || n_ceps > n_mels {
        return Err(Error::InvalidConfig(format!(
            "need 0 < n_ceps <= n_mels, got n_ceps={n_ceps}, n_mels={n_mels}"
        )));
    }
    let logmel = log_mel(frames, n_mels);
    let mut base = DMatrix::zeros(n_ceps, logmel.ncols());
    for (t, col) in logmel.column_iter().enumerate() {
        let frame: Vec<f64> = col.iter().copied().collect();
        base.column_mut(t).copy_from_slice(&dct2(&frame, n_ceps));
    }
    Ok(FeatureMatrix { values: stack_with_deltas(base), kind: FeatureKind::Mfcc })
}

pub fn build_tensor(slabs: Vec<FeatureMatrix>) -> Result<FeatureTensor> {
    let first = slabs
        .first()
        .ok_or_else(|| Error::ShapeMismatch("feature tensor needs at least one slab".into()))?;
    let shape = first.values.shape();
    if let Some((k, bad)) = slabs.iter().enumerate().find(|(_, s)| s.values.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "slab {k} is {:?}, expected {:?}",
            bad.values.shape(),
            shape
        )));
    }
    Ok(FeatureTensor { slabs })
}

/// Centers each slab and rotates/scales it to identity sample covariance
/// (normalized by `1/T`). Eigenvalues are floored at [`EIGEN_FLOOR`].
pub fn whiten(tensor: &FeatureTensor) -> Result<(FeatureTensor, WhiteningTransform)> {
    let (n, t) = (tensor.dim(), tensor.frames());
    if t <= n {
        return Err(Error::InvalidConfig(format!("whitening needs T > N, got T={t}, N={n}")));
    }
    let mut matrices = Vec::with_capacity(tensor.datasets());
    let mut means = Vec::with_capacity(tensor.datasets());
    for (k, slab) in tensor.slabs.iter().enumerate() {
        let mu = slab.values.column_mean();
        let mut centered = slab.values.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mu;
        }
        let cov = (&centered * centered.transpose()) / t as f64;
        let eig = SymmetricEigen::new(cov);
        let floored = eig.eigenvalues.iter().filter(|&&l| l < EIGEN_FLOOR).count();
        if 2 * floored > n {
            return Err(Error::RankDeficient { slab: k, floored, dim: n });
        }
        let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt());
        let p = DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
        matrices.push(p);
        means.push(mu);
    }
    let transform = WhiteningTransform { matrices, means };
    let white = transform.apply(tensor)?;
    Ok((white, transform))
}
