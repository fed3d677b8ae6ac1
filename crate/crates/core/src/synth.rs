//! Synthetic data with known ground truth: dependent-SCV Gaussian mixtures,
//! the inter-symbol-interference separation index, and toy speaker audio.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio_io::wav;
use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::iva::{self, DemixingTensor, IvaConfig};

pub const MIN_SCV_CORRELATION: f64 = 0.5;
pub const MAX_SCV_CORRELATION: f64 = 0.995;
pub const MAX_CONDITION: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct SynthMixture {
    pub sources: Vec<DMatrix<f64>>,
    pub mixing: Vec<DMatrix<f64>>,
    pub observed: FeatureTensor,
    /// Generating SCV covariances, one `K x K` matrix per component.
    pub scv_covariances: Vec<DMatrix<f64>>,
    pub seed: u64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, n, n).qr().q()
}

/// `Q1 diag(s) Q2` with singular values in `[1, MAX_CONDITION]`.
fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let s = DVector::from_fn(n, |_, _| rng.random_range(1.0..MAX_CONDITION));
    random_orthogonal(rng, n) * DMatrix::from_diagonal(&s) * random_orthogonal(rng, n)
}

/// One correlation level per component. `1 - rho` is stratified on a log
/// scale between `1 - MIN_SCV_CORRELATION` and `1 - MAX_SCV_CORRELATION`, so
/// the components differ clearly in covariance structure, then shuffled.
fn scv_correlations(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let (lo, hi) = ((1.0 - MAX_SCV_CORRELATION).ln(), (1.0 - MIN_SCV_CORRELATION).ln());
    let width = (hi - lo) / n as f64;
    let mut rho: Vec<f64> =
        (0..n).map(|i| 1.0 - (lo + width * (i as f64 + rng.random_range(0.1..0.9))).exp()).collect();
    rho.shuffle(rng);
    rho
}

pub fn gen_scv_mixture(n: usize, k: usize, t: usize, seed: u64) -> Result<SynthMixture> {
    if n == 0 || k == 0 || t < 10 * n * k {
        return Err(Error::InvalidConfig(format!("mixture needs N, K >= 1 and T >= 10*N*K, got N={n} K={k} T={t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = scv_correlations(&mut rng, n);
    let mut sources = vec![DMatrix::zeros(n, t); k];
    let mut scv_covariances = Vec::with_capacity(n);
    for (c, &r) in rho.iter().enumerate() {
        let scales = DVector::from_fn(k, |_, _| rng.random_range(0.5..2.0));
        let psi = DMatrix::from_fn(k, k, |a, b| scales[a] * scales[b] * if a == b { 1.0 } else { r });
        let l = psi.clone().cholesky().expect("equicorrelation with rho < 1 is positive definite").unpack();
        for s in 0..t {
            let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            let y = &l * z;
            for (kk, src) in sources.iter_mut().enumerate() {
                src[(c, s)] = y[kk];
            }
        }
        scv_covariances.push(psi);
    }
    let mixing: Vec<DMatrix<f64>> = (0..k).map(|_| well_conditioned(&mut rng, n)).collect();
    let observed = FeatureTensor::from_matrices(mixing.iter().zip(&sources).map(|(a, s)| a * s).collect())?;
    Ok(SynthMixture { sources, mixing, observed, scv_covariances, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsiReport {
    pub joint_isi: f64,
    pub isi: Vec<f64>,
}

fn row_max_normalized(g: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = g.abs();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        if m > 0.0 {
            row /= m;
        }
    }
    out
}

/// Normalized Amari index of a nonnegative `N x N` matrix.
fn amari(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    if n < 2 {
        return 0.0;
    }
    let rows: f64 = g.row_iter().map(|r| r.sum() / r.max() - 1.0).sum();
    let cols: f64 = g.column_iter().map(|c| c.sum() / c.max() - 1.0).sum();
    (rows + cols) / (2.0 * n as f64 * (n as f64 - 1.0))
}

/// Per-dataset ISI of `G^[k] = W^[k] A^[k]`, and the joint ISI of the
/// average over `k` of the row-max-normalized `|G^[k]|`.
pub fn joint_isi(w: &DemixingTensor, a: &[DMatrix<f64>]) -> Result<IsiReport> {
    if a.len() != w.datasets() || a.iter().any(|m| m.shape() != (w.dim(), w.dim())) {
        return Err(Error::ShapeMismatch("demixing and mixing tensors differ in shape".into()));
    }
    let n = w.dim();
    let mut avg = DMatrix::zeros(n, n);
    let mut isi = Vec::with_capacity(a.len());
    for (wk, ak) in w.matrices.iter().zip(a) {
        let g = row_max_normalized(&(wk * ak));
        isi.push(amari(&g));
        avg += g;
    }
    avg /= a.len() as f64;
    Ok(IsiReport { joint_isi: amari(&avg), isi })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsiTrial {
    pub seed: u64,
    pub n: usize,
    pub iters: usize,
    pub final_cost: f64,
    pub joint_isi: f64,
    pub seconds: f64,
}

/// Separation trial on a fresh mixture; `N` cycles through 3, 4, 5 with the
/// seed, `K = 2`, `T = 2000`.
pub fn isi_trial(seed: u64, cfg: &IvaConfig) -> Result<IsiTrial> {
    let n = 3 + (seed % 3) as usize;
    let mix = gen_scv_mixture(n, 2, 2000, seed)?;
    let start = std::time::Instant::now();
    let sep = iva::separate(&mix.observed, &IvaConfig { seed, ..cfg.clone() })?;
    let seconds = start.elapsed().as_secs_f64();
    let report = joint_isi(&sep.demixing, &mix.mixing)?;
    Ok(IsiTrial {
        seed,
        n,
        iters: sep.outcome.iterations,
        final_cost: sep.outcome.final_cost(),
        joint_isi: report.joint_isi,
        seconds,
    })
}

/// Trial table without timings, so reruns are byte-identical.
pub fn isi_trials_csv(trials: &[IsiTrial]) -> String {
    let mut s = String::from("seed,iters,final_cost,joint_isi\n");
    for t in trials {
        s.push_str(&format!("{},{},{:.12e},{:.12e}\n", t.seed, t.iters, t.final_cost, t.joint_isi));
    }
    s
}

pub const SYNTH_RATE: u32 = 16000;
pub const SYNTH_SAMPLES: usize = 48240;

/// Resonance (formant) pair and glottal pitch of a toy speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVoice {
    pub formants: [f64; 2],
    pub bandwidths: [f64; 2],
    pub pitch: f64,
    pub breathiness: f64,
}

impl SpeakerVoice {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            formants: [rng.random_range(300.0..1000.0), rng.random_range(1100.0..3200.0)],
            bandwidths: [rng.random_range(60.0..200.0), rng.random_range(90.0..300.0)],
            pitch: rng.random_range(85.0..260.0),
            breathiness: rng.random_range(0.05..0.4),
        }
    }
}

/// AR(4) coefficients `a_1..a_4` (`y[t] = e[t] - sum a_i y[t-i]`) of two
/// resonances.
pub fn ar4_coefficients(formants: [f64; 2], bandwidths: [f64; 2], rate: f64) -> [f64; 4] {
    let section = |f: f64, b: f64| {
        let r = (-std::f64::consts::PI * b / rate).exp();
        let theta = 2.0 * std::f64::consts::PI * f / rate;
        [-2.0 * r * theta.cos(), r * r]
    };
    let [p1, p2] = section(formants[0], bandwidths[0]);
    let [q1, q2] = section(formants[1], bandwidths[1]);
    [p1 + q1, p2 + p1 * q1 + q2, p1 * q2 + p2 * q1, p2 * q2]
}

/// One sentence: voiced/unvoiced segments of 80-300 ms with per-segment
/// formant and pitch jitter, short pauses, and a little background noise.
pub fn synth_sentence(voice: &SpeakerVoice, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = SYNTH_RATE as f64;
    let mut out = Vec::with_capacity(SYNTH_SAMPLES);
    let mut history = [0.0f64; 4];
    let mut phase = 0.0f64;
    while out.len() < SYNTH_SAMPLES {
        let len = rng.random_range(1280..4800).min(SYNTH_SAMPLES - out.len());
        if rng.random_bool(0.15) {
            out.extend((0..len).map(|_| 0.002 * normal(rng)));
            continue;
        }
        let jitter = |rng: &mut ChaCha8Rng, x: f64, rel: f64| x * (1.0 + rng.random_range(-rel..rel));
        let formants = [jitter(rng, voice.formants[0], 0.12), jitter(rng, voice.formants[1], 0.12)];
        let a = ar4_coefficients(formants, voice.bandwidths, rate);
        let pitch = jitter(rng, voice.pitch, 0.08);
        let voiced = rng.random_bool(0.8);
        let gain = rng.random_range(0.3..1.0);
        for i in 0..len {
            let mut e = voice.breathiness * normal(rng);
            if voiced {
                phase += pitch / rate;
                if phase >= 1.0 {
                    phase -= 1.0;
                    e += 4.0;
                }
            } else {
                e *= 3.0;
            }
            let y = e - a[0] * history[0] - a[1] * history[1] - a[2] * history[2] - a[3] * history[3];
            history = [y, history[0], history[1], history[2]];
            let ramp = ((i.min(len - 1 - i) as f64) / 160.0).min(1.0);
            out.push(gain * ramp * y);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = if peak > 0.0 { 0.8 / peak } else { 1.0 };
    out.iter().map(|x| x * scale + 0.003 * normal(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEntry {
    pub path: PathBuf,
    pub speaker: usize,
    pub sentence: usize,
}

/// Writes `n_sentences` WAVs per speaker under `out_dir` plus `manifest.csv`
/// (`path,speaker_id,split`), returning the entries in manifest order. The
/// last `n_test` sentences of each speaker form the test split.
pub fn gen_synth_speakers(
    out_dir: &Path,
    n_speakers: usize,
    n_sentences: usize,
    n_test: usize,
    seed: u64,
) -> Result<Vec<SynthEntry>> {
    if n_speakers < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 speakers, got {n_speakers}")));
    }
    if n_test >= n_sentences {
        return Err(Error::InvalidConfig(format!("{n_test} test sentences leave none of {n_sentences} for training")));
    }
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voices: Vec<SpeakerVoice> = (0..n_speakers).map(|_| SpeakerVoice::random(&mut rng)).collect();
    let mut entries = Vec::with_capacity(n_speakers * n_sentences);
    let mut manifest = String::from("path,speaker_id,split\n");
    for (spk, voice) in voices.iter().enumerate() {
        for sent in 0..n_sentences {
            let mut srng = ChaCha8Rng::seed_from_u64(seed ^ ((spk as u64) << 32 | sent as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let audio = synth_sentence(voice, &mut srng);
            let name = format!("spk{spk:03}_{sent:03}.wav");
            let path = out_dir.join(&name);
            wav::write_pcm16(&path, &wav::quantize(&audio), SYNTH_RATE)?;
            let split = if sent + n_test >= n_sentences { "test" } else { "train" };
            manifest.push_str(&format!("{name},spk{spk:03},{split}\n"));
            entries.push(SynthEntry { path, speaker: spk, sentence: sent });
        }
    }
    fs::write(out_dir.join("manifest.csv"), manifest)?;
    Ok(entries)
}
