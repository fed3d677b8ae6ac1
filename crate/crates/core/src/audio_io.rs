//! Audio ingestion: PCM16 WAV loading, energy VAD, duration fixing and
//! pre-emphasized Hamming-windowed framing.

pub mod wav;

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0 + 1e-6) {
            return Err(Error::InvalidConfig("samples must be finite and within [-1, 1]".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Framing parameters. Defaults are 25 ms / 10 ms frames at 16 kHz, 300 frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub frame_len: usize,
    pub frame_shift: usize,
    pub preemphasis: f64,
    pub target_frames: usize,
    pub vad_energy_ratio: f64,
    /// Seed for the random crop offset of over-long signals.
    pub crop_seed: u64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_len: 400,
            frame_shift: 160,
            preemphasis: 0.97,
            target_frames: 300,
            vad_energy_ratio: 0.05,
            crop_seed: 0,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_shift == 0 || self.frame_shift > self.frame_len {
            return Err(Error::InvalidConfig(format!(
                "need 0 < frame_shift <= frame_len, got shift {} len {}",
                self.frame_shift, self.frame_len
            )));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::InvalidConfig(format!(
                "pre-emphasis must be in [0, 1), got {}",
                self.preemphasis
            )));
        }
        if self.target_frames == 0 {
            return Err(Error::InvalidConfig("target_frames must be at least 1".into()));
        }
        if !(self.vad_energy_ratio >= 0.0) {
            return Err(Error::InvalidConfig("vad_energy_ratio must be non-negative".into()));
        }
        Ok(())
    }

    /// Samples covered by `target_frames` frames: `(T - 1) * V + U`.
    pub fn fixed_len(&self) -> usize {
        (self.target_frames - 1) * self.frame_shift + self.frame_len
    }
}

/// `U x T` matrix of windowed frames, one frame per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frames: DMatrix<f64>,
    pub sample_rate: u32,
    pub config: FrameConfig,
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let bytes = std::fs::read(path.as_ref())?;
    let (samples, sample_rate) = wav::decode(&bytes)?;
    if samples.is_empty() {
        return Err(Error::TruncatedFile("data chunk holds no samples".into()));
    }
    Ok(AudioSignal { samples, sample_rate })
}

/// Keeps the non-overlapping `frame_len` blocks whose mean power is at least
/// `vad_energy_ratio` times the mean block power. Falls back to the full
/// signal when nothing survives.
pub fn apply_vad(signal: &AudioSignal, cfg: &FrameConfig) -> AudioSignal {
    let block = cfg.frame_len.max(1);
    let energies: Vec<f64> = signal
        .samples
        .chunks(block)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64)
        .collect();
    if energies.is_empty() {
        return signal.clone();
    }
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    if mean <= 0.0 {
        return signal.clone();
    }
    let threshold = cfg.vad_energy_ratio * mean * (1.0 - 1e-12);
    let kept: Vec<f64> = signal
        .samples
        .chunks(block)
        .zip(&energies)
        .filter(|(_, &e)| e >= threshold)
        .flat_map(|(c, _)| c.iter().copied())
        .collect();
    if kept.is_empty() {
        return signal.clone();
    }
    AudioSignal { samples: kept, sample_rate: signal.sample_rate }
}

/// Brings the signal to exactly `cfg.fixed_len()` samples: a seeded random
/// crop for longer input, cyclic self-repetition for shorter input.
pub fn fix_duration(signal: &AudioSignal, cfg: &FrameConfig) -> Result<AudioSignal> {
    if signal.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let target = cfg.fixed_len();
    let len = signal.len();
    let samples = if len == target {
        signal.samples.clone()
    } else if len > target {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.crop_seed);
        let offset = rng.random_range(0..=len - target);
        signal.samples[offset..offset + target].to_vec()
    } else {
        signal.samples.iter().copied().cycle().take(target).collect()
    };
    Ok(AudioSignal { samples, sample_rate: signal.sample_rate })
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2 pi u / (U - 1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len).map(|u| 0.54 - 0.46 * (2.0 * PI * u as f64 / denom).cos()).collect()
}

/// `y(u) = x(u) - alpha x(u - 1)` with `x(-1) = 0`.
pub fn preemphasize(samples: &[f64], alpha: f64) -> Vec<f64> {
    let mut prev = 0.0;
    samples
        .iter()
        .map(|&x| {
            let y = x - alpha * prev;
            prev = x;
            y
        })
        .collect()
}

pub fn frame_and_window(signal: &AudioSignal, cfg: &FrameConfig) -> Result<FrameMatrix> {
    cfg.validate()?;
    let needed = cfg.fixed_len();
    if signal.len() < needed {
        return Err(Error::TooShort { needed, got: signal.len() });
    }
    let emphasized = preemphasize(&signal.samples[..needed], cfg.preemphasis);
    let window = hamming(cfg.frame_len);
    let frames = DMatrix::from_fn(cfg.frame_len, cfg.target_frames, |u, t| {
        window[u] * emphasized[t * cfg.frame_shift + u]
    });
    Ok(FrameMatrix { frames, sample_rate: signal.sample_rate, config: cfg.clone() })
}
