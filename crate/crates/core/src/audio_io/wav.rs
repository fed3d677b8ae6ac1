//! Minimal RIFF/WAVE reader and writer for 16-bit mono PCM.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const WAVE_FORMAT_PCM: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FmtChunk {
    format_tag: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a WAV byte buffer into `(samples, sample_rate)`, samples scaled by 1/32768.
pub fn decode(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && &bytes[..4] != b"RIFF" {
            return Err(Error::NotWav("missing RIFF header".into()));
        }
        return Err(Error::TruncatedFile("header shorter than 12 bytes".into()));
    }
    if &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::NotWav("missing RIFF/WAVE signature".into()));
    }

    let mut fmt = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(Error::TruncatedFile("fmt chunk".into()));
                }
                fmt = Some(FmtChunk {
                    format_tag: read_u16(bytes, body),
                    channels: read_u16(bytes, body + 2),
                    sample_rate: read_u32(bytes, body + 4),
                    bits_per_sample: read_u16(bytes, body + 14),
                });
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| Error::NotWav("data chunk before fmt chunk".into()))?;
                check_format(&fmt)?;
                if body + size > bytes.len() {
                    return Err(Error::TruncatedFile(format!(
                        "data chunk declares {size} bytes, {} available",
                        bytes.len() - body
                    )));
                }
                if size % 2 != 0 {
                    return Err(Error::TruncatedFile("odd byte count in 16-bit data".into()));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                    .collect();
                return Ok((samples, fmt.sample_rate));
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(Error::TruncatedFile("no data chunk".into()))
}

fn check_format(fmt: &FmtChunk) -> Result<()> {
    if fmt.format_tag != WAVE_FORMAT_PCM {
        return Err(Error::UnsupportedEncoding(format!("format tag {}", fmt.format_tag)));
    }
    if fmt.channels != 1 {
        return Err(Error::UnsupportedEncoding(format!("{} channels", fmt.channels)));
    }
    if fmt.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!("{} bits per sample", fmt.bits_per_sample)));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::UnsupportedEncoding("sample rate 0".into()));
    }
    Ok(())
}

/// Encodes 16-bit mono PCM. Samples are clamped to the i16 range.
pub fn encode(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_pcm16(path: &Path, samples: &[i16], sample_rate: u32) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(samples, sample_rate))?;
    Ok(())
}

/// Quantizes `[-1, 1]` samples to i16 with saturation.
pub fn quantize(samples: &[f64]) -> Vec<i16> {
    samples
        .iter()
        .map(|&x| (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}
