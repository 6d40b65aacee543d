//! File formats: 16-bit PCM mono WAV and the `PHSC` matrix dump.
//!
//! `PHSC` layout, all integers and floats little-endian:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `b"PHSC"`                    |
//! | 4      | 4    | version, `u32` = 1                 |
//! | 8      | 4    | rows `F`, `u32`                    |
//! | 12     | 4    | columns `N`, `u32`                 |
//! | 16     | 4·F·N| row-major `f32` values             |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::spectral::Waveform;

pub const PHSC_MAGIC: &[u8; 4] = b"PHSC";
pub const PHSC_VERSION: u32 = 1;

/// Reads a 16-bit PCM mono WAV, rejecting any other sample rate than
/// `expected_rate`. Samples are scaled to `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavFormat {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let bad = |reason: String| Error::WavFormat {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(bad(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(bad(format!(
            "{}-bit {:?} samples, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(bad(format!(
            "sample rate {} Hz, expected {expected_rate} Hz (resample first)",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    if samples.is_empty() {
        return Err(bad("no samples".into()));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Quantizes to 16-bit PCM, clipping to full scale.
pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in wave.samples() {
        writer.write_sample(to_pcm16(*s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn encode_phsc(m: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(16 + 4 * rows * cols);
    out.extend_from_slice(PHSC_MAGIC);
    out.extend_from_slice(&PHSC_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_phsc(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != PHSC_MAGIC {
        return Err(Error::Version {
            expected: "PHSC".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != PHSC_VERSION {
        return Err(Error::Version {
            expected: format!("PHSC v{PHSC_VERSION}"),
            found: format!("PHSC v{version}"),
        });
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| corrupt("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "{rows}x{cols} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| corrupt(e.to_string()))
}

pub fn write_phsc(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_phsc(m))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_phsc(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_phsc(&bytes, path)
}
