//! Deterministic source-filter speech stand-in.
//!
//! Produces speech-like utterances: a band-limited glottal harmonic source
//! with a wandering F0 contour, shaped by a four-formant cascade that glides
//! between vowel targets, interleaved with noise fricatives and pauses. Used
//! for fixtures, smoke corpora and desk-scale experiments.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::write_wav;
use crate::spectral::Waveform;

/// Formant frequencies (Hz) of five vowels.
const VOWELS: [[f64; 4]; 5] = [
    [730.0, 1090.0, 2440.0, 3400.0],
    [270.0, 2290.0, 3010.0, 3500.0],
    [300.0, 870.0, 2240.0, 3300.0],
    [530.0, 1840.0, 2480.0, 3500.0],
    [570.0, 840.0, 2410.0, 3300.0],
];
const BANDWIDTHS: [f64; 4] = [70.0, 100.0, 140.0, 200.0];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Voiced { vowel: usize },
    Fricative { center: f64 },
    Pause,
}

/// Two-pole resonator with unity gain at DC.
#[derive(Default, Clone, Copy)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64, fs: f64) -> f64 {
        let r = (-PI * bw / fs).exp();
        let a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let a2 = -r * r;
        let y = (1.0 - a1 - a2) * x + a1 * self.y1 + a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Speaker-level settings drawn from the seed.
#[derive(Debug, Clone, Copy)]
pub struct Voice {
    pub f0_base: f64,
    pub formant_scale: f64,
}

impl Voice {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_edf0);
        if rng.random_bool(0.5) {
            Voice {
                f0_base: rng.random_range(95.0..130.0),
                formant_scale: 1.0,
            }
        } else {
            Voice {
                f0_base: rng.random_range(180.0..235.0),
                formant_scale: 1.15,
            }
        }
    }
}

fn plan(rng: &mut ChaCha8Rng, samples: usize, fs: f64) -> Vec<(Segment, usize)> {
    let ms = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| (rng.random_range(lo..hi) * fs / 1000.0) as usize;
    let mut out = vec![(Segment::Pause, ms(10.0, 40.0, rng))];
    let mut total = out[0].1;
    let mut last_voiced = false;
    while total < samples {
        let u: f64 = rng.random();
        let seg = if !last_voiced || u < 0.6 {
            (Segment::Voiced { vowel: rng.random_range(0..VOWELS.len()) }, ms(90.0, 220.0, rng))
        } else if u < 0.85 {
            (Segment::Fricative { center: rng.random_range(2500.0..6000.0) }, ms(40.0, 110.0, rng))
        } else {
            (Segment::Pause, ms(30.0, 70.0, rng))
        };
        last_voiced = matches!(seg.0, Segment::Voiced { .. });
        total += seg.1;
        out.push(seg);
    }
    out
}

/// Raised-cosine envelope that ramps in and out over `ramp` samples.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

/// One utterance of `samples` samples at `sample_rate`, peak-normalized to 0.6.
pub fn utterance(seed: u64, samples: usize, sample_rate: u32) -> Result<Waveform> {
    if samples == 0 {
        return Err(Error::Invalid("utterance needs at least one sample".into()));
    }
    let fs = sample_rate as f64;
    let voice = Voice::from_seed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = plan(&mut rng, samples, fs);
    let duration = samples as f64 / fs;

    let vib_rate = rng.random_range(2.0..5.0);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let drift_rate = rng.random_range(0.5..1.5);
    let nyquist_guard = 0.45 * fs;

    let mut out = Vec::with_capacity(samples);
    let mut theta = 0.0f64;
    let mut jitter = 0.0f64;
    let mut formants = VOWELS[0].map(|f| f * voice.formant_scale);
    let mut cascade = [Resonator::default(); 4];
    let mut fric = Resonator::default();
    let mut hp_prev = 0.0;
    let mut n = 0usize;
    for (seg, len) in segments {
        let start_formants = formants;
        let ramp = (0.012 * fs) as usize;
        for i in 0..len {
            if n >= samples {
                break;
            }
            let t = n as f64 / fs;
            let step: f64 = StandardNormal.sample(&mut rng);
            jitter = 0.995 * jitter + 0.002 * step;
            let f0 = voice.f0_base
                * (1.0 + 0.08 * (2.0 * PI * vib_rate * t + vib_phase).sin()
                    + 0.04 * (2.0 * PI * drift_rate * t).sin()
                    + jitter)
                * (1.0 - 0.12 * t / duration.max(1e-3));
            theta = (theta + 2.0 * PI * f0 / fs) % (2.0 * PI);
            let noise: f64 = StandardNormal.sample(&mut rng);

            let (voiced_gain, fric_gain, fric_center) = match seg {
                Segment::Voiced { vowel } => {
                    let target = VOWELS[vowel].map(|f| f * voice.formant_scale);
                    let glide = (i as f64 / (0.4 * len as f64)).min(1.0);
                    for j in 0..4 {
                        formants[j] = start_formants[j] + (target[j] - start_formants[j]) * glide;
                    }
                    (envelope(i, len, ramp), 0.0, 4000.0)
                }
                Segment::Fricative { center } => (0.0, envelope(i, len, ramp), center),
                Segment::Pause => (0.0, 0.0, 4000.0),
            };

            let mut sample = 0.0;
            if voiced_gain > 0.0 {
                // Σ_h a_h sin(hθ) by the Chebyshev recurrence, tapering
                // harmonics near the band edge.
                let c = 2.0 * theta.cos();
                let (mut s_prev, mut s_cur) = (0.0, theta.sin());
                let mut src = 0.0;
                let mut h = 1.0;
                while h * f0 < nyquist_guard {
                    let taper = ((nyquist_guard - h * f0) / 800.0).min(1.0);
                    src += s_cur * taper / h;
                    let next = c * s_cur - s_prev;
                    s_prev = s_cur;
                    s_cur = next;
                    h += 1.0;
                }
                let mut y = voiced_gain * (src + 0.03 * noise);
                for (j, r) in cascade.iter_mut().enumerate() {
                    y = r.step(y, formants[j], BANDWIDTHS[j] * voice.formant_scale, fs);
                }
                sample += y;
            } else {
                for (j, r) in cascade.iter_mut().enumerate() {
                    r.step(0.0, formants[j], BANDWIDTHS[j], fs);
                }
            }
            let f = fric.step(noise, fric_center, 1800.0, fs);
            let hp = f - hp_prev;
            hp_prev = f;
            sample += fric_gain * 0.8 * hp;
            out.push(sample);
            n += 1;
        }
    }
    out.resize(samples, 0.0);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.6 / peak);
    }
    Waveform::new(out, sample_rate)
}

/// Writes `count` utterances as `utt_000.wav`, `utt_001.wav`, ... with
/// seeds `seed, seed + 1, ...`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    count: usize,
    samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("utt_{i:03}.wav"));
            write_wav(&path, &utterance(seed + i as u64, samples, sample_rate)?)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = utterance(4, 8000, 16_000).unwrap();
        let b = utterance(4, 8000, 16_000).unwrap();
        let c = utterance(5, 8000, 16_000).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 8000);
        let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.6).abs() < 1e-12);
    }

    #[test]
    fn has_voiced_energy_below_one_khz() {
        use crate::spectral::{amplitude, stft, StftConfig};
        let w = utterance(11, 16_000, 16_000).unwrap();
        let amp = amplitude(&stft(&w, &StftConfig::default()).unwrap());
        let low: f64 = amp.values().columns().into_iter().take(64).map(|c| c.sum()).sum();
        let high: f64 = amp.values().columns().into_iter().skip(320).map(|c| c.sum()).sum();
        assert!(low > high);
    }
}
