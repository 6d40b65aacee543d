//! Short-time Fourier analysis and synthesis, plus the frame-wise
//! differential operators used by the training losses.
//!
//! Spectrograms are `F × N` matrices: one row per frame, one column per
//! frequency bin (`N = fft_size / 2 + 1`).
//!
//! Frames are centered on multiples of the hop. The signal is reflection
//! padded by `window_length / 2` on each side, so an `L`-sample signal has
//! `⌊L / hop⌋ + 1` frames. The windowed frame sits in the middle of the FFT
//! buffer, which makes bin phases relative to sample `fft_size / 2` of the
//! buffer.
//!
//! [`StftProcessor::inverse`] is the least-squares inverse: overlap-add with
//! the analysis window, the reflected padding folded back onto the samples
//! it was copied from, and division by the matching sum of squared window
//! weights. For a consistent spectrogram this reproduces the signal exactly,
//! and for any other it returns the signal whose STFT is closest.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phasemath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of the given length.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / n;
                match self {
                    WindowKind::Hann => 0.5 - 0.5 * x.cos(),
                    WindowKind::Hamming => 0.54 - 0.46 * x.cos(),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
    pub centered: bool,
}

impl Default for StftConfig {
    /// 16 kHz, 20 ms Hann window, 5 ms hop, 1024-point FFT.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_length: 320,
            hop_length: 80,
            fft_size: 1024,
            window_kind: WindowKind::Hann,
            centered: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.hop_length == 0
            || self.hop_length > self.window_length
            || self.window_length > self.fft_size
        {
            return Err(Error::Config(format!(
                "need 0 < hop_length ({}) <= window_length ({}) <= fft_size ({})",
                self.hop_length, self.window_length, self.fft_size
            )));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "fft_size {} is not a power of two",
                self.fft_size
            )));
        }
        // Overlap-added squared window over one hop period must stay away
        // from zero, otherwise the inverse cannot renormalize.
        let w = self.window();
        let peak = w.iter().fold(0.0f64, |m, v| m.max(v * v));
        let min_sum = (0..self.hop_length)
            .map(|phase| {
                w.iter()
                    .skip(phase)
                    .step_by(self.hop_length)
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if !(min_sum > 1e-6 * peak) {
            return Err(Error::Config(format!(
                "{:?} window of {} samples with hop {} does not overlap-add to a nonzero envelope",
                self.window_kind, self.window_length, self.hop_length
            )));
        }
        Ok(())
    }

    /// Number of frequency bins, `fft_size / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        self.window_kind.coefficients(self.window_length)
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if self.centered {
            len / self.hop_length + 1
        } else if len < self.window_length {
            0
        } else {
            (len - self.window_length) / self.hop_length + 1
        }
    }

    fn pad(&self) -> usize {
        if self.centered {
            self.window_length / 2
        } else {
            0
        }
    }
}

/// Mono audio. Samples are nominally in `[-1, 1]`; reconstructions may
/// overshoot slightly and are clipped only when written to 16-bit PCM.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("waveform has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!("non-finite sample at index {i}")));
        }
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `F × N` complex STFT, stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    real: Array2<f64>,
    imag: Array2<f64>,
}

impl ComplexSpectrogram {
    pub fn new(real: Array2<f64>, imag: Array2<f64>) -> Result<Self> {
        if real.dim() != imag.dim() {
            return Err(Error::shape(
                format!("{:?}", real.dim()),
                format!("{:?}", imag.dim()),
            ));
        }
        if real.iter().chain(imag.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite spectrogram entry".into()));
        }
        Ok(Self { real, imag })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            real: Array2::zeros((frames, bins)),
            imag: Array2::zeros((frames, bins)),
        }
    }

    /// Builds `A·e^{jP}`.
    pub fn from_polar(amp: &AmplitudeSpectrogram, phase: &PhaseSpectrogram) -> Result<Self> {
        if amp.dim() != phase.dim() {
            return Err(Error::shape(
                format!("amplitude {:?}", amp.dim()),
                format!("phase {:?}", phase.dim()),
            ));
        }
        let real = ndarray::Zip::from(amp.values())
            .and(phase.values())
            .map_collect(|&a, &p| a * p.cos());
        let imag = ndarray::Zip::from(amp.values())
            .and(phase.values())
            .map_collect(|&a, &p| a * p.sin());
        Ok(Self { real, imag })
    }

    pub fn real(&self) -> &Array2<f64> {
        &self.real
    }

    pub fn imag(&self) -> &Array2<f64> {
        &self.imag
    }

    /// `(frames, bins)`.
    pub fn dim(&self) -> (usize, usize) {
        self.real.dim()
    }

    pub fn frames(&self) -> usize {
        self.real.nrows()
    }

    pub fn bins(&self) -> usize {
        self.real.ncols()
    }

    /// Sum of squared magnitudes over the stored (one-sided) bins.
    pub fn energy(&self) -> f64 {
        self.real.iter().map(|v| v * v).sum::<f64>() + self.imag.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Linear magnitudes, all entries `>= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeSpectrogram(Array2<f64>);

impl AmplitudeSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!(
                "amplitude entries must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Radians, all entries in `(-π, π]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpectrogram(Array2<f64>);

impl PhaseSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > -PI && **v <= PI)) {
            return Err(Error::Invalid(format!("phase {v} is outside (-π, π]")));
        }
        Ok(Self(values))
    }

    /// Wraps arbitrary reals into the principal interval.
    pub fn wrapped(values: Array2<f64>) -> Self {
        Self(values.mapv_into(phasemath::wrap))
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self(Array2::zeros((frames, bins)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Planned forward/inverse transforms for one [`StftConfig`].
#[derive(Clone)]
pub struct StftProcessor {
    cfg: StftConfig,
    window: Vec<f64>,
    offset: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for StftProcessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftProcessor").field("cfg", &self.cfg).finish()
    }
}

impl StftProcessor {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            window: cfg.window(),
            offset: (cfg.fft_size - cfg.window_length) / 2,
            r2c: planner.plan_fft_forward(cfg.fft_size),
            c2r: planner.plan_fft_inverse(cfg.fft_size),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// STFT of raw samples (no sample-rate check).
    pub fn forward_samples(&self, x: &[f64]) -> Result<ComplexSpectrogram> {
        if x.is_empty() {
            return Err(Error::Empty("cannot analyse an empty signal".into()));
        }
        let cfg = &self.cfg;
        let frames = cfg.frame_count(x.len());
        if frames == 0 {
            return Err(Error::Invalid(format!(
                "signal of {} samples is shorter than one {}-sample frame",
                x.len(),
                cfg.window_length
            )));
        }
        let bins = cfg.bins();
        let pad = cfg.pad();
        let mut real = Array2::zeros((frames, bins));
        let mut imag = Array2::zeros((frames, bins));
        let mut buf = self.r2c.make_input_vec();
        let mut out = self.r2c.make_output_vec();
        let mut scratch = self.r2c.make_scratch_vec();
        for f in 0..frames {
            buf.iter_mut().for_each(|v| *v = 0.0);
            let start = f * cfg.hop_length;
            for (n, w) in self.window.iter().enumerate() {
                let src = reflect_index(start + n, pad, x.len());
                buf[self.offset + n] = w * x[src];
            }
            self.r2c
                .process_with_scratch(&mut buf, &mut out, &mut scratch)
                .expect("buffer sizes come from the plan");
            for (k, c) in out.iter().enumerate() {
                real[[f, k]] = c.re;
                imag[[f, k]] = c.im;
            }
        }
        Ok(ComplexSpectrogram { real, imag })
    }

    pub fn forward(&self, wave: &Waveform) -> Result<ComplexSpectrogram> {
        if wave.sample_rate() != self.cfg.sample_rate {
            return Err(Error::SampleRate {
                expected: self.cfg.sample_rate,
                actual: wave.sample_rate(),
            });
        }
        self.forward_samples(wave.samples())
    }

    /// Least-squares inverse STFT to a signal of exactly `length` samples.
    pub fn inverse_samples(&self, spec: &ComplexSpectrogram, length: usize) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        let (frames, bins) = spec.dim();
        if bins != cfg.bins() {
            return Err(Error::shape(
                format!("{} bins", cfg.bins()),
                format!("{bins} bins"),
            ));
        }
        if length == 0 || cfg.frame_count(length) != frames {
            return Err(Error::shape(
                format!("{} frames for length {length}", cfg.frame_count(length)),
                format!("{frames} frames"),
            ));
        }
        let pad = cfg.pad();
        let padded = (frames - 1) * cfg.hop_length + cfg.window_length;
        let mut num = vec![0.0; padded];
        let mut den = vec![0.0; padded];
        let mut cbuf = self.c2r.make_input_vec();
        let mut tbuf = self.c2r.make_output_vec();
        let mut scratch = self.c2r.make_scratch_vec();
        let scale = 1.0 / cfg.fft_size as f64;
        for f in 0..frames {
            for (k, c) in cbuf.iter_mut().enumerate() {
                *c = Complex64::new(spec.real[[f, k]], spec.imag[[f, k]]);
            }
            // A real signal has real DC and Nyquist bins; the projection
            // drops their imaginary parts.
            cbuf[0].im = 0.0;
            let last = cbuf.len() - 1;
            cbuf[last].im = 0.0;
            self.c2r
                .process_with_scratch(&mut cbuf, &mut tbuf, &mut scratch)
                .expect("buffer sizes come from the plan");
            let start = f * cfg.hop_length;
            for (n, w) in self.window.iter().enumerate() {
                num[start + n] += w * tbuf[self.offset + n] * scale;
                den[start + n] += w * w;
            }
        }
        // Fold the padded region back onto the samples it mirrors.
        let mut out = vec![0.0; length];
        let mut norm = vec![0.0; length];
        for p in 0..padded {
            let src = reflect_index(p, pad, length);
            out[src] += num[p];
            norm[src] += den[p];
        }
        let peak = self.window.iter().fold(0.0f64, |m, v| m.max(v * v));
        for (i, (o, d)) in out.iter_mut().zip(&norm).enumerate() {
            if *d > 1e-10 * peak {
                *o /= d;
            } else if cfg.centered {
                return Err(Error::Invalid(format!(
                    "zero overlap-add normalization at sample {i}"
                )));
            } else {
                // uncentered frames leave the outermost samples unweighted
                *o = 0.0;
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, spec: &ComplexSpectrogram, length: usize) -> Result<Waveform> {
        Waveform::new(self.inverse_samples(spec, length)?, self.cfg.sample_rate)
    }
}

/// Maps an index of the padded signal to the source sample, mirroring about
/// the first and last samples without repeating them.
fn reflect_index(p: usize, pad: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1) as i64;
    let mut i = (p as i64 - pad as i64).rem_euclid(period);
    if i >= len as i64 {
        i = period - i;
    }
    i as usize
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    StftProcessor::new(cfg)?.forward(wave)
}

pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, length: usize) -> Result<Waveform> {
    StftProcessor::new(cfg)?.inverse(spec, length)
}

pub fn amplitude(spec: &ComplexSpectrogram) -> AmplitudeSpectrogram {
    AmplitudeSpectrogram(
        ndarray::Zip::from(&spec.real)
            .and(&spec.imag)
            .map_collect(|r, i| r.hypot(*i)),
    )
}

/// Default floor applied before taking the logarithm of magnitudes.
pub const LOG_AMPLITUDE_FLOOR: f64 = 1e-5;

/// `ln(max(amp, floor))`, element-wise.
pub fn log_amplitude(amp: &AmplitudeSpectrogram, floor: f64) -> Result<Array2<f64>> {
    if !(floor > 0.0) {
        return Err(Error::Invalid(format!("log floor must be positive, got {floor}")));
    }
    Ok(amp.0.mapv(|a| a.max(floor).ln()))
}

pub fn phase_of(spec: &ComplexSpectrogram) -> PhaseSpectrogram {
    PhaseSpectrogram(
        ndarray::Zip::from(&spec.real)
            .and(&spec.imag)
            .map_collect(|r, i| phasemath::phi(*r, *i)),
    )
}

/// Forward difference along the bin axis: `m[:, k+1] - m[:, k]`.
pub fn diff_freq(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    diff_along(m, Axis(1))
}

/// Forward difference along the frame axis: `m[t+1, :] - m[t, :]`.
pub fn diff_time(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    diff_along(m, Axis(0))
}

fn diff_along(m: ArrayView2<f64>, axis: Axis) -> Result<Array2<f64>> {
    let n = m.len_of(axis);
    if n < 2 {
        return Err(Error::shape(
            format!("at least 2 entries along axis {}", axis.index()),
            n,
        ));
    }
    let hi = m.slice_axis(axis, ndarray::Slice::from(1..));
    let lo = m.slice_axis(axis, ndarray::Slice::from(..n - 1));
    Ok(&hi - &lo)
}
