//! Iterative Griffin-Lim phase estimation, the non-neural baseline.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::phasemath;
use crate::spectral::{
    AmplitudeSpectrogram, ComplexSpectrogram, PhaseSpectrogram, StftConfig, StftProcessor,
    Waveform,
};

/// Magnitudes below this keep the previous phase estimate.
pub const MAGNITUDE_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum GlInit {
    #[default]
    Zero,
    /// Uniform in `(-π, π]`, drawn from a ChaCha8 stream seeded with `seed`.
    Random { seed: u64 },
    Provided(PhaseSpectrogram),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlConfig {
    pub iterations: usize,
    pub init: GlInit,
    /// Length of the intermediate signal; defaults to `(F - 1) · hop`.
    pub signal_length: Option<usize>,
}

impl GlConfig {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }
}

/// Griffin-Lim over one amplitude spectrogram, keeping its planned FFTs.
pub struct GriffinLim {
    stft: StftProcessor,
}

impl GriffinLim {
    pub fn new(stft_cfg: &StftConfig) -> Result<Self> {
        Ok(Self {
            stft: StftProcessor::new(stft_cfg)?,
        })
    }

    fn check(&self, amp: &AmplitudeSpectrogram, length: usize) -> Result<()> {
        let cfg = self.stft.config();
        let (frames, bins) = amp.dim();
        if bins != cfg.bins() {
            return Err(Error::shape(format!("{} bins", cfg.bins()), format!("{bins} bins")));
        }
        if cfg.frame_count(length) != frames {
            return Err(Error::shape(
                format!("{} frames for length {length}", cfg.frame_count(length)),
                format!("{frames} frames"),
            ));
        }
        Ok(())
    }

    fn default_length(&self, frames: usize) -> usize {
        let cfg = self.stft.config();
        if cfg.centered {
            ((frames.max(1) - 1) * cfg.hop_length).max(1)
        } else {
            (frames.max(1) - 1) * cfg.hop_length + cfg.window_length
        }
    }

    fn initial_phase(&self, amp: &AmplitudeSpectrogram, init: &GlInit) -> Result<PhaseSpectrogram> {
        let (frames, bins) = amp.dim();
        Ok(match init {
            GlInit::Zero => PhaseSpectrogram::zeros(frames, bins),
            GlInit::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let values = Array2::from_shape_simple_fn((frames, bins), || {
                    // (-π, π]: negate a draw from [-π, π)
                    -rng.random_range(-PI..PI)
                });
                PhaseSpectrogram::new(values)?
            }
            GlInit::Provided(p) => {
                if p.dim() != amp.dim() {
                    return Err(Error::shape(
                        format!("initial phase {:?}", amp.dim()),
                        format!("{:?}", p.dim()),
                    ));
                }
                p.clone()
            }
        })
    }

    /// `STFT(ISTFT(A·e^{jP}))`.
    fn project(
        &self,
        amp: &AmplitudeSpectrogram,
        phase: &PhaseSpectrogram,
        length: usize,
    ) -> Result<ComplexSpectrogram> {
        let x = self
            .stft
            .inverse_samples(&ComplexSpectrogram::from_polar(amp, phase)?, length)?;
        self.stft.forward_samples(&x)
    }

    /// Runs the iteration and also returns the consistency residual of each
    /// intermediate estimate `P_0 .. P_{n-1}`.
    pub fn run_with_trace(
        &self,
        amp: &AmplitudeSpectrogram,
        cfg: &GlConfig,
    ) -> Result<(PhaseSpectrogram, Vec<f64>)> {
        let length = cfg
            .signal_length
            .unwrap_or_else(|| self.default_length(amp.dim().0));
        self.check(amp, length)?;
        let mut phase = self.initial_phase(amp, &cfg.init)?.into_values();
        let mut trace = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let p = PhaseSpectrogram::new(phase)?;
            let s = self.project(amp, &p, length)?;
            trace.push(weighted_residual(amp, &s));
            phase = p.into_values();
            Zip::from(&mut phase)
                .and(s.real())
                .and(s.imag())
                .for_each(|p, &re, &im| {
                    if re.hypot(im) >= MAGNITUDE_EPSILON {
                        *p = phasemath::phi(re, im);
                    }
                });
        }
        Ok((PhaseSpectrogram::new(phase)?, trace))
    }

    pub fn run(&self, amp: &AmplitudeSpectrogram, cfg: &GlConfig) -> Result<PhaseSpectrogram> {
        Ok(self.run_with_trace(amp, cfg)?.0)
    }

    /// `‖A − |STFT(ISTFT(A·e^{jP}))|‖²` over the two-sided spectrum.
    pub fn consistency_residual(
        &self,
        amp: &AmplitudeSpectrogram,
        phase: &PhaseSpectrogram,
        length: usize,
    ) -> Result<f64> {
        self.check(amp, length)?;
        Ok(weighted_residual(amp, &self.project(amp, phase, length)?))
    }
}

/// Squared magnitude error counting interior bins twice, i.e. measured on
/// the Hermitian-symmetric full spectrum. This is the norm in which the
/// least-squares inverse STFT is an orthogonal projection.
fn weighted_residual(amp: &AmplitudeSpectrogram, s: &ComplexSpectrogram) -> f64 {
    let last = amp.dim().1 - 1;
    let mut total = 0.0;
    for ((f, k), a) in amp.values().indexed_iter() {
        let m = s.real()[[f, k]].hypot(s.imag()[[f, k]]);
        let w = if k == 0 || k == last { 1.0 } else { 2.0 };
        total += w * (a - m) * (a - m);
    }
    total
}

pub fn griffin_lim(
    amp: &AmplitudeSpectrogram,
    cfg: &GlConfig,
    stft_cfg: &StftConfig,
) -> Result<PhaseSpectrogram> {
    GriffinLim::new(stft_cfg)?.run(amp, cfg)
}

/// ISTFT of `A·e^{jP}` to `length` samples.
pub fn reconstruct(
    amp: &AmplitudeSpectrogram,
    phase: &PhaseSpectrogram,
    stft_cfg: &StftConfig,
    length: usize,
) -> Result<Waveform> {
    StftProcessor::new(stft_cfg)?.inverse(&ComplexSpectrogram::from_polar(amp, phase)?, length)
}
