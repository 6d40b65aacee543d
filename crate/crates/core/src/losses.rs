//! Instantaneous phase, group delay and instantaneous angular frequency
//! losses.
//!
//! Each term is the mean of an activation of a residual between predicted
//! and natural phase: the residual itself (instantaneous phase), its
//! difference along bins (group delay), or its difference along frames
//! (instantaneous angular frequency). The activation is the anti-wrapping
//! function by default, or a plain absolute value for the L1 ablation.

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phasemath;
use crate::spectral::{diff_freq, diff_time};

type Activation = fn(f64) -> f64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub enable_ip: bool,
    pub enable_gd: bool,
    pub enable_iaf: bool,
    /// `false` replaces the anti-wrapping activation with `|x|`.
    pub anti_wrap_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            enable_ip: true,
            enable_gd: true,
            enable_iaf: true,
            anti_wrap_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enable_ip || self.enable_gd || self.enable_iaf {
            Ok(())
        } else {
            Err(Error::Config("at least one loss term must be enabled".into()))
        }
    }

    /// The per-element activation and its derivative.
    fn activation(&self) -> (Activation, Activation) {
        if self.anti_wrap_enabled {
            (phasemath::anti_wrap, phasemath::anti_wrap_grad)
        } else {
            (f64::abs, abs_grad)
        }
    }
}

fn abs_grad(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

/// Loss terms in radians. Disabled terms are still evaluated for reporting
/// but excluded from `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ip: f64,
    pub gd: f64,
    pub iaf: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.ip.is_finite() && self.gd.is_finite() && self.iaf.is_finite() && self.total.is_finite()
    }

    /// Element-wise mean of several breakdowns (batch reduction).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.ip += b.ip;
            acc.gd += b.gd;
            acc.iaf += b.iaf;
            acc.total += b.total;
        }
        LossBreakdown {
            ip: acc.ip / n,
            gd: acc.gd / n,
            iaf: acc.iaf / n,
            total: acc.total / n,
        }
    }
}

fn same_shape(p_hat: &ArrayView2<f64>, p: &ArrayView2<f64>) -> Result<()> {
    if p_hat.dim() != p.dim() {
        return Err(Error::shape(format!("{:?}", p.dim()), format!("{:?}", p_hat.dim())));
    }
    Ok(())
}

fn mean_activation(a: ArrayView2<f64>, b: ArrayView2<f64>, act: Activation) -> f64 {
    let n = a.len() as f64;
    Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + act(x - y)) / n
}

/// Instantaneous phase loss with anti-wrapping.
pub fn loss_ip(p_hat: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<f64> {
    same_shape(&p_hat, &p)?;
    if p.is_empty() {
        return Err(Error::Empty("phase spectrogram".into()));
    }
    Ok(mean_activation(p_hat, p, phasemath::anti_wrap))
}

/// Group delay loss: anti-wrapped differences along the bin axis.
pub fn loss_gd(p_hat: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<f64> {
    same_shape(&p_hat, &p)?;
    let a = diff_freq(p_hat)?;
    let b = diff_freq(p)?;
    Ok(mean_activation(a.view(), b.view(), phasemath::anti_wrap))
}

/// Instantaneous angular frequency loss: anti-wrapped differences along
/// the frame axis.
pub fn loss_iaf(p_hat: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<f64> {
    same_shape(&p_hat, &p)?;
    let a = diff_time(p_hat)?;
    let b = diff_time(p)?;
    Ok(mean_activation(a.view(), b.view(), phasemath::anti_wrap))
}

/// All three terms under `cfg` and `∂total/∂p_hat`.
pub fn loss_with_grad(
    p_hat: ArrayView2<f64>,
    p: ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array2<f64>)> {
    cfg.validate()?;
    same_shape(&p_hat, &p)?;
    let (frames, bins) = p.dim();
    if frames < 2 || bins < 2 {
        return Err(Error::shape("at least 2×2", format!("{frames}×{bins}")));
    }
    let (act, act_grad) = cfg.activation();
    let mut grad = Array2::<f64>::zeros((frames, bins));

    let e = &p_hat - &p;
    let ip = e.iter().map(|v| act(*v)).sum::<f64>() / e.len() as f64;
    if cfg.enable_ip {
        let n = e.len() as f64;
        Zip::from(&mut grad).and(&e).for_each(|g, v| *g += act_grad(*v) / n);
    }

    // Differences of the residual equal residuals of the differences.
    let ef = &e.slice(s![.., 1..]) - &e.slice(s![.., ..bins - 1]);
    let gd = ef.iter().map(|v| act(*v)).sum::<f64>() / ef.len() as f64;
    if cfg.enable_gd {
        let n = ef.len() as f64;
        for ((t, k), v) in ef.indexed_iter() {
            let g = act_grad(*v) / n;
            grad[[t, k + 1]] += g;
            grad[[t, k]] -= g;
        }
    }

    let et = &e.slice(s![1.., ..]) - &e.slice(s![..frames - 1, ..]);
    let iaf = et.iter().map(|v| act(*v)).sum::<f64>() / et.len() as f64;
    if cfg.enable_iaf {
        let n = et.len() as f64;
        for ((t, k), v) in et.indexed_iter() {
            let g = act_grad(*v) / n;
            grad[[t + 1, k]] += g;
            grad[[t, k]] -= g;
        }
    }

    let total = [(cfg.enable_ip, ip), (cfg.enable_gd, gd), (cfg.enable_iaf, iaf)]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, v)| v)
        .sum();
    Ok((LossBreakdown { ip, gd, iaf, total }, grad))
}

/// The combined loss with its per-term breakdown.
pub fn loss_total(p_hat: ArrayView2<f64>, p: ArrayView2<f64>, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(loss_with_grad(p_hat, p, cfg)?.0)
}
