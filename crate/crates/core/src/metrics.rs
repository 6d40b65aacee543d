//! Objective evaluation: segmental SNR, F0-RMSE in cents and real-time factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::Waveform;

/// SNR frame length in seconds (25 ms).
pub const SNR_FRAME_SECS: f64 = 0.025;
/// Upper bound applied to every per-frame SNR.
pub const SNR_CAP_DB: f64 = 60.0;
/// Frames more than this far below the loudest reference frame are skipped.
pub const SNR_ENERGY_FLOOR_DB: f64 = -60.0;

fn check_rates(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::SampleRate {
            expected: a.sample_rate(),
            actual: b.sample_rate(),
        });
    }
    Ok(())
}

/// Segmental SNR in dB.
///
/// Both signals are trimmed to the shorter length and cut into
/// non-overlapping 25 ms frames. Each frame contributes
/// `10·log10(Σx² / Σ(x − x̂)²)` capped at 60 dB; frames whose reference
/// energy is more than 60 dB below the loudest reference frame are skipped.
pub fn snr(reference: &Waveform, test: &Waveform) -> Result<f64> {
    check_rates(reference, test)?;
    let len = reference.len().min(test.len());
    let frame = ((SNR_FRAME_SECS * reference.sample_rate() as f64).round() as usize).max(1);
    let x = &reference.samples()[..len];
    let y = &test.samples()[..len];
    let frames: Vec<(f64, f64)> = x
        .chunks(frame)
        .zip(y.chunks(frame))
        .map(|(a, b)| {
            let signal: f64 = a.iter().map(|v| v * v).sum();
            let noise: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
            (signal, noise)
        })
        .collect();
    let loudest = frames.iter().fold(0.0f64, |m, (s, _)| m.max(*s));
    if loudest == 0.0 {
        return Err(Error::Undefined("SNR of a silent reference"));
    }
    let floor = loudest * 10f64.powf(SNR_ENERGY_FLOOR_DB / 10.0);
    let per_frame: Vec<f64> = frames
        .iter()
        .filter(|(s, _)| *s > floor)
        .map(|(s, n)| {
            if *n == 0.0 {
                SNR_CAP_DB
            } else {
                (10.0 * (s / n).log10()).min(SNR_CAP_DB)
            }
        })
        .collect();
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// Normalized-autocorrelation F0 tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Tracker {
    pub frame_secs: f64,
    pub hop_secs: f64,
    pub min_hz: f64,
    pub max_hz: f64,
    pub voicing_threshold: f64,
}

impl Default for F0Tracker {
    fn default() -> Self {
        Self {
            frame_secs: 0.025,
            hop_secs: 0.005,
            min_hz: 60.0,
            max_hz: 400.0,
            voicing_threshold: 0.3,
        }
    }
}

impl F0Tracker {
    /// One entry per hop for every frame whose analysis span fits in the
    /// signal; `None` for unvoiced frames.
    ///
    /// A frame of `W` samples is correlated against the same-length segment
    /// `τ` samples later, for every lag in the allowed pitch range. The
    /// strongest peak decides voicing; if a peak at an integer fraction of
    /// its lag reaches 90% of its strength, that shorter lag is the period.
    /// The chosen lag is refined by parabolic interpolation.
    pub fn track(&self, wave: &Waveform) -> Vec<Option<f64>> {
        let fs = wave.sample_rate() as f64;
        let x = wave.samples();
        let width = (self.frame_secs * fs).round() as usize;
        let hop = ((self.hop_secs * fs).round() as usize).max(1);
        let min_lag = (fs / self.max_hz).floor().max(2.0) as usize;
        let max_lag = (fs / self.min_hz).ceil() as usize;
        // only frames whose longest lagged segment stays inside the signal
        let span = width + max_lag + 1;
        let frames = if x.len() >= span { (x.len() - span) / hop + 1 } else { 1 };
        let at = |i: usize| x.get(i).copied().unwrap_or(0.0);
        (0..frames)
            .map(|f| {
                let start = f * hop;
                let seg: Vec<f64> = (0..width + max_lag + 1).map(|i| at(start + i)).collect();
                let e0: f64 = seg[..width].iter().map(|v| v * v).sum();
                if e0 <= 1e-12 {
                    return None;
                }
                let r: Vec<f64> = (min_lag - 1..=max_lag + 1)
                    .map(|lag| {
                        let (mut xy, mut yy) = (0.0, 0.0);
                        for i in 0..width {
                            xy += seg[i] * seg[i + lag];
                            yy += seg[i + lag] * seg[i + lag];
                        }
                        if yy <= 1e-12 {
                            0.0
                        } else {
                            xy / (e0 * yy).sqrt()
                        }
                    })
                    .collect();
                // r[j] is lag min_lag - 1 + j; peaks are interior points only
                let peaks: Vec<usize> = (1..r.len() - 1)
                    .filter(|&j| r[j] > r[j - 1] && r[j] >= r[j + 1])
                    .collect();
                let &top = peaks.iter().max_by(|&&a, &&b| r[a].total_cmp(&r[b]))?;
                let best = r[top];
                if best < self.voicing_threshold {
                    return None;
                }
                // A peak near best_lag / k that is nearly as strong means the
                // best lag is a multiple of the period.
                let best_lag = (min_lag - 1 + top) as f64;
                let j = (2..=8)
                    .rev()
                    .filter_map(|k| {
                        let target = best_lag / k as f64;
                        peaks
                            .iter()
                            .copied()
                            .filter(|&p| ((min_lag - 1 + p) as f64 - target).abs() <= 1.5 + 0.02 * target)
                            .find(|&p| r[p] >= 0.9 * best)
                    })
                    .next()
                    .unwrap_or(top);
                let (a, b, c) = (r[j - 1], r[j], r[j + 1]);
                let denom = a - 2.0 * b + c;
                let delta = if denom.abs() > 1e-12 {
                    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                };
                let lag = (min_lag - 1 + j) as f64 + delta;
                Some(fs / lag)
            })
            .collect()
    }
}

/// RMS of `1200·log2(f_test / f_ref)` over frames voiced in both signals.
pub fn f0_rmse(reference: &Waveform, test: &Waveform) -> Result<f64> {
    f0_rmse_with(&F0Tracker::default(), reference, test)
}

pub fn f0_rmse_with(tracker: &F0Tracker, reference: &Waveform, test: &Waveform) -> Result<f64> {
    check_rates(reference, test)?;
    let a = tracker.track(reference);
    let b = tracker.track(test);
    let diffs: Vec<f64> = a
        .iter()
        .zip(&b)
        .filter_map(|(x, y)| Some(1200.0 * (y.as_ref()? / x.as_ref()?).log2()))
        .collect();
    if diffs.is_empty() {
        return Err(Error::Undefined("F0-RMSE without mutually voiced frames"));
    }
    Ok((diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt())
}

/// Generation time divided by audio duration.
pub fn rtf(generation_secs: f64, audio_secs: f64) -> Result<f64> {
    if !(audio_secs > 0.0) {
        return Err(Error::Invalid(format!("audio duration must be positive, got {audio_secs}")));
    }
    if !(generation_secs >= 0.0) {
        return Err(Error::Invalid(format!("generation time must be nonnegative, got {generation_secs}")));
    }
    Ok(generation_secs / audio_secs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub name: String,
    pub snr_db: f64,
    /// `None` when no frame is voiced in both signals.
    pub f0_rmse_cents: Option<f64>,
    pub duration_s: f64,
    pub generation_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub utterances: Vec<UtteranceReport>,
    pub mean_snr_db: f64,
    pub mean_f0_rmse_cents: Option<f64>,
    pub total_duration_s: f64,
    pub total_generation_s: Option<f64>,
    pub rtf: Option<f64>,
}

impl EvalReport {
    /// Aggregates per-utterance rows. Timing is reported only when every
    /// utterance carries it.
    pub fn from_utterances(system: impl Into<String>, utterances: Vec<UtteranceReport>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Empty("no utterances to report".into()));
        }
        let n = utterances.len() as f64;
        let mean_snr_db = utterances.iter().map(|u| u.snr_db).sum::<f64>() / n;
        let f0: Vec<f64> = utterances.iter().filter_map(|u| u.f0_rmse_cents).collect();
        let mean_f0_rmse_cents = (!f0.is_empty()).then(|| f0.iter().sum::<f64>() / f0.len() as f64);
        let total_duration_s: f64 = utterances.iter().map(|u| u.duration_s).sum();
        let total_generation_s: Option<f64> = utterances.iter().map(|u| u.generation_s).sum();
        let rtf = match total_generation_s {
            Some(g) => Some(rtf(g, total_duration_s)?),
            None => None,
        };
        Ok(Self {
            system: system.into(),
            utterances,
            mean_snr_db,
            mean_f0_rmse_cents,
            total_duration_s,
            total_generation_s,
            rtf,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table with the same columns as the usual comparison table.
    pub fn to_table(&self) -> String {
        let fmt_opt = |v: Option<f64>, prec: usize| match v {
            Some(x) => format!("{x:.prec$}"),
            None => "--".to_string(),
        };
        let mut rows = vec![[
            "utterance".to_string(),
            "SNR(dB)".to_string(),
            "F0-RMSE(cent)".to_string(),
            "dur(s)".to_string(),
            "gen(s)".to_string(),
        ]];
        for u in &self.utterances {
            rows.push([
                u.name.clone(),
                format!("{:.2}", u.snr_db),
                fmt_opt(u.f0_rmse_cents, 1),
                format!("{:.3}", u.duration_s),
                fmt_opt(u.generation_s, 3),
            ]);
        }
        rows.push([
            format!("[{}] mean", self.system),
            format!("{:.2}", self.mean_snr_db),
            fmt_opt(self.mean_f0_rmse_cents, 1),
            format!("{:.3}", self.total_duration_s),
            fmt_opt(self.total_generation_s, 3),
        ]);
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    if c == 0 {
                        format!("{v:<w$}", w = widths[c])
                    } else {
                        format!("{v:>w$}", w = widths[c])
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 || i == rows.len() - 2 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 8));
                out.push('\n');
            }
        }
        match self.rtf {
            Some(r) => out.push_str(&format!("RTF {:.3} ({:.1}x real time)\n", r, 1.0 / r.max(1e-12))),
            None => out.push_str("RTF --\n"),
        }
        out
    }
}
