use crate::error::{Error, Result};

use super::Waveform;

/// SI-SNR reported when the residual vanishes.
pub const SI_SNR_CAP_DB: f64 = 60.0;

const RESIDUAL_FLOOR: f64 = 1e-12;
const SILENCE: f64 = 1e-20;

/// Output of [`mix_at_snr`]. `clean` and `noise` are the components that
/// actually sum to `noisy`, after any peak normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Mix {
    pub noisy: Waveform,
    pub clean: Waveform,
    pub noise: Waveform,
    /// Factor applied to both components; 1 unless the mix would clip.
    pub peak_factor: f64,
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Mix `clean` with `noise` scaled to the requested SNR. The noise is tiled
/// cyclically or cropped to the clean length.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mix> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Contract(format!("rates differ: {} vs {}", clean.sample_rate, noise.sample_rate)));
    }
    if !snr_db.is_finite() {
        return Err(Error::Contract(format!("SNR {snr_db} dB is not finite")));
    }
    let c: Vec<f64> = clean.samples.iter().map(|&s| s as f64).collect();
    let p_clean = power(&c);
    if c.is_empty() || p_clean <= SILENCE {
        return Err(Error::Degenerate("clean signal is silent".into()));
    }
    let n: Vec<f64> = (0..c.len()).map(|i| noise.samples.get(i % noise.len().max(1)).copied().unwrap_or(0.0) as f64).collect();
    let p_noise = power(&n);
    if p_noise <= SILENCE {
        return Err(Error::Degenerate("noise signal is silent".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let n: Vec<f64> = n.iter().map(|v| v * gain).collect();
    let peak = c.iter().zip(&n).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    let limit = 32767.0 / 32768.0;
    let peak_factor = if peak > limit { limit / peak } else { 1.0 };
    let to_wave = |v: Vec<f32>| Waveform::new(v, clean.sample_rate);
    Ok(Mix {
        noisy: to_wave(c.iter().zip(&n).map(|(a, b)| ((a + b) * peak_factor) as f32).collect())?,
        clean: to_wave(c.iter().map(|a| (a * peak_factor) as f32).collect())?,
        noise: to_wave(n.iter().map(|b| (b * peak_factor) as f32).collect())?,
        peak_factor,
    })
}

fn zero_mean(x: &[f32]) -> Vec<f64> {
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|&v| v as f64 - mean).collect()
}

/// Scale-invariant SNR in dB of `est` against `reference`, capped at
/// [`SI_SNR_CAP_DB`].
pub fn si_snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Dimension(format!("lengths differ: {} vs {}", est.len(), reference.len())));
    }
    let e = zero_mean(&est.samples);
    let r = zero_mean(&reference.samples);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr <= SILENCE {
        return Err(Error::Degenerate("reference has zero power".into()));
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target: f64 = alpha * alpha * rr;
    let residual: f64 = e.iter().zip(&r).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    if residual < RESIDUAL_FLOOR {
        return Ok(SI_SNR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).min(SI_SNR_CAP_DB))
}

/// Plain SNR of `est` against `reference`: `10·log10(Σr² / Σ(r − e)²)`.
pub fn snr_db(reference: &Waveform, est: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Dimension(format!("lengths differ: {} vs {}", est.len(), reference.len())));
    }
    let signal: f64 = reference.samples.iter().map(|&v| (v as f64).powi(2)).sum();
    let err: f64 = reference.samples.iter().zip(&est.samples).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    if signal <= SILENCE {
        return Err(Error::Degenerate("reference has zero power".into()));
    }
    Ok(if err == 0.0 { f64::INFINITY } else { 10.0 * (signal / err).log10() })
}
