use std::f64::consts::LN_10;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::signal::{stft, IstftBasis, SpectroStack, StftConfig, Waveform};

use super::net::Model;

/// Stabilizer inside the differentiable SI-SNR.
pub const SI_SNR_SOFT_EPS: f64 = 1e-8;

/// One training or evaluation item with everything precomputed except the
/// network pass.
#[derive(Clone, Debug)]
pub struct Example {
    pub noisy: SpectroStack,
    /// `cos` and `sin` of the noisy phase, each `[F × T]`.
    pub phase_cos: Tensor,
    pub phase_sin: Tensor,
    pub clean_mag: Tensor,
    pub clean: Waveform,
    /// Frame-aligned `[N × T × D]` embeddings.
    pub stack: Tensor,
}

impl Example {
    pub fn new(cfg: &StftConfig, noisy: &Waveform, clean: &Waveform, stack: Tensor) -> Result<Self> {
        if noisy.len() != clean.len() {
            return Err(Error::Dimension(format!("noisy has {} samples, clean {}", noisy.len(), clean.len())));
        }
        let noisy_spec = stft(noisy, cfg)?;
        let clean_mag = stft(clean, cfg)?.mag;
        let (f, t) = (noisy_spec.n_bins(), noisy_spec.n_frames());
        let p = noisy_spec.phase.data();
        let phase_cos = Tensor::new([f, t], p.iter().step_by(2).copied().collect())?;
        let phase_sin = Tensor::new([f, t], p.iter().skip(1).step_by(2).copied().collect())?;
        if stack.shape().len() != 3 || stack.shape()[1] != t {
            return Err(Error::Dimension(format!("embedding stack {:?} is not aligned to {t} frames", stack.shape())));
        }
        Ok(Example { noisy: noisy_spec, phase_cos, phase_sin, clean_mag, clean: clean.clone(), stack })
    }
}

/// Loss nodes for one item.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mag_l1: Var,
    /// Differentiable SI-SNR in dB.
    pub si_snr: Var,
}

fn zero_mean(tape: &mut Tape, x: Var) -> Var {
    let m = tape.mean(x);
    tape.sub(x, m).expect("scalar broadcasts")
}

fn dot(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    Ok(tape.sum(p))
}

/// Uncapped SI-SNR in dB with `ε` added to the projection denominator and
/// to both energies.
pub fn si_snr_soft(tape: &mut Tape, est: Var, reference: Var) -> Result<Var> {
    if tape.shape(est) != tape.shape(reference) {
        return Err(Error::Dimension(format!(
            "SI-SNR operands differ: {:?} vs {:?}",
            tape.shape(est),
            tape.shape(reference)
        )));
    }
    let e = zero_mean(tape, est);
    let r = zero_mean(tape, reference);
    let er = dot(tape, e, r)?;
    let rr = dot(tape, r, r)?;
    let rr = tape.add_scalar(rr, SI_SNR_SOFT_EPS);
    let alpha = tape.div(er, rr)?;
    let target = tape.mul(r, alpha)?;
    let residual = tape.sub(e, target)?;
    let ts = dot(tape, target, target)?;
    let ts = tape.add_scalar(ts, SI_SNR_SOFT_EPS);
    let rs = dot(tape, residual, residual)?;
    let rs = tape.add_scalar(rs, SI_SNR_SOFT_EPS);
    let ratio = tape.div(ts, rs)?;
    let l = tape.ln(ratio)?;
    Ok(tape.scale(l, 10.0 / LN_10))
}

/// `λ_mag · mean|enh − clean| + λ_sisnr · (−si_snr_soft / 10)`.
pub fn loss(
    tape: &mut Tape,
    enhanced_mag: Var,
    clean_mag: Var,
    enhanced_wav: Var,
    clean_wav: Var,
    lambda_mag: f64,
    lambda_sisnr: f64,
) -> Result<LossVars> {
    if tape.shape(enhanced_mag) != tape.shape(clean_mag) {
        return Err(Error::Dimension("enhanced and clean magnitudes differ in shape".into()));
    }
    let diff = tape.sub(enhanced_mag, clean_mag)?;
    let diff = tape.abs(diff);
    let mag_l1 = tape.mean(diff);
    let si = si_snr_soft(tape, enhanced_wav, clean_wav)?;
    let a = tape.scale(mag_l1, lambda_mag);
    let b = tape.scale(si, -lambda_sisnr / 10.0);
    let total = tape.add(a, b)?;
    Ok(LossVars { total, mag_l1, si_snr: si })
}

/// Forward one example, resynthesize with the noisy phase and score it.
pub fn example_loss(tape: &mut Tape, model: &Model, ex: &Example) -> Result<LossVars> {
    let out = model.forward_on(tape, &ex.noisy.mag, &ex.stack)?;
    let cos = tape.constant(&ex.phase_cos);
    let sin = tape.constant(&ex.phase_sin);
    let re = tape.mul(out.enhanced, cos)?;
    let im = tape.mul(out.enhanced, sin)?;
    let basis = IstftBasis::new(&model.config.stft, ex.noisy.n_frames(), ex.noisy.orig_len)?;
    let wav = basis.apply(tape, re, im)?;
    let clean_mag = tape.constant(&ex.clean_mag);
    let clean = tape.constant(&Tensor::new([ex.clean.len()], ex.clean.samples.clone())?);
    loss(tape, out.enhanced, clean_mag, wav, clean, model.config.lambda_mag, model.config.lambda_sisnr)
}
