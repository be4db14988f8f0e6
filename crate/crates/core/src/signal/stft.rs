use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::Waveform;

const MIN_ENVELOPE: f64 = 1e-8;

/// STFT framing. The window sits at the start of each `fft_len` frame and
/// is zero-padded when `win_len < fft_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub fft_len: usize,
    pub win_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { fft_len: 400, win_len: 400, hop: 160 }
    }
}

impl StftConfig {
    pub fn new(fft_len: usize, win_len: usize, hop: usize) -> Result<Self> {
        let cfg = StftConfig { fft_len, win_len, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win_len < 2 || self.win_len > self.fft_len || self.hop > self.win_len {
            return Err(Error::Config(format!(
                "invalid STFT geometry fft={} win={} hop={}: need 0 < hop <= win <= fft, win >= 2",
                self.fft_len, self.win_len, self.hop
            )));
        }
        Ok(())
    }

    /// `F = fft_len/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// `T = 1 + floor(len/hop)`.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Centre padding applied at each end.
    pub fn pad(&self) -> usize {
        self.win_len / 2
    }

    /// Periodic Hann window of `win_len` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_len as f64;
        (0..self.win_len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }

    /// Length of the overlap-add buffer for `frames` frames.
    fn ola_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.win_len
    }

    /// `Σ_t w²[n − t·hop]` over the overlap-add buffer.
    fn envelope(&self, frames: usize) -> Vec<f64> {
        let w = self.window();
        let mut env = vec![0.0; self.ola_len(frames)];
        for t in 0..frames {
            for (n, wn) in w.iter().enumerate() {
                env[t * self.hop + n] += wn * wn;
            }
        }
        env
    }

    /// Envelope over the output samples `[pad, pad + orig_len)`, rejecting
    /// any sample the frames do not cover.
    fn valid_envelope(&self, frames: usize, orig_len: usize) -> Result<Vec<f64>> {
        if frames == 0 {
            return Err(Error::Dimension("spectrum has no frames".into()));
        }
        let env = self.envelope(frames);
        let pad = self.pad();
        (pad..pad + orig_len)
            .map(|i| match env.get(i) {
                Some(&e) if e >= MIN_ENVELOPE => Ok(e),
                e => Err(Error::Reconstruction(format!(
                    "window envelope {} at output sample {} is below {MIN_ENVELOPE}",
                    e.copied().unwrap_or(0.0),
                    i - pad
                ))),
            })
            .collect()
    }
}

/// Real and imaginary parts, each `[F × T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexSpectrum {
    pub fn n_bins(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn scaled(&self, a: f32) -> ComplexSpectrum {
        let scale = |t: &Tensor| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * a).collect()).expect("same shape")
        };
        ComplexSpectrum { re: scale(&self.re), im: scale(&self.im) }
    }
}

/// Magnitude `[F × T]` and unit phase `[F × T × 2]` of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroStack {
    pub mag: Tensor,
    /// `(cos, sin)` per bin; `(1, 0)` where the magnitude is zero.
    pub phase: Tensor,
    pub config: StftConfig,
    pub orig_len: usize,
}

impl SpectroStack {
    pub fn n_bins(&self) -> usize {
        self.mag.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.mag.shape()[1]
    }
}

/// Index into `[0, len)` after mirror reflection without edge repeat.
fn reflect(j: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = j.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Raw complex STFT with centre reflect padding.
pub fn stft_complex(x: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrum> {
    cfg.validate()?;
    let len = x.len();
    if len == 0 {
        return Err(Error::Dimension("cannot analyse an empty waveform".into()));
    }
    let (f, t_frames) = (cfg.n_bins(), cfg.n_frames(len));
    let w = cfg.window();
    let pad = cfg.pad() as isize;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];
    let mut re = vec![0f32; f * t_frames];
    let mut im = vec![0f32; f * t_frames];
    for t in 0..t_frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let start = (t * cfg.hop) as isize - pad;
        for (n, wn) in w.iter().enumerate() {
            let s = x.samples[reflect(start + n as isize, len)] as f64;
            buf[n] = Complex::new(s * wn, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..f {
            re[k * t_frames + t] = buf[k].re as f32;
            im[k * t_frames + t] = buf[k].im as f32;
        }
    }
    Ok(ComplexSpectrum { re: Tensor::new([f, t_frames], re)?, im: Tensor::new([f, t_frames], im)? })
}

/// Magnitude/phase STFT.
pub fn stft(x: &Waveform, cfg: &StftConfig) -> Result<SpectroStack> {
    let spec = stft_complex(x, cfg)?;
    let (f, t) = (spec.n_bins(), spec.n_frames());
    let mut mag = Vec::with_capacity(f * t);
    let mut phase = Vec::with_capacity(f * t * 2);
    for (&r, &i) in spec.re.data().iter().zip(spec.im.data()) {
        let (r, i) = (r as f64, i as f64);
        let m = r.hypot(i);
        mag.push(m as f32);
        if m > 0.0 {
            phase.push((r / m) as f32);
            phase.push((i / m) as f32);
        } else {
            phase.extend([1.0, 0.0]);
        }
    }
    Ok(SpectroStack {
        mag: Tensor::new([f, t], mag)?,
        phase: Tensor::new([f, t, 2], phase)?,
        config: *cfg,
        orig_len: x.len(),
    })
}

/// `Re = mag·cos`, `Im = mag·sin`.
pub fn reconstruct(mag: &Tensor, phase: &Tensor) -> Result<ComplexSpectrum> {
    let s = mag.shape();
    if s.len() != 2 || phase.shape() != [s[0], s[1], 2] {
        return Err(Error::Dimension(format!("mag {:?} does not match phase {:?}", s, phase.shape())));
    }
    if let Some(i) = mag.data().iter().position(|&m| m < 0.0 || m.is_nan()) {
        return Err(Error::Contract(format!("magnitude {} at index {i} is negative", mag.data()[i])));
    }
    let p = phase.data();
    let re = mag.data().iter().enumerate().map(|(i, &m)| m * p[2 * i]).collect();
    let im = mag.data().iter().enumerate().map(|(i, &m)| m * p[2 * i + 1]).collect();
    Ok(ComplexSpectrum { re: Tensor::new(s.to_vec(), re)?, im: Tensor::new(s.to_vec(), im)? })
}

/// WOLA inverse STFT trimmed to `orig_len`. The imaginary parts of the DC
/// and Nyquist bins are ignored.
pub fn istft(spec: &ComplexSpectrum, cfg: &StftConfig, orig_len: usize) -> Result<Waveform> {
    cfg.validate()?;
    let (f, t_frames) = (spec.n_bins(), spec.n_frames());
    if spec.re.shape().len() != 2 || spec.im.shape() != spec.re.shape() || f != cfg.n_bins() {
        return Err(Error::Dimension(format!(
            "spectrum {:?}/{:?} does not match {} bins",
            spec.re.shape(),
            spec.im.shape(),
            cfg.n_bins()
        )));
    }
    let env = cfg.valid_envelope(t_frames, orig_len)?;
    let n = cfg.fft_len;
    let w = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut ola = vec![0.0f64; cfg.ola_len(t_frames)];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let (re, im) = (spec.re.data(), spec.im.data());
    for t in 0..t_frames {
        for k in 0..f {
            let edge = k == 0 || 2 * k == n;
            let c = Complex::new(re[k * t_frames + t] as f64, if edge { 0.0 } else { im[k * t_frames + t] as f64 });
            buf[k] = c;
            if k > 0 && n - k >= f {
                buf[n - k] = c.conj();
            }
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for (i, wi) in w.iter().enumerate() {
            ola[start + i] += buf[i].re / n as f64 * wi;
        }
    }
    let pad = cfg.pad();
    let samples = env.iter().enumerate().map(|(i, e)| (ola[pad + i] / e) as f32).collect();
    Waveform::new(samples, super::SAMPLE_RATE)
}

/// The inverse STFT as constant matrices, for use on the autodiff tape.
#[derive(Clone, Debug)]
pub struct IstftBasis {
    cfg: StftConfig,
    n_frames: usize,
    orig_len: usize,
    /// `[win × F]`, window and inverse-DFT weights folded in.
    cos_basis: Vec<f64>,
    sin_basis: Vec<f64>,
    inv_env: Vec<f64>,
}

impl IstftBasis {
    pub fn new(cfg: &StftConfig, n_frames: usize, orig_len: usize) -> Result<Self> {
        cfg.validate()?;
        let inv_env = cfg.valid_envelope(n_frames, orig_len)?.into_iter().map(|e| 1.0 / e).collect();
        let (n, f, win) = (cfg.fft_len, cfg.n_bins(), cfg.win_len);
        let w = cfg.window();
        let mut cos_basis = vec![0.0; win * f];
        let mut sin_basis = vec![0.0; win * f];
        for (i, wi) in w.iter().enumerate() {
            for k in 0..f {
                let edge = k == 0 || 2 * k == n;
                let weight = if edge { 1.0 } else { 2.0 } * wi / n as f64;
                let theta = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
                cos_basis[i * f + k] = weight * theta.cos();
                sin_basis[i * f + k] = if edge { 0.0 } else { -weight * theta.sin() };
            }
        }
        Ok(IstftBasis { cfg: *cfg, n_frames, orig_len, cos_basis, sin_basis, inv_env })
    }

    /// Waveform `[orig_len]` from `re`, `im` nodes of shape `[F × T]`.
    pub fn apply(&self, tape: &mut Tape, re: Var, im: Var) -> Result<Var> {
        let (f, win) = (self.cfg.n_bins(), self.cfg.win_len);
        let want = [f, self.n_frames];
        if tape.shape(re) != want || tape.shape(im) != want {
            return Err(Error::Dimension(format!(
                "inverse STFT expects {want:?}, got {:?} and {:?}",
                tape.shape(re),
                tape.shape(im)
            )));
        }
        let cb = tape.constant_f64([win, f], self.cos_basis.clone())?;
        let sb = tape.constant_f64([win, f], self.sin_basis.clone())?;
        let a = tape.matmul(cb, re)?;
        let b = tape.matmul(sb, im)?;
        let frames = tape.add(a, b)?;
        let frames = tape.transpose(frames)?;
        let ola = tape.overlap_add(frames, self.cfg.hop, self.cfg.ola_len(self.n_frames))?;
        let valid = tape.narrow(ola, 0, self.cfg.pad(), self.orig_len)?;
        let inv = tape.constant_f64([self.orig_len], self.inv_env.clone())?;
        tape.mul(valid, inv)
    }
}
