//! Layered self-supervised features: the SSLE file format, a deterministic
//! synthetic provider, alignment to the STFT frame rate, and the learnable
//! softmax-weighted layer sum.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::signal::Waveform;

const MAGIC: &[u8; 4] = b"SSLE";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const N_BANDS: usize = 40;

/// `N` layers of `T_ssl × D` features for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStack {
    /// `[N × T_ssl × D]`.
    pub layers: Tensor,
    pub frame_hop_s: f64,
}

impl EmbeddingStack {
    pub fn new(layers: Tensor, frame_hop_s: f64) -> Result<Self> {
        if layers.shape().len() != 3 {
            return Err(Error::Dimension(format!("embedding stack must be N×T×D, got {:?}", layers.shape())));
        }
        if !layers.is_finite() {
            return Err(Error::Format("embedding stack has non-finite values".into()));
        }
        Ok(EmbeddingStack { layers, frame_hop_s })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.layers.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.layers.shape()[2]
    }
}

/// Serialize to SSLE bytes.
pub fn encode_ssle(stack: &EmbeddingStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + stack.layers.numel() * 4);
    out.extend_from_slice(MAGIC);
    let hop_us = (stack.frame_hop_s * 1e6).round() as u32;
    for v in [VERSION, stack.n_layers() as u32, stack.n_frames() as u32, stack.dim() as u32, hop_us] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in stack.layers.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse SSLE bytes.
pub fn decode_ssle(bytes: &[u8]) -> Result<EmbeddingStack> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing SSLE magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("SSLE header needs {HEADER_LEN} bytes, have {}", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != VERSION {
        return Err(Error::Version { expected: VERSION, found: word(0) });
    }
    let (n, t, d, hop_us) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
    if n == 0 || t == 0 || d == 0 {
        return Err(Error::Format(format!("SSLE dims N={n} T={t} D={d} must be positive")));
    }
    let count = n
        .checked_mul(t)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format("SSLE dims overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count * 4 {
        return Err(Error::Truncated(format!("SSLE payload has {} bytes, needs {}", payload.len(), count * 4)));
    }
    let data = payload[..count * 4].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    EmbeddingStack::new(Tensor::new([n, t, d], data)?, hop_us as f64 * 1e-6)
}

pub fn provider_load(path: impl AsRef<Path>) -> Result<EmbeddingStack> {
    decode_ssle(&fs::read(path)?)
}

pub fn provider_save(path: impl AsRef<Path>, stack: &EmbeddingStack) -> Result<()> {
    fs::write(path, encode_ssle(stack))?;
    Ok(())
}

/// Deterministic stand-in for a pretrained backbone: 25 ms / 20 ms frames,
/// log energies in 40 uniform bands, then one seeded random projection to
/// `dim` per layer.
pub fn provider_synthetic(x: &Waveform, n_layers: usize, dim: usize, seed: u64) -> Result<EmbeddingStack> {
    if n_layers == 0 || dim == 0 {
        return Err(Error::Contract(format!("need n_layers >= 1 and dim >= 1, got {n_layers} and {dim}")));
    }
    let sr = x.sample_rate as f64;
    let win = (0.025 * sr).round() as usize;
    let hop = (0.020 * sr).round() as usize;
    if x.len() < win || win < 2 * N_BANDS {
        return Err(Error::Contract(format!("waveform of {} samples is shorter than one {win}-sample frame", x.len())));
    }
    let frames = 1 + (x.len() - win) / hop;
    let bins = win / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut features = vec![0.0f64; frames * N_BANDS];
    for t in 0..frames {
        for (n, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(x.samples[t * hop + n] as f64, 0.0);
        }
        fft.process(&mut buf);
        for b in 0..N_BANDS {
            let (lo, hi) = (b * bins / N_BANDS, (b + 1) * bins / N_BANDS);
            let energy = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>() / (hi - lo) as f64;
            features[t * N_BANDS + b] = (energy + 1e-10).log10();
        }
    }
    let scale = 1.0 / (N_BANDS as f64).sqrt();
    let mut out = vec![0f32; n_layers * frames * dim];
    for layer in 0..n_layers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(layer as u64 + 1);
        let w: Vec<f64> = (0..N_BANDS * dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        for t in 0..frames {
            let f = &features[t * N_BANDS..(t + 1) * N_BANDS];
            for j in 0..dim {
                let z: f64 = f.iter().enumerate().map(|(b, v)| v * w[b * dim + j]).sum();
                out[(layer * frames + t) * dim + j] = z as f32;
            }
        }
    }
    EmbeddingStack::new(Tensor::new([n_layers, frames, dim], out)?, hop as f64 / sr)
}

/// Source frame for target frame `t`: `round(t·(Ts−1)/(Tf−1))`, halves up.
pub fn align_index(t: usize, t_ssl: usize, t_stft: usize) -> usize {
    if t_stft <= 1 {
        return 0;
    }
    let den = t_stft - 1;
    (2 * t * (t_ssl - 1) + den) / (2 * den)
}

/// Nearest-neighbour resampling of `stack` to `t_stft` frames:
/// `[N × T_stft × D]`.
pub fn align_frames(stack: &EmbeddingStack, t_stft: usize) -> Result<Tensor> {
    let (n, ts, d) = (stack.n_layers(), stack.n_frames(), stack.dim());
    if n == 0 || ts == 0 || d == 0 {
        return Err(Error::Dimension("empty embedding stack".into()));
    }
    if t_stft == 0 {
        return Err(Error::Dimension("target frame count must be positive".into()));
    }
    let src = stack.layers.data();
    let mut out = Vec::with_capacity(n * t_stft * d);
    for layer in 0..n {
        for t in 0..t_stft {
            let s = align_index(t, ts, t_stft);
            let start = (layer * ts + s) * d;
            out.extend_from_slice(&src[start..start + d]);
        }
    }
    Tensor::new([n, t_stft, d], out)
}

/// Learnable layer weights `e = softmax(logits)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightedSumParams {
    pub logits: ParamId,
}

impl WeightedSumParams {
    /// Register zero-initialized logits (uniform weights) under `name`.
    pub fn new(store: &mut ParamStore, name: &str, n_layers: usize) -> Result<Self> {
        Ok(WeightedSumParams { logits: store.insert(name, Tensor::zeros([n_layers])?)? })
    }

    pub fn n_layers(&self, store: &ParamStore) -> usize {
        store.get(self.logits).numel()
    }

    /// Current layer weights.
    pub fn weights(&self, store: &ParamStore) -> Vec<f64> {
        let logits = store.get(self.logits).data();
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// `Σ_i e(i)·z(i)` for `stack` (`[N × T × D]`), returned as `[D × T]`.
pub fn weighted_sum(tape: &mut Tape, store: &ParamStore, params: &WeightedSumParams, stack: Var) -> Result<Var> {
    let s = tape.shape(stack).to_vec();
    let n = params.n_layers(store);
    if s.len() != 3 || s[0] != n {
        return Err(Error::Dimension(format!("weighted sum over {n} layers got a stack of shape {s:?}")));
    }
    let (t, d) = (s[1], s[2]);
    let logits = tape.param(store, params.logits);
    let e = tape.softmax(logits, 0)?;
    let e = tape.reshape(e, [1, n])?;
    let flat = tape.reshape(stack, [n, t * d])?;
    let mixed = tape.matmul(e, flat)?;
    let mixed = tape.reshape(mixed, [t, d])?;
    tape.transpose(mixed)
}
