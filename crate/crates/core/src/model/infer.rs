use crate::embeddings::{align_frames, EmbeddingStack};
use crate::error::{Error, Result};
use crate::signal::{istft, reconstruct, stft, Waveform};

use super::net::Model;

/// Enhanced waveform and the mask that produced it.
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub wav: Waveform,
    /// `[F × T]`.
    pub mask: crate::numerics::Tensor,
}

/// Mask the noisy magnitude, keep the noisy phase, resynthesize at the input
/// length.
pub fn enhance(model: &Model, noisy: &Waveform, embeddings: &EmbeddingStack) -> Result<Enhanced> {
    let cfg = &model.config;
    if noisy.len() < cfg.stft.win_len {
        return Err(Error::Contract(format!(
            "input has {} samples, shorter than one {}-sample window",
            noisy.len(),
            cfg.stft.win_len
        )));
    }
    if noisy.sample_rate != cfg.sample_rate() {
        return Err(Error::Contract(format!("expected {} Hz input, got {}", cfg.sample_rate(), noisy.sample_rate)));
    }
    if embeddings.n_layers() != cfg.n_layers || embeddings.dim() != cfg.d {
        return Err(Error::Dimension(format!(
            "embeddings are {}×{}, model expects {}×{}",
            embeddings.n_layers(),
            embeddings.dim(),
            cfg.n_layers,
            cfg.d
        )));
    }
    let spec = stft(noisy, &cfg.stft)?;
    let stack = align_frames(embeddings, spec.n_frames())?;
    let (mask, enhanced) = model.forward(&spec.mag, &stack)?;
    let wav = istft(&reconstruct(&enhanced, &spec.phase)?, &cfg.stft, noisy.len())?;
    Ok(Enhanced { wav, mask })
}
