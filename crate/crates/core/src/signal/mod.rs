//! Audio I/O, STFT analysis and WOLA synthesis, SNR mixing and SI-SNR.

mod metrics;
mod stft;
pub mod synth;
mod wav;

pub use metrics::{mix_at_snr, si_snr, snr_db, Mix, SI_SNR_CAP_DB};
pub use stft::{istft, reconstruct, stft, stft_complex, ComplexSpectrum, IstftBasis, SpectroStack, StftConfig};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use crate::error::{Error, Result};

/// The only rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with finite samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Contract(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate })
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

    /// Samples `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Waveform> {
        let end = start.checked_add(len).filter(|&e| e <= self.len()).ok_or_else(|| {
            Error::Dimension(format!("slice [{start}, +{len}) of a {}-sample waveform", self.len()))
        })?;
        Ok(Waveform { samples: self.samples[start..end].to_vec(), sample_rate: self.sample_rate })
    }
}
