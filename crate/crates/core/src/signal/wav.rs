//! Minimal RIFF/WAVE reader and writer: mono, PCM16 or IEEE float32 in,
//! PCM16 out.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Waveform, SAMPLE_RATE};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Read a mono WAV file at the pipeline rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    decode_wav(&fs::read(path)?, Some(SAMPLE_RATE))
}

/// Write PCM16: samples are rounded to nearest and clipped to
/// `[-1, 1 - 1/32768]`.
pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    fs::write(path, encode_wav(wav))?;
    Ok(())
}

struct Format {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

/// Decode WAV bytes; `expected_rate` rejects any other sample rate.
pub fn decode_wav(bytes: &[u8], expected_rate: Option<u32>) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE magic".into()));
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = body_end.ok_or_else(|| Error::Truncated("fmt chunk".into()))?;
                let body = &bytes[body_start..end];
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk shorter than 16 bytes".into()));
                }
                let u16_at = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
                let mut tag = u16_at(0);
                if tag == FORMAT_EXTENSIBLE && body.len() >= 26 {
                    // first two bytes of the sub-format GUID carry the codec
                    tag = u16_at(24);
                }
                format = Some(Format {
                    tag,
                    channels: u16_at(2),
                    rate: u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")),
                    bits: u16_at(14),
                });
            }
            b"data" => {
                let end = body_end.ok_or_else(|| Error::Truncated("data chunk".into()))?;
                data = Some(&bytes[body_start..end]);
            }
            _ => {}
        }
        let Some(end) = body_end else { break };
        pos = end + (size & 1);
    }

    let fmt = format.ok_or_else(|| Error::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("no data chunk".into()))?;
    if fmt.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{} channels; only mono is supported", fmt.channels)));
    }
    if let Some(rate) = expected_rate {
        if fmt.rate != rate {
            return Err(Error::UnsupportedFormat(format!("sample rate {} Hz; expected {rate} Hz", fmt.rate)));
        }
    }
    let samples: Vec<f32> = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        (tag, bits) => {
            return Err(Error::UnsupportedFormat(format!("codec {tag} at {bits} bits; need PCM16 or float32")))
        }
    };
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Format("non-finite float samples".into()));
    }
    Waveform::new(samples, fmt.rate)
}

/// Encode as a canonical 44-byte-header PCM16 mono file.
pub fn encode_wav(wav: &Waveform) -> Vec<u8> {
    let n = wav.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wav.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wav.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wav.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

fn quantize(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
