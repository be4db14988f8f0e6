//! Deterministic synthetic speech-like signals and noises.
//!
//! Clean signals are voiced segments (harmonic stacks on a gliding
//! fundamental) interleaved with band-limited noise bursts and short gaps,
//! so spectral masks have structure to learn.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Waveform, SAMPLE_RATE};

const FS: f64 = SAMPLE_RATE as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    Hum,
    Bandpass,
    Lowpass,
    Highpass,
    Clicks,
    Tonal,
    Modulated,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 10] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::Brown,
        NoiseKind::Hum,
        NoiseKind::Bandpass,
        NoiseKind::Lowpass,
        NoiseKind::Highpass,
        NoiseKind::Clicks,
        NoiseKind::Tonal,
        NoiseKind::Modulated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Brown => "brown",
            NoiseKind::Hum => "hum",
            NoiseKind::Bandpass => "bandpass",
            NoiseKind::Lowpass => "lowpass",
            NoiseKind::Highpass => "highpass",
            NoiseKind::Clicks => "clicks",
            NoiseKind::Tonal => "tonal",
            NoiseKind::Modulated => "modulated",
        }
    }
}

/// RBJ biquad, direct form I.
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl Biquad {
    fn new(b: [f64; 3], a: [f64; 3]) -> Self {
        Biquad { b: b.map(|v| v / a[0]), a: [a[1] / a[0], a[2] / a[0]], x: [0.0; 2], y: [0.0; 2] }
    }

    fn bandpass(fc: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / FS;
        let alpha = w0.sin() / (2.0 * q);
        Biquad::new([alpha, 0.0, -alpha], [1.0 + alpha, -2.0 * w0.cos(), 1.0 - alpha])
    }

    fn lowpass(fc: f64) -> Self {
        let w0 = 2.0 * PI * fc / FS;
        let (c, alpha) = (w0.cos(), w0.sin() / 2f64.sqrt());
        Biquad::new([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    fn highpass(fc: f64) -> Self {
        let w0 = 2.0 * PI * fc / FS;
        let (c, alpha) = (w0.cos(), w0.sin() / 2f64.sqrt());
        Biquad::new([(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    fn run(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1] - self.a[0] * self.y[0] - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn hann_env(i: usize, n: usize) -> f64 {
    (PI * (i as f64 + 0.5) / n as f64).sin().powi(2)
}

fn to_waveform(mut x: Vec<f64>, peak: f64) -> Waveform {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    Waveform::new(x.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE).expect("finite by construction")
}

/// A speech-like clean signal of `len` samples, peak 0.5.
pub fn clean_utterance(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; len];
    let mut pos = 0usize;
    while pos < len {
        if rng.random_bool(0.75) {
            let dur = (rng.random_range(0.12..0.30) * FS) as usize;
            let f_start: f64 = rng.random_range(100.0..240.0);
            let f_end = f_start * rng.random_range(0.8..1.2);
            let formant: f64 = rng.random_range(400.0..2500.0);
            let n_harm = ((3800.0 / f_start.max(f_end)) as usize).clamp(1, 16);
            let mut amps = Vec::with_capacity(n_harm);
            for h in 1..=n_harm {
                let fh = h as f64 * f_start;
                let bump = (-((fh - formant) / 600.0).powi(2)).exp();
                amps.push((1.0 / h as f64 + 1.5 * bump) * rng.random_range(0.7..1.0));
            }
            let mut phase = 0.0f64;
            for i in 0..dur.min(len - pos) {
                let f0 = f_start + (f_end - f_start) * i as f64 / dur as f64;
                phase += 2.0 * PI * f0 / FS;
                let s: f64 = amps.iter().enumerate().map(|(h, a)| a * ((h + 1) as f64 * phase).sin()).sum();
                out[pos + i] += hann_env(i, dur) * s;
            }
            pos += dur;
        } else {
            let dur = (rng.random_range(0.05..0.12) * FS) as usize;
            let mut bp = Biquad::bandpass(rng.random_range(2000.0..6000.0), 2.0);
            let amp = rng.random_range(0.8..1.6);
            for i in 0..dur.min(len - pos) {
                out[pos + i] += amp * hann_env(i, dur) * bp.run(gauss(&mut rng));
            }
            pos += dur;
        }
        pos += (rng.random_range(0.03..0.10) * FS) as usize;
    }
    to_waveform(out, 0.5)
}

/// Noise of the given kind, `len` samples, peak 0.5.
pub fn noise(kind: NoiseKind, len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..len).map(|_| gauss(&mut rng)).collect();
    let x: Vec<f64> = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            // Paul Kellet's economy pinking filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Brown => {
            let mut acc = 0.0;
            white
                .iter()
                .map(|&w| {
                    acc = 0.995 * acc + w;
                    acc
                })
                .collect()
        }
        NoiseKind::Hum => {
            let base: f64 = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
            let phases: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (0..len)
                .map(|i| {
                    let t = i as f64 / FS;
                    let tones: f64 = phases.iter().enumerate().map(|(h, p)| ((2.0 * PI * base * (h + 1) as f64 * t) + p).sin() / (h + 1) as f64).sum();
                    tones + 0.05 * white[i]
                })
                .collect()
        }
        NoiseKind::Bandpass => {
            let mut f = Biquad::bandpass(rng.random_range(300.0..3000.0), rng.random_range(1.0..4.0));
            white.iter().map(|&w| f.run(w)).collect()
        }
        NoiseKind::Lowpass => {
            let mut f = Biquad::lowpass(rng.random_range(200.0..1000.0));
            white.iter().map(|&w| f.run(w)).collect()
        }
        NoiseKind::Highpass => {
            let mut f = Biquad::highpass(rng.random_range(2000.0..5000.0));
            white.iter().map(|&w| f.run(w)).collect()
        }
        NoiseKind::Clicks => {
            let mut decay = 0.0f64;
            white
                .iter()
                .map(|&w| {
                    if rng.random_bool(0.002) {
                        decay = rng.random_range(0.5..1.0);
                    }
                    decay *= 0.995;
                    decay * w + 0.02 * w
                })
                .collect()
        }
        NoiseKind::Tonal => {
            let tones: Vec<(f64, f64)> = (0..5).map(|_| (rng.random_range(150.0..6000.0), rng.random_range(0.0..2.0 * PI))).collect();
            (0..len)
                .map(|i| {
                    let t = i as f64 / FS;
                    tones.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() + 0.05 * white[i]
                })
                .collect()
        }
        NoiseKind::Modulated => {
            let rate: f64 = rng.random_range(2.0..8.0);
            (0..len)
                .map(|i| {
                    let t = i as f64 / FS;
                    (0.6 + 0.4 * (2.0 * PI * rate * t).sin()) * white[i]
                })
                .collect()
        }
    };
    to_waveform(x, 0.5)
}
