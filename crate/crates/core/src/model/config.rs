use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rhma::RhmaConfig;
use crate::signal::StftConfig;

/// Optional compression of the noisy magnitude before it enters the
/// network. The mask always multiplies the raw magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MagCompression {
    None,
    Sqrt,
}

impl FromStr for MagCompression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MagCompression::None),
            "sqrt" => Ok(MagCompression::Sqrt),
            other => Err(Error::Config(format!("unknown magnitude compression {other:?}"))),
        }
    }
}

impl fmt::Display for MagCompression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MagCompression::None => "none",
            MagCompression::Sqrt => "sqrt",
        })
    }
}

/// The five reduced architectures compared against the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// (i) plain concat, no attention blocks.
    NoMscffNoRhma,
    /// (ii) fusion only.
    NoRhma,
    /// (iii) plain concat, blocks without self-attention.
    NoMscffNoMhsa,
    /// (iv) plain concat, blocks without channel/time attention.
    NoMscffNoScta,
    /// (v) plain concat, full blocks.
    NoMscff,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::NoMscffNoRhma, Ablation::NoRhma, Ablation::NoMscffNoMhsa, Ablation::NoMscffNoScta, Ablation::NoMscff];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoMscffNoRhma => "(i) w/o MSCFF & RHMA",
            Ablation::NoRhma => "(ii) w/o RHMA",
            Ablation::NoMscffNoMhsa => "(iii) w/o MSCFF & MHSA",
            Ablation::NoMscffNoScta => "(iv) w/o MSCFF & SCTA",
            Ablation::NoMscff => "(v) w/o MSCFF",
        }
    }
}

/// Architecture, loss and optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding dimension `D`.
    pub d: usize,
    /// Embedding layer count `N`.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_rhma: usize,
    pub sca_ratio: usize,
    pub stft: StftConfig,
    pub use_mscff: bool,
    pub use_rhma: bool,
    pub use_mhsa: bool,
    pub use_scta: bool,
    pub mag_compression: MagCompression,
    pub lambda_mag: f64,
    pub lambda_sisnr: f64,
    pub lr: f64,
    pub final_lr_ratio: f64,
    pub warmup_steps: u64,
    pub steps: u64,
    pub batch: usize,
    /// Training crop length in seconds.
    pub crop_s: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn full() -> Self {
        ModelConfig {
            d: 768,
            n_layers: 13,
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_rhma: 2,
            sca_ratio: 8,
            stft: StftConfig::default(),
            use_mscff: true,
            use_rhma: true,
            use_mhsa: true,
            use_scta: true,
            mag_compression: MagCompression::None,
            lambda_mag: 1.0,
            lambda_sisnr: 1.0,
            lr: 1e-3,
            final_lr_ratio: 0.1,
            warmup_steps: 500,
            steps: 10_000,
            batch: 16,
            crop_s: 2.56,
            seed: 0,
        }
    }

    /// Small dimensions at the full STFT geometry.
    pub fn desk() -> Self {
        ModelConfig {
            d: 16,
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 64,
            n_rhma: 2,
            sca_ratio: 2,
            batch: 4,
            steps: 300,
            warmup_steps: 30,
            lr: 1e-2,
            ..ModelConfig::full()
        }
    }

    /// Smallest configuration: 9 frequency bins, 128 ms crops.
    pub fn tiny() -> Self {
        ModelConfig { stft: StftConfig { fft_len: 16, win_len: 16, hop: 8 }, crop_s: 0.128, ..ModelConfig::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(ModelConfig::tiny()),
            "desk" => Ok(ModelConfig::desk()),
            "full" => Ok(ModelConfig::full()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected tiny, desk or full"))),
        }
    }

    pub fn with_ablation(mut self, row: Ablation) -> Self {
        let (mscff, rhma, mhsa, scta) = match row {
            Ablation::NoMscffNoRhma => (false, false, true, true),
            Ablation::NoRhma => (true, false, true, true),
            Ablation::NoMscffNoMhsa => (false, true, false, true),
            Ablation::NoMscffNoScta => (false, true, true, false),
            Ablation::NoMscff => (false, true, true, true),
        };
        self.use_mscff = mscff;
        self.use_rhma = rhma;
        self.use_mhsa = mhsa;
        self.use_scta = scta;
        self
    }

    /// Frequency bins `F`.
    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }

    pub fn sample_rate(&self) -> u32 {
        crate::signal::SAMPLE_RATE
    }

    /// Crop length in samples, a whole number of hops.
    pub fn crop_len(&self) -> usize {
        let samples = (self.crop_s * self.sample_rate() as f64).round() as usize;
        (samples / self.stft.hop).max(1) * self.stft.hop
    }

    pub fn rhma(&self) -> RhmaConfig {
        RhmaConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            sca_ratio: self.sca_ratio,
            use_mhsa: self.use_mhsa,
            use_scta: self.use_scta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let positive = [
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("sca_ratio", self.sca_ratio),
            ("batch", self.batch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.use_rhma {
            if self.n_rhma == 0 {
                return Err(Error::Config("n_rhma must be positive when use_rhma is set".into()));
            }
            self.rhma().validate()?;
        } else if !self.use_mhsa || !self.use_scta {
            return Err(Error::Config("use_mhsa and use_scta only apply when use_rhma is set".into()));
        }
        if !(self.lambda_mag >= 0.0 && self.lambda_sisnr >= 0.0) || self.lambda_mag + self.lambda_sisnr == 0.0 {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::Config(format!("final_lr_ratio {} is outside [0, 1]", self.final_lr_ratio)));
        }
        if !(self.crop_s > 0.0 && self.crop_s.is_finite()) {
            return Err(Error::Config(format!("crop_s must be positive, got {}", self.crop_s)));
        }
        if self.crop_len() < self.stft.win_len {
            return Err(Error::Config("crop is shorter than one STFT window".into()));
        }
        Ok(())
    }

    /// Keys accepted by [`ModelConfig::set`], in serialization order.
    pub const KEYS: [&'static str; 25] = [
        "d",
        "n_layers",
        "d_model",
        "n_heads",
        "d_ff",
        "n_rhma",
        "sca_ratio",
        "fft_len",
        "win_len",
        "hop",
        "use_mscff",
        "use_rhma",
        "use_mhsa",
        "use_scta",
        "mag_compression",
        "lambda_mag",
        "lambda_sisnr",
        "lr",
        "final_lr_ratio",
        "warmup_steps",
        "steps",
        "batch",
        "crop_s",
        "seed",
        "preset",
    ];

    /// Set one field from its textual value. `preset` replaces every
    /// field with the named preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
            }
        }
        let v = value.trim();
        match key {
            "d" => self.d = num(key, v)?,
            "n_layers" => self.n_layers = num(key, v)?,
            "d_model" => self.d_model = num(key, v)?,
            "n_heads" => self.n_heads = num(key, v)?,
            "d_ff" => self.d_ff = num(key, v)?,
            "n_rhma" => self.n_rhma = num(key, v)?,
            "sca_ratio" => self.sca_ratio = num(key, v)?,
            "fft_len" => self.stft.fft_len = num(key, v)?,
            "win_len" => self.stft.win_len = num(key, v)?,
            "hop" => self.stft.hop = num(key, v)?,
            "use_mscff" => self.use_mscff = flag(key, v)?,
            "use_rhma" => self.use_rhma = flag(key, v)?,
            "use_mhsa" => self.use_mhsa = flag(key, v)?,
            "use_scta" => self.use_scta = flag(key, v)?,
            "mag_compression" => self.mag_compression = v.parse()?,
            "lambda_mag" => self.lambda_mag = num(key, v)?,
            "lambda_sisnr" => self.lambda_sisnr = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "final_lr_ratio" => self.final_lr_ratio = num(key, v)?,
            "warmup_steps" => self.warmup_steps = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "crop_s" => self.crop_s = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "preset" => *self = ModelConfig::preset(v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`; floats use shortest round-trip form.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d", self.d.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("n_rhma", self.n_rhma.to_string()),
            ("sca_ratio", self.sca_ratio.to_string()),
            ("fft_len", self.stft.fft_len.to_string()),
            ("win_len", self.stft.win_len.to_string()),
            ("hop", self.stft.hop.to_string()),
            ("use_mscff", self.use_mscff.to_string()),
            ("use_rhma", self.use_rhma.to_string()),
            ("use_mhsa", self.use_mhsa.to_string()),
            ("use_scta", self.use_scta.to_string()),
            ("mag_compression", self.mag_compression.to_string()),
            ("lambda_mag", self.lambda_mag.to_string()),
            ("lambda_sisnr", self.lambda_sisnr.to_string()),
            ("lr", self.lr.to_string()),
            ("final_lr_ratio", self.final_lr_ratio.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("crop_s", self.crop_s.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parse `key = value` text over the full preset, applying a `preset`
    /// line first wherever it appears.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_kv(text)?)
    }

    /// Apply `pairs` over the full preset; a `preset` key is applied first.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = ModelConfig::full();
        if let Some((_, p)) = pairs.iter().find(|(k, _)| k == "preset") {
            cfg = ModelConfig::preset(p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Parse UTF-8 `key = value` lines; `#` starts a comment. Duplicate keys
/// are rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
