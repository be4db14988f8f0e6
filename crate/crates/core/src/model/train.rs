use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{align_frames, EmbeddingStack};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Tape, Tensor, WarmupCosine};
use crate::signal::Waveform;

use super::loss::{example_loss, Example};
use super::net::Model;

/// A noisy/clean pair with embeddings computed on the whole noisy signal.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub noisy: Waveform,
    pub clean: Waveform,
    pub embeddings: EmbeddingStack,
}

#[derive(Clone, Debug)]
struct Prepared {
    noisy: Waveform,
    clean: Waveform,
    /// `[N × T_full × D]`, aligned to the STFT frames of the full signal.
    stack: Tensor,
}

/// Training set with embeddings already aligned to STFT frames.
#[derive(Clone, Debug)]
pub struct TrainData {
    items: Vec<Prepared>,
}

impl TrainData {
    pub fn new(model: &Model, utts: Vec<Utterance>) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let cfg = &model.config;
        let mut items = Vec::with_capacity(utts.len());
        for (i, u) in utts.into_iter().enumerate() {
            if u.noisy.len() != u.clean.len() {
                return Err(Error::Dimension(format!("utterance {i}: noisy and clean lengths differ")));
            }
            if u.noisy.len() < cfg.stft.win_len {
                return Err(Error::Contract(format!("utterance {i} is shorter than one STFT window")));
            }
            if u.embeddings.n_layers() != cfg.n_layers || u.embeddings.dim() != cfg.d {
                return Err(Error::Dimension(format!(
                    "utterance {i}: embeddings are {}×{}, model expects {}×{}",
                    u.embeddings.n_layers(),
                    u.embeddings.dim(),
                    cfg.n_layers,
                    cfg.d
                )));
            }
            let stack = align_frames(&u.embeddings, cfg.stft.n_frames(u.noisy.len()))?;
            items.push(Prepared { noisy: u.noisy, clean: u.clean, stack });
        }
        Ok(TrainData { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The whole of utterance `i` as an example.
    pub fn full_example(&self, model: &Model, i: usize) -> Result<Example> {
        let it = &self.items[i];
        Example::new(&model.config.stft, &it.noisy, &it.clean, it.stack.clone())
    }

    /// Crop utterance `i` to `crop_len` samples starting at hop index `k`.
    fn crop(&self, model: &Model, i: usize, k: usize, crop_len: usize) -> Result<Example> {
        let it = &self.items[i];
        let cfg = &model.config.stft;
        let start = k * cfg.hop;
        let noisy = it.noisy.slice(start, crop_len)?;
        let clean = it.clean.slice(start, crop_len)?;
        let t = cfg.n_frames(crop_len);
        let stack = slice_frames(&it.stack, k, t)?;
        Example::new(cfg, &noisy, &clean, stack)
    }
}

fn slice_frames(stack: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, t, d) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
    if start + len > t {
        return Err(Error::Dimension(format!("frames {start}..{} exceed {t}", start + len)));
    }
    let src = stack.data();
    let mut out = Vec::with_capacity(n * len * d);
    for l in 0..n {
        let base = (l * t + start) * d;
        out.extend_from_slice(&src[base..base + len * d]);
    }
    Tensor::new([n, len, d], out)
}

/// Derive an independent seed for `(a, b)` under `seed` (splitmix64 rounds).
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,loss,lr,grad_norm,wall_ms";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{:.3}", self.step, self.loss, self.lr, self.grad_norm, self.wall_ms)
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Format(format!("malformed log line {line:?}"));
        if cols.len() != 5 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(LogRow {
            step: cols[0].parse().map_err(|_| bad())?,
            loss: f(cols[1])?,
            lr: f(cols[2])?,
            grad_norm: f(cols[3])?,
            wall_ms: f(cols[4])?,
        })
    }
}

/// Zero gradients, then accumulate `(1/B)·∇loss_b` over `batch`. Returns the
/// mean loss.
pub fn accumulate_batch(model: &mut Model, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::new();
        let l = example_loss(&mut tape, model, ex)?;
        total += tape.scalar(l.total)?;
        let scaled = tape.scale(l.total, scale);
        tape.backward(scaled)?;
        tape.accumulate_param_grads(&mut model.store);
    }
    let mean = total * scale;
    if !mean.is_finite() {
        return Err(Error::Degenerate(format!("non-finite training loss {mean}")));
    }
    Ok(mean)
}

/// Model, optimizer state and the schedule that drives them.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model.store, model.config.lr);
        Trainer { model, adam }
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn schedule(&self) -> WarmupCosine {
        let c = &self.model.config;
        WarmupCosine { base_lr: c.lr, warmup_steps: c.warmup_steps, total_steps: c.steps, final_ratio: c.final_lr_ratio }
    }

    pub fn steps_per_epoch(&self, data: &TrainData) -> u64 {
        data.len().div_ceil(self.model.config.batch) as u64
    }

    /// Utterance indices and crop offsets (in hops) for global step `step`.
    pub fn batch_plan(&self, data: &TrainData, step: u64) -> Vec<(usize, usize)> {
        let cfg = &self.model.config;
        let per_epoch = self.steps_per_epoch(data);
        let (epoch, slot) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, u64::MAX)));
        let lo = slot * cfg.batch;
        let hi = (lo + cfg.batch).min(data.len());
        order[lo..hi]
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let len = data.items[i].noisy.len();
                let crop = cfg.crop_len().min(len);
                let max_k = (len - crop) / cfg.stft.hop;
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, step, pos as u64));
                (i, rng.random_range(0..=max_k))
            })
            .collect()
    }

    /// One optimizer step at the current step index.
    pub fn step(&mut self, data: &TrainData) -> Result<LogRow> {
        let started = Instant::now();
        let step = self.adam.step;
        let crop_len = self.model.config.crop_len();
        let batch = self
            .batch_plan(data, step)
            .into_iter()
            .map(|(i, k)| data.crop(&self.model, i, k, crop_len.min(data.items[i].noisy.len())))
            .collect::<Result<Vec<_>>>()?;
        let loss = accumulate_batch(&mut self.model, &batch)?;
        let grad_norm = self.model.store.grad_norm();
        let lr = self.schedule().lr_at(step);
        self.adam.lr = lr;
        adam_step(&mut self.model.store, &mut self.adam)?;
        Ok(LogRow { step, loss, lr, grad_norm, wall_ms: started.elapsed().as_secs_f64() * 1e3 })
    }

    /// Run until `step_count() == until`. `on_row` sees every log row;
    /// `on_epoch` runs after each completed epoch.
    pub fn run(
        &mut self,
        data: &TrainData,
        until: u64,
        mut on_row: impl FnMut(&LogRow) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer, u64) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        let per_epoch = self.steps_per_epoch(data);
        let mut rows = Vec::new();
        while self.adam.step < until {
            let row = self.step(data)?;
            on_row(&row)?;
            rows.push(row);
            if self.adam.step.is_multiple_of(per_epoch) {
                on_epoch(self, self.adam.step / per_epoch)?;
            }
        }
        Ok(rows)
    }
}
