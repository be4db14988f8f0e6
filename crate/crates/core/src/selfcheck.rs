//! Finite-difference gradient checks for every tape primitive, the fusion
//! and attention modules, and the full training loss.
//!
//! Each check reads its output through a random readout `sum(y ⊙ R)` so that
//! every output element carries a distinct weight. Checks run over several
//! seeds; the report keeps the worst error per check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::MscffParams;
use crate::model::{example_loss, Example, Model, ModelConfig};
use crate::numerics::{GradCheck, GradCheckReport, OpKind, ParamStore, PoolMode, Tape, Tensor, Var};
use crate::rhma::{rhma_forward, RhmaParams};
use crate::signal::synth;

pub const PRIMITIVE_THRESHOLD: f64 = 1e-3;
pub const MODULE_THRESHOLD: f64 = 1e-3;
pub const PIPELINE_THRESHOLD: f64 = 1e-2;
pub const DEFAULT_EPS: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckGroup {
    Primitive,
    Module,
    Pipeline,
}

/// Worst result of one named check across all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub group: CheckGroup,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink.
    pub skipped: usize,
    /// Tensor and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// Settings shared by every check.
#[derive(Clone, Debug)]
pub struct SelfCheck {
    pub seeds: Vec<u64>,
    pub eps: f32,
    pub fault: Option<OpKind>,
    /// Coordinates sampled per parameter tensor in module and pipeline checks.
    pub max_coords: Option<usize>,
    /// Frames used by module checks.
    pub frames: usize,
}

impl Default for SelfCheck {
    fn default() -> Self {
        SelfCheck { seeds: (0..10).collect(), eps: DEFAULT_EPS, fault: None, max_coords: Some(6), frames: 7 }
    }
}

#[derive(Clone, Copy)]
enum Domain {
    /// Uniform in `[-2, 2]` with `|x| ≥ 0.05`, away from kinks at zero.
    Signed,
    /// Uniform in `[0.5, 2]`.
    Positive,
    /// Rows are shuffled, well-separated levels: no near-ties for max.
    Distinct,
}

fn sample(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match domain {
        Domain::Signed => (0..n)
            .map(|_| {
                let v: f32 = rng.random_range(0.05..2.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
        Domain::Positive => (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
        Domain::Distinct => {
            let row = *shape.last().expect("non-empty shape");
            let mut out = Vec::with_capacity(n);
            for _ in 0..n / row {
                let mut levels: Vec<f32> = (0..row).map(|i| -2.0 + 4.0 * (i as f32 + 0.5) / row as f32).collect();
                levels.shuffle(rng);
                out.extend(levels.into_iter().map(|v| v + rng.random_range(-0.05..0.05)));
            }
            out
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let r = Tensor::uniform(shape, 1.0, &mut rng)?;
    let r = tape.constant(&r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type PrimFn = fn(&mut Tape, Var, &mut ChaCha8Rng) -> Result<Var>;

fn constant(tape: &mut Tape, shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Var {
    tape.constant(&sample(shape, domain, rng))
}

/// `(name, input shape, input domain, op under test)`.
fn primitives() -> Vec<(&'static str, [usize; 2], Domain, PrimFn)> {
    vec![
        ("matmul", [3, 4], Domain::Signed, |t, x, r| {
            let w = constant(t, &[4, 2], Domain::Signed, r);
            t.matmul(x, w)
        }),
        ("transpose", [3, 4], Domain::Signed, |t, x, _| t.transpose(x)),
        ("add", [3, 4], Domain::Signed, |t, x, r| {
            let c = constant(t, &[1, 4], Domain::Signed, r);
            let y = t.add(x, c)?;
            t.add(y, x)
        }),
        ("sub", [3, 4], Domain::Signed, |t, x, r| {
            let c = constant(t, &[3, 1], Domain::Signed, r);
            t.sub(c, x)
        }),
        ("mul", [3, 4], Domain::Signed, |t, x, r| {
            let c = constant(t, &[1, 4], Domain::Signed, r);
            let y = t.mul(x, c)?;
            t.mul(y, x)
        }),
        ("div", [3, 4], Domain::Positive, |t, x, r| {
            let c = constant(t, &[3, 4], Domain::Signed, r);
            let y = t.div(c, x)?;
            t.div(y, x)
        }),
        ("scale", [3, 4], Domain::Signed, |t, x, _| Ok(t.scale(x, -1.7))),
        ("add_scalar", [3, 4], Domain::Signed, |t, x, _| Ok(t.add_scalar(x, 0.3))),
        ("sigmoid", [3, 4], Domain::Signed, |t, x, _| Ok(t.sigmoid(x))),
        ("relu", [3, 4], Domain::Signed, |t, x, _| Ok(t.relu(x))),
        ("prelu", [3, 4], Domain::Signed, |t, x, _| {
            let s = t.constant(&Tensor::scalar(0.25));
            t.prelu(x, s)
        }),
        ("exp", [3, 4], Domain::Signed, |t, x, _| Ok(t.exp(x))),
        ("ln", [3, 4], Domain::Positive, |t, x, _| t.ln(x)),
        ("abs", [3, 4], Domain::Signed, |t, x, _| Ok(t.abs(x))),
        ("softmax", [3, 4], Domain::Signed, |t, x, _| t.softmax(x, 1)),
        ("layer_norm", [3, 4], Domain::Signed, |t, x, r| {
            let g = constant(t, &[4], Domain::Signed, r);
            let b = constant(t, &[4], Domain::Signed, r);
            t.layer_norm(x, g, b, 1e-5)
        }),
        ("pool_max", [3, 5], Domain::Distinct, |t, x, _| t.pool(x, 1, PoolMode::Max)),
        ("pool_avg", [3, 5], Domain::Signed, |t, x, _| t.pool(x, 0, PoolMode::Avg)),
        ("sum", [3, 4], Domain::Signed, |t, x, _| {
            let s = t.sum(x);
            t.mul(s, s)
        }),
        ("mean", [3, 4], Domain::Signed, |t, x, _| {
            let m = t.mean(x);
            t.mul(m, m)
        }),
        ("conv1d", [2, 6], Domain::Signed, |t, x, r| {
            let w = constant(t, &[3, 2, 3], Domain::Signed, r);
            let b = constant(t, &[3], Domain::Signed, r);
            t.conv1d(x, w, Some(b), 2)
        }),
        ("concat", [3, 4], Domain::Signed, |t, x, r| {
            let c = constant(t, &[3, 2], Domain::Signed, r);
            t.concat(&[c, x, x], 1)
        }),
        ("narrow", [3, 4], Domain::Signed, |t, x, _| t.narrow(x, 1, 1, 2)),
        ("reshape", [3, 4], Domain::Signed, |t, x, _| t.reshape(x, [2, 6])),
        ("overlap_add", [3, 4], Domain::Signed, |t, x, _| t.overlap_add(x, 2, 9)),
    ]
}

fn fold(name: &str, group: CheckGroup, threshold: f64, reports: &[GradCheckReport]) -> CheckOutcome {
    let worst = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    CheckOutcome {
        name: name.to_string(),
        group,
        max_rel_err: worst.map_or(0.0, |r| r.max_rel_err),
        threshold,
        checked: reports.iter().map(|r| r.checked).sum(),
        skipped: reports.iter().map(|r| r.skipped).sum(),
        worst: worst.and_then(|r| r.worst.clone()),
    }
}

impl SelfCheck {
    fn checker(&self, seed: u64, max_coords: Option<usize>) -> GradCheck {
        GradCheck { eps: self.eps, fault: self.fault, max_coords, seed, skip_kinks: true }
    }

    /// Every tape primitive except leaf creation.
    pub fn primitives(&self) -> Result<Vec<CheckOutcome>> {
        let mut out = Vec::new();
        for (name, shape, domain, op) in primitives() {
            let mut reports = Vec::new();
            for &seed in &self.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = sample(&shape, domain, &mut rng);
                let const_seed = rng.random::<u64>();
                let f = |tape: &mut Tape, x: Var| {
                    let mut r = ChaCha8Rng::seed_from_u64(const_seed);
                    let y = op(tape, x, &mut r)?;
                    readout(tape, y, const_seed)
                };
                reports.push(self.checker(seed, None).check(f, &x)?);
            }
            out.push(fold(name, CheckGroup::Primitive, PRIMITIVE_THRESHOLD, &reports));
        }
        Ok(out)
    }

    /// Fusion module parameters and inputs at the config's `D` and `F`.
    pub fn mscff(&self, cfg: &ModelConfig) -> Result<CheckOutcome> {
        let mut reports = Vec::new();
        for &seed in &self.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let p = MscffParams::new(&mut store, "mscff", cfg.d, cfg.n_bins(), &mut rng)?;
            let ssl = sample(&[cfg.d, self.frames], Domain::Signed, &mut rng);
            let spec = sample(&[cfg.n_bins(), self.frames], Domain::Positive, &mut rng);
            let f = |tape: &mut Tape, s: &ParamStore| {
                let a = tape.constant(&ssl);
                let b = tape.constant(&spec);
                let y = crate::fusion::mscff(tape, s, &p, a, b)?;
                readout(tape, y, seed)
            };
            reports.push(self.checker(seed, self.max_coords).check_params(&store, f)?);
        }
        Ok(fold("mscff", CheckGroup::Module, MODULE_THRESHOLD, &reports))
    }

    /// One attention block with the config's sub-block flags.
    pub fn rhma(&self, cfg: &ModelConfig) -> Result<CheckOutcome> {
        let mut reports = Vec::new();
        for &seed in &self.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let p = RhmaParams::new(&mut store, "rhma", &cfg.rhma(), &mut rng)?;
            let z = sample(&[self.frames, cfg.d_model], Domain::Signed, &mut rng);
            let f = |tape: &mut Tape, s: &ParamStore| {
                let zv = tape.constant(&z);
                let y = rhma_forward(tape, s, &p, zv)?;
                readout(tape, y, seed)
            };
            reports.push(self.checker(seed, self.max_coords).check_params(&store, f)?);
        }
        Ok(fold("rhma", CheckGroup::Module, MODULE_THRESHOLD, &reports))
    }

    /// The training loss through STFT features, the network and the tape
    /// inverse STFT, with respect to every model parameter.
    pub fn pipeline(&self, cfg: &ModelConfig) -> Result<CheckOutcome> {
        let mut reports = Vec::new();
        let len = (self.frames - 1) * cfg.stft.hop;
        for &seed in &self.seeds {
            let model = Model::build(cfg, seed)?;
            let clean = synth::clean_utterance(len, seed);
            let noise = synth::noise(synth::NoiseKind::ALL[seed as usize % 10], len, seed + 1);
            let noisy = crate::signal::mix_at_snr(&clean, &noise, 5.0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stack = sample(&[cfg.n_layers, cfg.stft.n_frames(len), cfg.d], Domain::Signed, &mut rng);
            let ex = Example::new(&cfg.stft, &noisy.noisy, &noisy.clean, stack)?;
            let f = |tape: &mut Tape, s: &ParamStore| {
                let m = Model { store: s.clone(), ..model.clone() };
                Ok(example_loss(tape, &m, &ex)?.total)
            };
            reports.push(self.checker(seed, self.max_coords).check_params(&model.store, f)?);
        }
        Ok(fold("pipeline", CheckGroup::Pipeline, PIPELINE_THRESHOLD, &reports))
    }

    /// Primitives, both modules and the pipeline, each listed once.
    pub fn run(&self, cfg: &ModelConfig) -> Result<Vec<CheckOutcome>> {
        let mut out = self.primitives()?;
        out.push(self.mscff(cfg)?);
        out.push(self.rhma(cfg)?);
        out.push(self.pipeline(cfg)?);
        Ok(out)
    }
}
