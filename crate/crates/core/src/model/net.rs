use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{weighted_sum, WeightedSumParams};
use crate::error::{Error, Result};
use crate::fusion::{mscff, MscffParams};
use crate::layers::Linear;
use crate::numerics::{CensusEntry, ParamStore, Tape, Tensor, Var};
use crate::rhma::{rhma_forward, RhmaParams};

use super::config::{MagCompression, ModelConfig};

/// Mask-head bias that saturates the sigmoid to exactly 1 in `f64`.
pub const IDENTITY_MASK_BIAS: f32 = 40.0;

/// Learnable parameters plus the handles that locate them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ws: WeightedSumParams,
    pub mscff: Option<MscffParams>,
    pub down: Linear,
    pub blocks: Vec<RhmaParams>,
    pub head: Linear,
}

/// Tape nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[F × T]`, in `(0, 1)`.
    pub mask: Var,
    /// `[F × T]`, `mask ⊙ noisy_mag`.
    pub enhanced: Var,
}

impl Model {
    /// Initialize every parameter from `seed`. The seed is recorded in the
    /// stored config.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        config.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, f) = (config.d, config.n_bins());
        let ws = WeightedSumParams::new(&mut store, "ws.logits", config.n_layers)?;
        let mscff = if config.use_mscff { Some(MscffParams::new(&mut store, "mscff", d, f, &mut rng)?) } else { None };
        let down = Linear::new(&mut store, "down", d + f, config.d_model, &mut rng)?;
        let mut blocks = Vec::new();
        if config.use_rhma {
            let rc = config.rhma();
            for i in 0..config.n_rhma {
                blocks.push(RhmaParams::new(&mut store, &format!("rhma{}", i + 1), &rc, &mut rng)?);
            }
        }
        let head = Linear::new(&mut store, "head", config.d_model, f, &mut rng)?;
        Ok(Model { config, store, ws, mscff, down, blocks, head })
    }

    pub fn census(&self) -> Vec<CensusEntry> {
        self.store.census()
    }

    pub fn param_count(&self) -> usize {
        self.store.total_count()
    }

    /// Zero the mask-head weights and saturate its bias so the mask is 1
    /// everywhere.
    pub fn force_identity_mask(&mut self) {
        self.store.get_mut(self.head.w).data_mut().fill(0.0);
        self.store.get_mut(self.head.b).data_mut().fill(IDENTITY_MASK_BIAS);
    }

    fn check_inputs(&self, noisy_mag: &[usize], stack: &[usize]) -> Result<usize> {
        let c = &self.config;
        let (f, t) = match noisy_mag {
            &[f, t] => (f, t),
            s => return Err(Error::Dimension(format!("noisy magnitude must be F×T, got {s:?}"))),
        };
        if f != c.n_bins() {
            return Err(Error::Dimension(format!("model expects {} bins, got {f}", c.n_bins())));
        }
        if stack != [c.n_layers, t, c.d] {
            return Err(Error::Dimension(format!(
                "embedding stack must be [{}, {t}, {}], got {stack:?}",
                c.n_layers, c.d
            )));
        }
        Ok(t)
    }

    /// Network input derived from the noisy magnitude.
    pub fn network_input(&self, noisy_mag: &Tensor) -> Tensor {
        match self.config.mag_compression {
            MagCompression::None => noisy_mag.clone(),
            MagCompression::Sqrt => {
                let data = noisy_mag.data().iter().map(|&m| m.max(0.0).sqrt()).collect();
                Tensor::new(noisy_mag.shape().to_vec(), data).expect("same shape")
            }
        }
    }

    /// Forward on tape nodes. `spec_in` feeds the network, `noisy_mag` is
    /// the magnitude the mask multiplies; both `[F × T]`. `stack` is the
    /// frame-aligned `[N × T × D]` embedding stack.
    pub fn forward_vars(&self, tape: &mut Tape, spec_in: Var, noisy_mag: Var, stack: Var) -> Result<ForwardVars> {
        self.check_inputs(tape.shape(noisy_mag), tape.shape(stack))?;
        if tape.shape(spec_in) != tape.shape(noisy_mag) {
            return Err(Error::Dimension("network input and noisy magnitude differ in shape".into()));
        }
        let store = &self.store;
        let f_ssl = weighted_sum(tape, store, &self.ws, stack)?;
        let fused = match &self.mscff {
            Some(p) => mscff(tape, store, p, f_ssl, spec_in)?,
            None => tape.concat(&[f_ssl, spec_in], 0)?,
        };
        let x = tape.transpose(fused)?;
        let mut z = self.down.apply(tape, store, x)?;
        for block in &self.blocks {
            z = rhma_forward(tape, store, block, z)?;
        }
        let logits = self.head.apply(tape, store, z)?;
        let mask = tape.sigmoid(logits);
        let mask = tape.transpose(mask)?;
        let enhanced = tape.mul(mask, noisy_mag)?;
        Ok(ForwardVars { mask, enhanced })
    }

    /// Forward from tensors; inputs enter the tape as constants.
    pub fn forward_on(&self, tape: &mut Tape, noisy_mag: &Tensor, stack: &Tensor) -> Result<ForwardVars> {
        self.check_inputs(noisy_mag.shape(), stack.shape())?;
        let spec_in = tape.constant(&self.network_input(noisy_mag));
        let mag = tape.constant(noisy_mag);
        let stack = tape.constant(stack);
        self.forward_vars(tape, spec_in, mag, stack)
    }

    /// `(mask, enhanced_mag)` without keeping the tape.
    pub fn forward(&self, noisy_mag: &Tensor, stack: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, noisy_mag, stack)?;
        Ok((tape.tensor(out.mask), tape.tensor(out.enhanced)))
    }
}
