//! Residual hybrid multi-attention block.
//!
//! On a `[T × C]` input `Z` the block computes
//!
//! ```text
//! Z_mhsa  = PostLN_a(MHSA(Z) + Z)
//! Z'      = LN_a(PostLN_b(FFN_1(Z_mhsa) + Z_mhsa) + Z)
//! Z'_scta = PostLN_c(SCTA(Z') + Z')
//! Z''     = LN_b(PostLN_d(FFN_2(Z'_scta) + Z'_scta) + Z')
//! ```
//!
//! SCTA is a channel gate (SCA) followed by a time gate (STA). Each gate
//! mixes a max-pool path, an average-pool path and a combined path with
//! fixed weights before a final sigmoid. A disabled MHSA or SCTA sub-block
//! is replaced by the identity together with its post-norm.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv1d, LayerNorm, Linear};
use crate::numerics::{ParamStore, PoolMode, Tape, Var};

pub const ALPHA_MAX: f64 = 0.25;
pub const ALPHA_AVG: f64 = 0.25;
pub const BETA: f64 = 0.5;
pub const STA_SINGLE_KERNEL: usize = 3;
pub const STA_CONCAT_KERNEL: usize = 5;

/// Shape and sub-block switches of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RhmaConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub sca_ratio: usize,
    pub use_mhsa: bool,
    pub use_scta: bool,
}

impl RhmaConfig {
    pub fn validate(&self) -> Result<()> {
        let RhmaConfig { d_model, n_heads, d_ff, sca_ratio, .. } = *self;
        if d_model == 0 || n_heads == 0 || d_ff == 0 || sca_ratio == 0 {
            return Err(Error::Config("d_model, n_heads, d_ff and sca_ratio must be positive".into()));
        }
        if d_model % n_heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} is not divisible by {n_heads} heads")));
        }
        if d_model % sca_ratio != 0 {
            return Err(Error::Config(format!("SCA ratio {sca_ratio} does not divide d_model {d_model}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MhsaParams {
    pub n_heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaParams {
    /// Shared by the max and average paths.
    pub single: Conv1d,
    pub concat: Conv1d,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SctaParams {
    pub sca: ScaParams,
    pub sta: StaParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RhmaParams {
    pub d_model: usize,
    pub mhsa: Option<MhsaParams>,
    pub postln_a: Option<LayerNorm>,
    pub ffn1: FfnParams,
    pub postln_b: LayerNorm,
    pub ln_a: LayerNorm,
    pub scta: Option<SctaParams>,
    pub postln_c: Option<LayerNorm>,
    pub ffn2: FfnParams,
    pub postln_d: LayerNorm,
    pub ln_b: LayerNorm,
}

impl MhsaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        Ok(MhsaParams {
            n_heads,
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng)?,
        })
    }
}

impl FfnParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        Ok(FfnParams {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, d_ff, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_ff, d_model, rng)?,
        })
    }
}

impl SctaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        let hidden = channels / ratio;
        Ok(SctaParams {
            sca: ScaParams {
                fc1: Linear::new(store, &format!("{name}.sca.fc1"), channels, hidden, rng)?,
                fc2: Linear::new(store, &format!("{name}.sca.fc2"), hidden, channels, rng)?,
            },
            sta: StaParams {
                single: Conv1d::new(store, &format!("{name}.sta.single"), 1, 1, STA_SINGLE_KERNEL, rng)?,
                concat: Conv1d::new(store, &format!("{name}.sta.concat"), 2, 1, STA_CONCAT_KERNEL, rng)?,
            },
        })
    }

    /// Zero every SCA and STA weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        for lin in [self.sca.fc1, self.sca.fc2] {
            for id in [lin.w, lin.b] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        self.sta.single.zero(store);
        self.sta.concat.zero(store);
    }
}

impl RhmaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &RhmaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.d_model;
        let ln = |store: &mut ParamStore, tag: &str| LayerNorm::new(store, &format!("{name}.{tag}"), c);
        let mhsa = if cfg.use_mhsa {
            Some(MhsaParams::new(store, &format!("{name}.mhsa"), c, cfg.n_heads, rng)?)
        } else {
            None
        };
        let postln_a = if cfg.use_mhsa { Some(ln(store, "postln_a")?) } else { None };
        let ffn1 = FfnParams::new(store, &format!("{name}.ffn1"), c, cfg.d_ff, rng)?;
        let postln_b = ln(store, "postln_b")?;
        let ln_a = ln(store, "ln_a")?;
        let scta = if cfg.use_scta {
            Some(SctaParams::new(store, &format!("{name}.scta"), c, cfg.sca_ratio, rng)?)
        } else {
            None
        };
        let postln_c = if cfg.use_scta { Some(ln(store, "postln_c")?) } else { None };
        let ffn2 = FfnParams::new(store, &format!("{name}.ffn2"), c, cfg.d_ff, rng)?;
        let postln_d = ln(store, "postln_d")?;
        let ln_b = ln(store, "ln_b")?;
        Ok(RhmaParams { d_model: c, mhsa, postln_a, ffn1, postln_b, ln_a, scta, postln_c, ffn2, postln_d, ln_b })
    }
}

fn check_tc(tape: &Tape, z: Var, c: usize) -> Result<usize> {
    match tape.shape(z) {
        &[t, cc] if cc == c => Ok(t),
        s => Err(Error::Dimension(format!("expected T×{c}, got {s:?}"))),
    }
}

/// Multi-head attention output and the per-head `[T × T]` weights.
#[derive(Clone, Debug)]
pub struct MhsaOutput {
    pub out: Var,
    pub attn: Vec<Var>,
}

/// Bidirectional scaled dot-product self-attention without positional
/// encoding.
pub fn mhsa(tape: &mut Tape, store: &ParamStore, p: &MhsaParams, z: Var) -> Result<MhsaOutput> {
    let c = store.get(p.q.w).shape()[0];
    check_tc(tape, z, c)?;
    let dh = c / p.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = p.q.apply(tape, store, z)?;
    let k = p.k.apply(tape, store, z)?;
    let v = p.v.apply(tape, store, z)?;
    let mut heads = Vec::with_capacity(p.n_heads);
    let mut attn = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(a, vh)?);
        attn.push(a);
    }
    let cat = tape.concat(&heads, 1)?;
    let out = p.out.apply(tape, store, cat)?;
    Ok(MhsaOutput { out, attn })
}

/// `Linear → ReLU → Linear`, row-wise.
pub fn ffn(tape: &mut Tape, store: &ParamStore, p: &FfnParams, x: Var) -> Result<Var> {
    let h = p.hidden.apply(tape, store, x)?;
    let h = tape.relu(h);
    p.out.apply(tape, store, h)
}

fn mix_paths(tape: &mut Tape, s_max: Var, s_avg: Var, s_both: Var) -> Result<Var> {
    let a = tape.scale(s_max, ALPHA_MAX);
    let b = tape.scale(s_avg, ALPHA_AVG);
    let c = tape.scale(s_both, BETA);
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    Ok(tape.sigmoid(abc))
}

/// Channel gate `[C × 1]` for `f` (`[C × T]`).
pub fn sca_gate(tape: &mut Tape, store: &ParamStore, p: &ScaParams, f: Var) -> Result<Var> {
    let c = store.get(p.fc1.w).shape()[0];
    if tape.shape(f).len() != 2 || tape.shape(f)[0] != c {
        return Err(Error::Dimension(format!("SCA expects {c}×T, got {:?}", tape.shape(f))));
    }
    let f_max = tape.pool(f, 1, PoolMode::Max)?;
    let f_avg = tape.pool(f, 1, PoolMode::Avg)?;
    let f_add = tape.add(f_max, f_avg)?;
    let mut fc = |x: Var| -> Result<Var> {
        let row = tape.transpose(x)?;
        let h = p.fc1.apply(tape, store, row)?;
        let h = tape.relu(h);
        let y = p.fc2.apply(tape, store, h)?;
        Ok(tape.sigmoid(y))
    };
    let (s_max, s_avg, s_add) = (fc(f_max)?, fc(f_avg)?, fc(f_add)?);
    let a = mix_paths(tape, s_max, s_avg, s_add)?;
    tape.transpose(a)
}

/// Channel attention on `[C × T]`.
pub fn sca(tape: &mut Tape, store: &ParamStore, p: &ScaParams, f: Var) -> Result<Var> {
    let a = sca_gate(tape, store, p, f)?;
    tape.mul(f, a)
}

/// Time gate `[1 × T]` for `f` (`[C × T]`).
pub fn sta_gate(tape: &mut Tape, store: &ParamStore, p: &StaParams, f: Var) -> Result<Var> {
    if tape.shape(f).len() != 2 {
        return Err(Error::Dimension(format!("STA expects C×T, got {:?}", tape.shape(f))));
    }
    let f_max = tape.pool(f, 0, PoolMode::Max)?;
    let f_avg = tape.pool(f, 0, PoolMode::Avg)?;
    let f_cat = tape.concat(&[f_max, f_avg], 0)?;
    let s_max = p.single.apply(tape, store, f_max)?;
    let s_max = tape.sigmoid(s_max);
    let s_avg = p.single.apply(tape, store, f_avg)?;
    let s_avg = tape.sigmoid(s_avg);
    let s_cat = p.concat.apply(tape, store, f_cat)?;
    let s_cat = tape.sigmoid(s_cat);
    mix_paths(tape, s_max, s_avg, s_cat)
}

/// Time attention on `[C × T]`.
pub fn sta(tape: &mut Tape, store: &ParamStore, p: &StaParams, f: Var) -> Result<Var> {
    let a = sta_gate(tape, store, p, f)?;
    tape.mul(f, a)
}

/// Channel then time attention on the block layout `[T × C]`.
pub fn scta(tape: &mut Tape, store: &ParamStore, p: &SctaParams, z: Var) -> Result<Var> {
    let f = tape.transpose(z)?;
    let f = sca(tape, store, &p.sca, f)?;
    let f = sta(tape, store, &p.sta, f)?;
    tape.transpose(f)
}

/// One residual hybrid multi-attention block on `[T × d_model]`.
pub fn rhma_forward(tape: &mut Tape, store: &ParamStore, p: &RhmaParams, z: Var) -> Result<Var> {
    check_tc(tape, z, p.d_model)?;
    let z_mhsa = match (&p.mhsa, &p.postln_a) {
        (Some(m), Some(ln)) => {
            let a = mhsa(tape, store, m, z)?.out;
            let r = tape.add(a, z)?;
            ln.apply(tape, store, r)?
        }
        _ => z,
    };
    let h = ffn(tape, store, &p.ffn1, z_mhsa)?;
    let h = tape.add(h, z_mhsa)?;
    let h = p.postln_b.apply(tape, store, h)?;
    let h = tape.add(h, z)?;
    let z1 = p.ln_a.apply(tape, store, h)?;

    let z_scta = match (&p.scta, &p.postln_c) {
        (Some(s), Some(ln)) => {
            let a = scta(tape, store, s, z1)?;
            let r = tape.add(a, z1)?;
            ln.apply(tape, store, r)?
        }
        _ => z1,
    };
    let h = ffn(tape, store, &p.ffn2, z_scta)?;
    let h = tape.add(h, z_scta)?;
    let h = p.postln_d.apply(tape, store, h)?;
    let h = tape.add(h, z1)?;
    p.ln_b.apply(tape, store, h)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor;

    fn cfg() -> RhmaConfig {
        RhmaConfig { d_model: 16, n_heads: 2, d_ff: 64, sca_ratio: 2, use_mhsa: true, use_scta: true }
    }

    fn setup(seed: u64) -> (ParamStore, RhmaParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = RhmaParams::new(&mut store, "rhma", &cfg(), &mut rng).unwrap();
        (store, p)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape.to_vec(), 2.0, &mut rng).unwrap()
    }

    const GATE: f64 = 0.622_459_331_201_854_6; // sigmoid(0.5)

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(RhmaConfig { n_heads: 3, ..cfg() }.validate().is_err());
        assert!(RhmaConfig { sca_ratio: 5, ..cfg() }.validate().is_err());
    }

    #[test]
    fn single_frame_attention() {
        let (store, p) = setup(1);
        let m = p.mhsa.as_ref().unwrap();
        let x = random(&[1, 16], 2);
        let mut tape = Tape::new();
        let z = tape.constant(&x);
        let out = mhsa(&mut tape, &store, m, z).unwrap();
        for a in &out.attn {
            assert_eq!(tape.value(*a), &[1.0]);
        }
        let v = m.v.apply(&mut tape, &store, z).unwrap();
        let want = m.out.apply(&mut tape, &store, v).unwrap();
        assert_eq!(tape.value(out.out), tape.value(want));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, p) = setup(3);
        let mut tape = Tape::new();
        let z = tape.constant(&random(&[7, 16], 4));
        let out = mhsa(&mut tape, &store, p.mhsa.as_ref().unwrap(), z).unwrap();
        assert_eq!(out.attn.len(), 2);
        for a in &out.attn {
            for row in tape.value(*a).chunks(7) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_ffn_is_zero() {
        let (mut store, p) = setup(5);
        for lin in [p.ffn1.hidden, p.ffn1.out] {
            for id in [lin.w, lin.b] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        for t in [1, 257] {
            let mut tape = Tape::new();
            let x = tape.constant(&random(&[t, 16], 6));
            let y = ffn(&mut tape, &store, &p.ffn1, x).unwrap();
            assert_eq!(tape.shape(y), &[t, 16]);
            assert!(tape.value(y).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_gates_closed_form() {
        let (mut store, p) = setup(7);
        let s = p.scta.as_ref().unwrap();
        s.zero(&mut store);
        let x = random(&[16, 9], 8);
        let mut tape = Tape::new();
        let f = tape.constant(&x);
        let y = sca(&mut tape, &store, &s.sca, f).unwrap();
        for (a, b) in tape.value(y).iter().zip(x.data()) {
            assert!((a - GATE * *b as f64).abs() < 1e-12);
        }
        let y = sta(&mut tape, &store, &s.sta, f).unwrap();
        for (a, b) in tape.value(y).iter().zip(x.data()) {
            assert!((a - GATE * *b as f64).abs() < 1e-12);
        }
        let z = tape.constant(&x.transpose().unwrap());
        let y = scta(&mut tape, &store, s, z).unwrap();
        let zv = tape.value(z).to_vec();
        for (a, b) in tape.value(y).iter().zip(&zv) {
            assert!((a - GATE * GATE * b).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_strictly_inside_unit_interval_and_shrink() {
        for seed in 0..10 {
            let (store, p) = setup(seed);
            let s = p.scta.as_ref().unwrap();
            let mut tape = Tape::new();
            let f = tape.constant(&random(&[16, 11], seed + 50));
            let a = sca_gate(&mut tape, &store, &s.sca, f).unwrap();
            assert_eq!(tape.shape(a), &[16, 1]);
            assert!(tape.value(a).iter().all(|&v| v > 0.0 && v < 1.0));
            let b = sta_gate(&mut tape, &store, &s.sta, f).unwrap();
            assert_eq!(tape.shape(b), &[1, 11]);
            assert!(tape.value(b).iter().all(|&v| v > 0.0 && v < 1.0));

            let z = tape.transpose(f).unwrap();
            let y = scta(&mut tape, &store, s, z).unwrap();
            for (o, i) in tape.value(y).iter().zip(tape.value(z)) {
                assert!(o.abs() <= i.abs());
            }
        }
    }

    #[test]
    fn scta_is_sta_after_sca() {
        let (store, p) = setup(9);
        let s = p.scta.as_ref().unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(&random(&[6, 16], 10));
        let y = scta(&mut tape, &store, s, z).unwrap();
        let f = tape.transpose(z).unwrap();
        let a = sca(&mut tape, &store, &s.sca, f).unwrap();
        let b = sta(&mut tape, &store, &s.sta, a).unwrap();
        let b = tape.transpose(b).unwrap();
        assert_eq!(tape.value(y), tape.value(b));
    }

    #[test]
    fn block_preserves_shape() {
        let (store, p) = setup(11);
        for t in [1, 33, 257] {
            let mut tape = Tape::new();
            let z = tape.constant(&random(&[t, 16], t as u64));
            let y = rhma_forward(&mut tape, &store, &p, z).unwrap();
            assert_eq!(tape.shape(y), &[t, 16]);
        }
        let mut tape = Tape::new();
        let z = tape.constant(&random(&[4, 8], 0));
        assert!(matches!(rhma_forward(&mut tape, &store, &p, z), Err(Error::Dimension(_))));
    }

    #[test]
    fn ablated_blocks_drop_parameters() {
        let count = |use_mhsa, use_scta| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let c = RhmaConfig { use_mhsa, use_scta, ..cfg() };
            let p = RhmaParams::new(&mut store, "b", &c, &mut rng).unwrap();
            let mut tape = Tape::new();
            let z = tape.constant(&random(&[5, 16], 1));
            rhma_forward(&mut tape, &store, &p, z).unwrap();
            store.total_count()
        };
        let full = count(true, true);
        let mhsa_params = 4 * (16 * 16 + 16) + 2 * 16;
        let scta_params = (16 * 8 + 8) + (8 * 16 + 16) + (3 + 1) + (10 + 1) + 2 * 16;
        assert_eq!(full - count(false, true), mhsa_params);
        assert_eq!(full - count(true, false), scta_params);
    }
}
