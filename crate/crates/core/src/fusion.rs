//! Multi-scale cross-domain feature fusion.
//!
//! The concatenated SSL and spectrogram features pass through a main branch
//! (pointwise conv, PReLU, channel layer norm). Three sigmoid gate branches
//! read the main-branch output and scale the spectrogram, the SSL features
//! and the main-branch output itself. The gated parts are then summed and
//! rectified:
//!
//! ```text
//! F'  = MB(concat(F_ssl, F_spec))
//! F'' = ReLU(concat(g_spec ⊙ F_spec, g_ssl ⊙ F_ssl) + g_concat ⊙ F')
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv1d, LayerNorm};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const SPEC_GATE_KERNEL: usize = 3;
pub const SSL_GATE_KERNEL: usize = 5;
pub const CONCAT_GATE_KERNEL: usize = 3;
pub const PRELU_INIT: f32 = 0.25;

/// Which gate branch to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Spec,
    Ssl,
    Concat,
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spec" => Ok(GateKind::Spec),
            "ssl" => Ok(GateKind::Ssl),
            "concat" => Ok(GateKind::Concat),
            other => Err(Error::Contract(format!("unknown gate branch {other:?}; expected spec, ssl or concat"))),
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateKind::Spec => "spec",
            GateKind::Ssl => "ssl",
            GateKind::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MscffParams {
    pub d: usize,
    pub f: usize,
    pub main: Conv1d,
    pub prelu: ParamId,
    pub norm: LayerNorm,
    pub gate_spec: Conv1d,
    pub gate_ssl: Conv1d,
    pub gate_concat: Conv1d,
}

impl MscffParams {
    /// Register parameters under `name` for `d` SSL and `f` spectrogram
    /// channels.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut R) -> Result<Self> {
        let c = d + f;
        Ok(MscffParams {
            d,
            f,
            main: Conv1d::new(store, &format!("{name}.main"), c, c, 1, rng)?,
            prelu: store.insert(format!("{name}.main.prelu"), Tensor::scalar(PRELU_INIT))?,
            norm: LayerNorm::new(store, &format!("{name}.main.norm"), c)?,
            gate_spec: Conv1d::new(store, &format!("{name}.gate_spec"), c, f, SPEC_GATE_KERNEL, rng)?,
            gate_ssl: Conv1d::new(store, &format!("{name}.gate_ssl"), c, d, SSL_GATE_KERNEL, rng)?,
            gate_concat: Conv1d::new(store, &format!("{name}.gate_concat"), c, c, CONCAT_GATE_KERNEL, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.d + self.f
    }

    pub fn gate(&self, which: GateKind) -> &Conv1d {
        match which {
            GateKind::Spec => &self.gate_spec,
            GateKind::Ssl => &self.gate_ssl,
            GateKind::Concat => &self.gate_concat,
        }
    }
}

fn check_rows(tape: &Tape, x: Var, rows: usize, what: &str) -> Result<usize> {
    match tape.shape(x) {
        &[r, t] if r == rows => Ok(t),
        s => Err(Error::Dimension(format!("{what} must have {rows} channels (C×T), got {s:?}"))),
    }
}

/// Pointwise conv, PReLU, then layer norm over channels for each frame.
pub fn main_branch(tape: &mut Tape, store: &ParamStore, p: &MscffParams, f_concat: Var) -> Result<Var> {
    check_rows(tape, f_concat, p.channels(), "main-branch input")?;
    let y = p.main.apply(tape, store, f_concat)?;
    let slope = tape.param(store, p.prelu);
    let y = tape.prelu(y, slope)?;
    let y = tape.transpose(y)?;
    let y = p.norm.apply(tape, store, y)?;
    tape.transpose(y)
}

/// Gate in `(0, 1)` computed from the main-branch output `f_prime`.
pub fn gate_branch(tape: &mut Tape, store: &ParamStore, p: &MscffParams, f_prime: Var, which: GateKind) -> Result<Var> {
    check_rows(tape, f_prime, p.channels(), "gate input")?;
    let y = p.gate(which).apply(tape, store, f_prime)?;
    Ok(tape.sigmoid(y))
}

/// Fused feature `[(F + D) × T]` from `f_ssl` (`[D × T]`) and `f_spec`
/// (`[F × T]`).
pub fn mscff(tape: &mut Tape, store: &ParamStore, p: &MscffParams, f_ssl: Var, f_spec: Var) -> Result<Var> {
    let t = check_rows(tape, f_ssl, p.d, "SSL feature")?;
    let t_spec = check_rows(tape, f_spec, p.f, "spectrogram")?;
    if t != t_spec {
        return Err(Error::Dimension(format!("frame counts differ: SSL {t}, spectrogram {t_spec}")));
    }
    let f_concat = tape.concat(&[f_ssl, f_spec], 0)?;
    let f_prime = main_branch(tape, store, p, f_concat)?;
    let g_spec = gate_branch(tape, store, p, f_prime, GateKind::Spec)?;
    let g_ssl = gate_branch(tape, store, p, f_prime, GateKind::Ssl)?;
    let g_concat = gate_branch(tape, store, p, f_prime, GateKind::Concat)?;
    let spec = tape.mul(g_spec, f_spec)?;
    let ssl = tape.mul(g_ssl, f_ssl)?;
    let cross = tape.mul(g_concat, f_prime)?;
    let parts = tape.concat(&[spec, ssl], 0)?;
    let sum = tape.add(parts, cross)?;
    Ok(tape.relu(sum))
}
