//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{OpKind, ParamStore, Tape, Tensor, Var};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter (or `"x"`) and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, err: f64) {
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }
}

/// Finite-difference checker settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f32,
    /// Backward rule to corrupt on the analytic side (fault injection).
    pub fault: Option<OpKind>,
    /// Cap on coordinates checked per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose `±eps` evaluations change the tape's
    /// [`branch_pattern`](Tape::branch_pattern), where central differences
    /// straddle a kink and do not estimate the derivative.
    pub skip_kinks: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-3, fault: None, max_coords: None, seed: 0, skip_kinks: false }
    }
}

impl GradCheck {
    fn analytic_tape(&self) -> Tape {
        match self.fault {
            Some(kind) => Tape::with_fault(kind),
            None => Tape::new(),
        }
    }

    fn coords(&self, n: usize, salt: u64) -> Vec<usize> {
        match self.max_coords {
            Some(cap) if cap < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, n, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        }
    }

    /// Check the gradient of scalar `f` with respect to its input `x`.
    pub fn check<F>(&self, f: F, x: &Tensor) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = self.analytic_tape();
        let xv = tape.leaf(x);
        let y = f(&mut tape, xv)?;
        tape.scalar(y)?;
        tape.backward(y)?;
        let analytic = tape.grad_f64(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        let base = tape.branch_pattern();

        let eval = |t: &Tensor| -> Result<(f64, Vec<usize>)> {
            let mut tape = Tape::new();
            let v = tape.leaf(t);
            let y = f(&mut tape, v)?;
            Ok((tape.scalar(y)?, tape.branch_pattern()))
        };
        let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, skipped: 0 };
        let mut work = x.clone();
        for i in self.coords(x.numel(), 0) {
            match self.central_difference(&mut work, i, &base, &eval)? {
                Some(numeric) => report.record("x", i, relative_error(analytic[i], numeric)),
                None => report.skipped += 1,
            }
        }
        Ok(report)
    }

    /// Check the gradient of scalar `f` with respect to every parameter in
    /// `store` (subsampled per tensor when `max_coords` is set).
    pub fn check_params<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let mut tape = self.analytic_tape();
        let y = f(&mut tape, store)?;
        tape.scalar(y)?;
        tape.backward(y)?;
        let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for &(id, v) in tape.bound_params() {
            analytic[id.index()] = tape.grad_f64(v).map(<[f64]>::to_vec);
        }
        let base = tape.branch_pattern();

        let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, skipped: 0 };
        for (id, name, t) in store.iter() {
            let n = t.numel();
            for i in self.coords(n, id.index() as u64 + 1) {
                let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
                let mut tensor = t.clone();
                let eval = |w: &Tensor| -> Result<(f64, Vec<usize>)> {
                    let mut s = store.clone();
                    *s.get_mut(id) = w.clone();
                    let mut tape = Tape::new();
                    let y = f(&mut tape, &s)?;
                    Ok((tape.scalar(y)?, tape.branch_pattern()))
                };
                match self.central_difference(&mut tensor, i, &base, &eval)? {
                    Some(numeric) => report.record(name, i, relative_error(a, numeric)),
                    None => report.skipped += 1,
                }
            }
        }
        Ok(report)
    }

    /// `(f(x + ε e_i) - f(x - ε e_i)) / (x⁺ᵢ - x⁻ᵢ)` using the actually
    /// representable perturbed values; `x` is restored before returning.
    /// `None` when kinks are skipped and either side changes branch.
    fn central_difference(
        &self,
        x: &mut Tensor,
        i: usize,
        base: &[usize],
        f: &dyn Fn(&Tensor) -> Result<(f64, Vec<usize>)>,
    ) -> Result<Option<f64>> {
        let orig = x.data()[i];
        let plus = orig + self.eps;
        let minus = orig - self.eps;
        x.data_mut()[i] = plus;
        let (fp, pp) = f(x)?;
        x.data_mut()[i] = minus;
        let (fm, pm) = f(x)?;
        x.data_mut()[i] = orig;
        if self.skip_kinks && (pp != base || pm != base) {
            return Ok(None);
        }
        Ok(Some((fp - fm) / (plus as f64 - minus as f64)))
    }
}

/// Max relative error between autodiff and central differences of scalar
/// `f` at `x`, over every element.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    GradCheck { eps, ..GradCheck::default() }.check(f, x).map(|r| r.max_rel_err)
}
