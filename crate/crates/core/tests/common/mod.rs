//! Straight-line `f64` reference compositions used as oracles. Nothing here
//! touches the tape: parameters are read by name from the store and every
//! operation is a plain loop.

#![allow(dead_code)]

use cffma_core::numerics::ParamStore;

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> M {
        assert_eq!(d.len(), r * c);
        M { r, c, d }
    }

    pub fn zeros(r: usize, c: usize) -> M {
        M::new(r, c, vec![0.0; r * c])
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.c + j] = v;
    }

    pub fn t(&self) -> M {
        let mut o = M::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                o.set(j, i, self.at(i, j));
            }
        }
        o
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M::new(self.r, self.c, self.d.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, o: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c));
        M::new(self.r, self.c, self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, o: &M) -> M {
        self.zip(o, |a, b| a + b)
    }

    pub fn mul(&self, o: &M) -> M {
        self.zip(o, |a, b| a * b)
    }

    pub fn matmul(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut out = M::zeros(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                let mut s = 0.0;
                for k in 0..self.c {
                    s += self.at(i, k) * o.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Stack rows of `self` above rows of `o`.
    pub fn vcat(&self, o: &M) -> M {
        assert_eq!(self.c, o.c);
        let mut d = self.d.clone();
        d.extend_from_slice(&o.d);
        M::new(self.r + o.r, self.c, d)
    }

    /// Columns of `self` followed by columns of `o`.
    pub fn hcat(&self, o: &M) -> M {
        self.t().vcat(&o.t()).t()
    }

    pub fn cols(&self, start: usize, n: usize) -> M {
        let mut out = M::zeros(self.r, n);
        for i in 0..self.r {
            for j in 0..n {
                out.set(i, j, self.at(i, start + j));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        assert_eq!(self.d.len(), other.len());
        self.d.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn p(store: &ParamStore, name: &str) -> (Vec<usize>, Vec<f64>) {
    let t = store.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    (t.shape().to_vec(), t.to_f64())
}

/// `x·W + b` on rows.
pub fn linear(store: &ParamStore, name: &str, x: &M) -> M {
    let (ws, w) = p(store, &format!("{name}.w"));
    let (_, b) = p(store, &format!("{name}.b"));
    let mut y = x.matmul(&M::new(ws[0], ws[1], w));
    for i in 0..y.r {
        for j in 0..y.c {
            y.set(i, j, y.at(i, j) + b[j]);
        }
    }
    y
}

/// Same-length cross-correlation of `[C_in × T]` with zero padding.
pub fn conv1d(store: &ParamStore, name: &str, x: &M) -> M {
    let (ws, w) = p(store, &format!("{name}.w"));
    let (_, b) = p(store, &format!("{name}.b"));
    let (co, ci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ci, x.r);
    let half = (k / 2) as isize;
    let mut y = M::zeros(co, x.c);
    for o in 0..co {
        for t in 0..x.c {
            let mut s = b[o];
            for c in 0..ci {
                for j in 0..k {
                    let src = t as isize + j as isize - half;
                    if src >= 0 && (src as usize) < x.c {
                        s += w[(o * ci + c) * k + j] * x.at(c, src as usize);
                    }
                }
            }
            y.set(o, t, s);
        }
    }
    y
}

/// Layer norm over each row.
pub fn layer_norm(store: &ParamStore, name: &str, x: &M) -> M {
    let (_, g) = p(store, &format!("{name}.gamma"));
    let (_, b) = p(store, &format!("{name}.beta"));
    let mut y = M::zeros(x.r, x.c);
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        for j in 0..x.c {
            y.set(i, j, (row[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j]);
        }
    }
    y
}

pub fn softmax_rows(x: &M) -> M {
    let mut y = M::zeros(x.r, x.c);
    for i in 0..x.r {
        let m = (0..x.c).map(|j| x.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..x.c).map(|j| (x.at(i, j) - m).exp()).sum();
        for j in 0..x.c {
            y.set(i, j, (x.at(i, j) - m).exp() / z);
        }
    }
    y
}

/// `Σ_i softmax(logits)_i · stack_i` for `stack` `[N × T × D]`, as `[D × T]`.
pub fn weighted_sum(logits: &[f64], stack: &[f64], t: usize, d: usize) -> M {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let mut out = M::zeros(d, t);
    for (i, l) in logits.iter().enumerate() {
        let e = (l - m).exp() / z;
        for tt in 0..t {
            for dd in 0..d {
                let v = out.at(dd, tt) + e * stack[(i * t + tt) * d + dd];
                out.set(dd, tt, v);
            }
        }
    }
    out
}

/// Fusion of `ssl` (`[D × T]`) and `spec` (`[F × T]`).
pub fn mscff(store: &ParamStore, name: &str, ssl: &M, spec: &M) -> M {
    let cat = ssl.vcat(spec);
    let y = conv1d(store, &format!("{name}.main"), &cat);
    let (_, slope) = p(store, &format!("{name}.main.prelu"));
    let y = y.map(|v| if v > 0.0 { v } else { slope[0] * v });
    let fp = layer_norm(store, &format!("{name}.main.norm"), &y.t()).t();
    let g_spec = conv1d(store, &format!("{name}.gate_spec"), &fp).map(sigmoid);
    let g_ssl = conv1d(store, &format!("{name}.gate_ssl"), &fp).map(sigmoid);
    let g_cat = conv1d(store, &format!("{name}.gate_concat"), &fp).map(sigmoid);
    let parts = g_spec.mul(spec).vcat(&g_ssl.mul(ssl));
    parts.add(&g_cat.mul(&fp)).map(|v| v.max(0.0))
}

pub fn mhsa(store: &ParamStore, name: &str, z: &M, heads: usize) -> M {
    let q = linear(store, &format!("{name}.q"), z);
    let k = linear(store, &format!("{name}.k"), z);
    let v = linear(store, &format!("{name}.v"), z);
    let dh = z.c / heads;
    let mut cat: Option<M> = None;
    for h in 0..heads {
        let (qh, kh, vh) = (q.cols(h * dh, dh), k.cols(h * dh, dh), v.cols(h * dh, dh));
        let s = qh.matmul(&kh.t()).map(|x| x / (dh as f64).sqrt());
        let o = softmax_rows(&s).matmul(&vh);
        cat = Some(match cat {
            None => o,
            Some(c) => c.hcat(&o),
        });
    }
    linear(store, &format!("{name}.out"), &cat.expect("at least one head"))
}

pub fn ffn(store: &ParamStore, name: &str, x: &M) -> M {
    let h = linear(store, &format!("{name}.hidden"), x).map(|v| v.max(0.0));
    linear(store, &format!("{name}.out"), &h)
}

fn mix(a: f64, b: f64, c: f64) -> f64 {
    sigmoid(0.25 * a + 0.25 * b + 0.5 * c)
}

/// Channel gate values, one per row of `f` (`[C × T]`).
pub fn sca_gate(store: &ParamStore, name: &str, f: &M) -> Vec<f64> {
    let pool_max: Vec<f64> = (0..f.r).map(|i| (0..f.c).map(|j| f.at(i, j)).fold(f64::NEG_INFINITY, f64::max)).collect();
    let pool_avg: Vec<f64> = (0..f.r).map(|i| (0..f.c).map(|j| f.at(i, j)).sum::<f64>() / f.c as f64).collect();
    let pool_add: Vec<f64> = pool_max.iter().zip(&pool_avg).map(|(a, b)| a + b).collect();
    let fc = |v: &[f64]| {
        let h = linear(store, &format!("{name}.fc1"), &M::new(1, v.len(), v.to_vec())).map(|x| x.max(0.0));
        linear(store, &format!("{name}.fc2"), &h).map(sigmoid).d
    };
    let (a, b, c) = (fc(&pool_max), fc(&pool_avg), fc(&pool_add));
    (0..f.r).map(|i| mix(a[i], b[i], c[i])).collect()
}

/// Time gate values, one per column of `f` (`[C × T]`).
pub fn sta_gate(store: &ParamStore, name: &str, f: &M) -> Vec<f64> {
    let pool_max: Vec<f64> = (0..f.c).map(|j| (0..f.r).map(|i| f.at(i, j)).fold(f64::NEG_INFINITY, f64::max)).collect();
    let pool_avg: Vec<f64> = (0..f.c).map(|j| (0..f.r).map(|i| f.at(i, j)).sum::<f64>() / f.r as f64).collect();
    let row = |v: &[f64]| M::new(1, v.len(), v.to_vec());
    let a = conv1d(store, &format!("{name}.single"), &row(&pool_max)).map(sigmoid);
    let b = conv1d(store, &format!("{name}.single"), &row(&pool_avg)).map(sigmoid);
    let c = conv1d(store, &format!("{name}.concat"), &row(&pool_max).vcat(&row(&pool_avg))).map(sigmoid);
    (0..f.c).map(|j| mix(a.d[j], b.d[j], c.d[j])).collect()
}

/// Channel then time attention on `[T × C]`.
pub fn scta(store: &ParamStore, name: &str, z: &M) -> M {
    let mut f = z.t();
    let g = sca_gate(store, &format!("{name}.sca"), &f);
    for i in 0..f.r {
        for j in 0..f.c {
            f.set(i, j, f.at(i, j) * g[i]);
        }
    }
    let g = sta_gate(store, &format!("{name}.sta"), &f);
    for i in 0..f.r {
        for j in 0..f.c {
            f.set(i, j, f.at(i, j) * g[j]);
        }
    }
    f.t()
}

/// One attention block on `[T × C]`; missing sub-blocks are the identity.
pub fn rhma(store: &ParamStore, name: &str, z: &M, heads: usize, use_mhsa: bool, use_scta: bool) -> M {
    let n = |s: &str| format!("{name}.{s}");
    let z_mhsa = if use_mhsa {
        layer_norm(store, &n("postln_a"), &mhsa(store, &n("mhsa"), z, heads).add(z))
    } else {
        z.clone()
    };
    let h = layer_norm(store, &n("postln_b"), &ffn(store, &n("ffn1"), &z_mhsa).add(&z_mhsa));
    let z1 = layer_norm(store, &n("ln_a"), &h.add(z));
    let z_scta = if use_scta {
        layer_norm(store, &n("postln_c"), &scta(store, &n("scta"), &z1).add(&z1))
    } else {
        z1.clone()
    };
    let h = layer_norm(store, &n("postln_d"), &ffn(store, &n("ffn2"), &z_scta).add(&z_scta));
    layer_norm(store, &n("ln_b"), &h.add(&z1))
}

/// Flags and sizes the reference forward needs.
pub struct NetShape {
    pub n_heads: usize,
    pub n_rhma: usize,
    pub use_mscff: bool,
    pub use_rhma: bool,
    pub use_mhsa: bool,
    pub use_scta: bool,
}

/// `(mask, enhanced)` for `mag` `[F × T]` and `stack` `[N × T × D]`.
pub fn forward(store: &ParamStore, s: &NetShape, mag: &M, stack: &[f64], d: usize) -> (M, M) {
    let (_, logits) = p(store, "ws.logits");
    let ssl = weighted_sum(&logits, stack, mag.c, d);
    let fused = if s.use_mscff { mscff(store, "mscff", &ssl, mag) } else { ssl.vcat(mag) };
    let mut z = linear(store, "down", &fused.t());
    if s.use_rhma {
        for i in 1..=s.n_rhma {
            z = rhma(store, &format!("rhma{i}"), &z, s.n_heads, s.use_mhsa, s.use_scta);
        }
    }
    let mask = linear(store, "head", &z).map(sigmoid).t();
    let enhanced = mask.mul(mag);
    (mask, enhanced)
}
