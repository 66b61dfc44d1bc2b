//! Transducer alignment-lattice loss.
//!
//! Node `(t, u)` of the lattice means "frame `t`, `u` labels emitted". From
//! it a blank advances to `(t+1, u)` and label `y_{u+1}` advances to
//! `(t, u+1)`. Every complete alignment ends with a blank emitted at
//! `(T'-1, U)`.

use crate::error::{Error, Result};
use crate::numerics::kernels::{log_add, log_softmax_row};
use crate::numerics::Tensor;

/// Joiner logits for every lattice node, `[T' × (U+1) × (V+1)]`.
#[derive(Clone, Debug)]
pub struct LogitLattice {
    pub logits: Tensor,
    pub blank_id: usize,
}

impl LogitLattice {
    pub fn new(logits: Tensor, blank_id: usize) -> Result<Self> {
        match logits.shape() {
            [t, u, v] if *t >= 1 && *u >= 1 && blank_id < *v => {}
            s => return Err(Error::shape("logit_lattice", s, &[0, 0, blank_id + 1])),
        }
        if !logits.all_finite() {
            return Err(Error::NonFinite("lattice logits".into()));
        }
        Ok(LogitLattice { logits, blank_id })
    }

    pub fn frames(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn symbols(&self) -> usize {
        self.logits.shape()[2]
    }

    fn log_probs(&self) -> Vec<f64> {
        let v = self.symbols();
        let mut out = vec![0.0; self.logits.len()];
        for (x, o) in self.logits.data().chunks(v).zip(out.chunks_mut(v)) {
            log_softmax_row(x, o);
        }
        out
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() + 1 != self.positions() {
            return Err(Error::shape(
                "rnnt_target",
                self.logits.shape(),
                &[target.len()],
            ));
        }
        for &y in target {
            if y == self.blank_id {
                return Err(Error::Contract("blank in transducer target".into()));
            }
            if y >= self.symbols() {
                return Err(Error::Vocab {
                    token: y,
                    size: self.symbols(),
                });
            }
        }
        Ok(())
    }
}

/// Log forward variables `α(t, u)`, row-major `[T' × (U+1)]`.
#[derive(Clone, Debug)]
pub struct LatticeAlphas {
    pub frames: usize,
    pub positions: usize,
    pub log_alpha: Vec<f64>,
}

impl LatticeAlphas {
    pub fn get(&self, t: usize, u: usize) -> f64 {
        self.log_alpha[t * self.positions + u]
    }
}

struct Recursions {
    lp: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_like: f64,
}

fn recursions(lattice: &LogitLattice, target: &[usize]) -> Recursions {
    let (tn, un, v) = (lattice.frames(), lattice.positions(), lattice.symbols());
    let blank = lattice.blank_id;
    let lp = lattice.log_probs();
    let at = |t: usize, u: usize, k: usize| lp[(t * un + u) * v + k];

    let mut alpha = vec![f64::NEG_INFINITY; tn * un];
    alpha[0] = 0.0;
    for t in 0..tn {
        for u in 0..un {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * un + u] + at(t - 1, u, blank);
            }
            if u > 0 {
                a = log_add(a, alpha[t * un + u - 1] + at(t, u - 1, target[u - 1]));
            }
            alpha[t * un + u] = a;
        }
    }

    let mut beta = vec![f64::NEG_INFINITY; tn * un];
    for t in (0..tn).rev() {
        for u in (0..un).rev() {
            let b = if t == tn - 1 && u == un - 1 {
                at(t, u, blank)
            } else {
                let mut b = f64::NEG_INFINITY;
                if t + 1 < tn {
                    b = beta[(t + 1) * un + u] + at(t, u, blank);
                }
                if u + 1 < un {
                    b = log_add(b, beta[t * un + u + 1] + at(t, u, target[u]));
                }
                b
            };
            beta[t * un + u] = b;
        }
    }

    let log_like = alpha[(tn - 1) * un + un - 1] + at(tn - 1, un - 1, blank);
    Recursions {
        lp,
        alpha,
        beta,
        log_like,
    }
}

/// Forward variables only.
pub fn forward_alphas(lattice: &LogitLattice, target: &[usize]) -> Result<LatticeAlphas> {
    lattice.check_target(target)?;
    let r = recursions(lattice, target);
    Ok(LatticeAlphas {
        frames: lattice.frames(),
        positions: lattice.positions(),
        log_alpha: r.alpha,
    })
}

/// Negative log marginal likelihood of `target` and its gradient with
/// respect to every lattice logit.
pub fn rnnt_loss(lattice: &LogitLattice, target: &[usize]) -> Result<(f64, Tensor)> {
    lattice.check_target(target)?;
    let (tn, un, v) = (lattice.frames(), lattice.positions(), lattice.symbols());
    let blank = lattice.blank_id;
    let Recursions {
        lp,
        alpha,
        beta,
        log_like,
    } = recursions(lattice, target);
    if !log_like.is_finite() {
        return Err(Error::NonFinite("transducer log-likelihood".into()));
    }

    // dL/dz_k = p_k·γ(t,u) − Σ_{transitions via k} exp(α + lp_k + β_next − log P)
    let mut grad = vec![0.0; tn * un * v];
    for t in 0..tn {
        for u in 0..un {
            let node = t * un + u;
            let a = alpha[node];
            let occupancy = (a + beta[node] - log_like).exp();
            let base = node * v;
            for k in 0..v {
                grad[base + k] = lp[base + k].exp() * occupancy;
            }
            let blank_next = if t + 1 < tn {
                beta[(t + 1) * un + u]
            } else if u + 1 == un {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[base + blank] -= (a + lp[base + blank] + blank_next - log_like).exp();
            if u + 1 < un {
                let y = target[u];
                grad[base + y] -= (a + lp[base + y] + beta[node + 1] - log_like).exp();
            }
        }
    }
    Ok((-log_like, Tensor::new(lattice.logits.shape().to_vec(), grad)?))
}

/// Largest `T' + U` the enumeration oracle accepts.
pub const BRUTE_FORCE_MAX_STEPS: usize = 20;

/// Loss by explicit enumeration of every alignment. Test oracle.
pub fn brute_force_loss(lattice: &LogitLattice, target: &[usize]) -> Result<f64> {
    lattice.check_target(target)?;
    let (tn, un) = (lattice.frames(), lattice.positions());
    if tn + un - 1 > BRUTE_FORCE_MAX_STEPS {
        return Err(Error::OracleSize(format!(
            "T'={tn}, U={} exceeds {BRUTE_FORCE_MAX_STEPS} lattice steps",
            un - 1
        )));
    }
    let v = lattice.symbols();
    let lp = lattice.log_probs();
    let at = |t: usize, u: usize, k: usize| lp[(t * un + u) * v + k];

    let mut total = f64::NEG_INFINITY;
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, score)) = stack.pop() {
        if u + 1 < un {
            stack.push((t, u + 1, score + at(t, u, target[u])));
        }
        let b = score + at(t, u, lattice.blank_id);
        if t + 1 < tn {
            stack.push((t + 1, u, b));
        } else if u + 1 == un {
            total = log_add(total, b);
        }
    }
    Ok(-total)
}

/// Number of complete alignments: `C(T'−1+U, U)`.
pub fn alignment_count(frames: usize, labels: usize) -> u128 {
    let n = (frames - 1 + labels) as u128;
    let k = labels.min(frames - 1) as u128;
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}
