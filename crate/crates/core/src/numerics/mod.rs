//! Dense tensors and reverse-mode automatic differentiation.

mod forward;
mod graph;
pub mod kernels;
mod tape;
mod tensor;

pub use graph::{Eager, Graph};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Anything owning named trainable tensors.
///
/// Names are hierarchical (`encoder.lstm.0.w_ih`) and unique; the order
/// returned is stable and defines the checkpoint layout.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

impl Parameterized for Vec<Tensor> {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }
}

/// Compares tape gradients with fourth-order central finite differences.
///
/// `f` builds a scalar on the given tape, registering the parameters it
/// uses with [`Graph::param`]. Returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` over every
/// parameter element.
pub fn grad_check<P, F>(params: &mut P, epsilon: f64, f: F) -> Result<f64>
where
    P: Parameterized + ?Sized,
    F: Fn(&Tape, &P) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Contract("grad_check epsilon must be positive".into()));
    }
    let eval = |p: &P| -> Result<f64> {
        let tape = Tape::new();
        let root = f(&tape, p)?;
        let v = tape.value(&root).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let root = f(&tape, params)?;
        if !tape.value(&root).item()?.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        let grads = tape.backward(&root)?;
        params
            .params()
            .iter()
            .map(|(_, p)| {
                grads
                    .for_param(p)
                    .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
            })
            .collect()
    };

    let mut worst = 0.0f64;
    let count = params.params().len();
    for pi in 0..count {
        let len = params.params()[pi].1.len();
        for k in 0..len {
            let orig = params.params()[pi].1.data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                params.params_mut()[pi].1.data_mut()[k] = orig + offset;
                eval(params)
            };
            let (up1, down1) = (at(epsilon)?, at(-epsilon)?);
            let (up2, down2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            params.params_mut()[pi].1.data_mut()[k] = orig;
            let numeric = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * epsilon);
            let a = analytic[pi][k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
