//! Optimizer, learning-rate schedules and the training recipes.

mod recipes;

pub use recipes::{
    dev_loss_rnnt, finetune_coldfusion, fit_lm, fit_rnnt, lm_perplexity, train_lm, train_rnnt,
    CfMode, ColdFusionRun, EpochLog, TrainConfig, TrainLog,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Parameterized;

/// Hold the base rate, then decay geometrically once per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub hold_epochs: usize,
    pub decay: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.hold_epochs {
            self.base_lr
        } else {
            self.base_lr * self.decay.powi((epoch - self.hold_epochs + 1) as i32)
        }
    }
}

/// Parameter-name patterns. A pattern ending in `*` matches by prefix,
/// anything else must match exactly.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSet(pub Vec<String>);

impl FreezeSet {
    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|p| match p.strip_suffix('*') {
            Some(prefix) => name.starts_with(prefix),
            None => name == p,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam {
    config: AdamConfig,
    steps: u64,
    skipped: usize,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            skipped: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates rejected because some gradient was not finite.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// One bias-corrected update from the parameters' gradient buffers,
    /// which are cleared afterwards. Frozen parameters and their moments are
    /// not touched; parameters without a gradient count as zero gradient.
    /// Returns false when the step was skipped for a non-finite gradient.
    pub fn step<P: Parameterized + ?Sized>(&mut self, params: &mut P, lr: f64, frozen: &FreezeSet) -> Result<bool> {
        let mut list = params.params_mut();
        let finite = list
            .iter()
            .filter(|(n, _)| !frozen.contains(n))
            .all(|(_, p)| p.grad().map_or(true, |g| g.iter().all(|x| x.is_finite())));
        if !finite {
            self.skipped += 1;
            log::warn!("skipping update {}: non-finite gradient", self.steps + 1);
            for (_, p) in list.iter_mut() {
                p.zero_grad();
            }
            return Ok(false);
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, p) in list.iter_mut() {
            if frozen.contains(name) {
                p.zero_grad();
                continue;
            }
            let n = p.len();
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if mo.m.len() != n {
                return Err(Error::shape("adam", &[mo.m.len()], &[n]));
            }
            let data = p.data_mut();
            for i in 0..n {
                let g = grad[i];
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g;
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g * g;
                data[i] -= lr * (mo.m[i] / c1) / ((mo.v[i] / c2).sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(true)
    }
}

/// Rescales the gradients of non-frozen parameters so that their global
/// L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameterized + ?Sized>(params: &mut P, max_norm: f64, frozen: &FreezeSet) -> f64 {
    let mut list = params.params_mut();
    let norm = list
        .iter()
        .filter(|(n, _)| !frozen.contains(n))
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let c = max_norm / norm;
        for (name, p) in list.iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= c);
            }
        }
    }
    norm
}
