//! Shared training plumbing: AdamW with cosine decay, seeded epoch
//! shuffling and loss logs.

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct Optimizer {
    inner: AdamW,
    base_lr: f64,
    total_steps: usize,
    step: usize,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64, total_steps: usize) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay,
            ..Default::default()
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
            base_lr: lr,
            total_steps,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }

    /// Backpropagates `loss` and updates the registered variables only.
    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        let lr = self.current_lr();
        self.inner.set_learning_rate(lr);
        self.inner.backward_step(loss)?;
        self.step += 1;
        Ok(())
    }
}

/// Deterministic permutation of `0..n` for `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

pub fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub entries: Vec<LossEntry>,
}

impl LossLog {
    pub fn push(&mut self, phase: &str, epoch: usize, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::State(format!("{phase}: non-finite loss at step {step}")));
        }
        self.entries.push(LossEntry {
            phase: phase.to_string(),
            epoch,
            step,
            loss,
        });
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Mean loss of each epoch for `phase`.
    pub fn epoch_means(&self, phase: &str) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for e in self.entries.iter().filter(|e| e.phase == phase) {
            if sums.len() <= e.epoch {
                sums.resize(e.epoch + 1, (0.0, 0));
            }
            sums[e.epoch].0 += e.loss;
            sums[e.epoch].1 += 1;
        }
        sums.into_iter().filter(|s| s.1 > 0).map(|(s, n)| s / n as f64).collect()
    }
}
