//! Multitask loss, RMSProp with step decay, the training loop and
//! forecast evaluation.

mod eval;
mod fit;

pub use eval::{evaluate_forecaster, evaluate_holdout, evaluate_mae, EvalReport, EvalRow, HoldoutReport};
pub use fit::{dataset_loss, fit, prepare, write_train_log, EpochLog, FitResult, Prepared};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{EdgeMode, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub window: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub edge_mode: EdgeMode,
    pub attention_enabled: bool,
    /// Share of windows, taken from the end, used for validation.
    pub val_fraction: f64,
    /// Windows per optimizer step, taken in chronological order; `None` uses
    /// every training window.
    pub batch_size: Option<usize>,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            base_lr: 1e-3,
            decay_every: 10,
            decay_factor: 0.9,
            w1: 1.0,
            w2: 1.0,
            w3: 0.5,
            window: 15,
            seed: 0,
            clip_norm: 5.0,
            edge_mode: EdgeMode::Learned,
            attention_enabled: true,
            val_fraction: 0.1,
            batch_size: Some(8),
            rho: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w >= 0.0) || !w.is_finite() {
                return bad(format!("{name} must be finite and nonnegative, got {w}"));
            }
        }
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0) || self.decay_every == 0 {
            return bad("learning rate, decay factor and decay interval must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.epsilon > 0.0) {
            return bad("rho must lie in [0, 1) and epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, n_regions: usize) -> ModelConfig {
        ModelConfig {
            edge_mode: self.edge_mode,
            attention_enabled: self.attention_enabled,
            ..ModelConfig::new(n_regions, self.window)
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

/// `w1·MAE(cases) + w2·MSE(cases) + w3·MSE(mobility)`.
pub fn multitask_loss(
    tape: &mut Tape,
    pred_cases: Var,
    true_cases: Var,
    pred_mobility: Var,
    true_mobility: Var,
    w: LossWeights,
) -> Result<Var> {
    for (p, t, op) in [
        (pred_cases, true_cases, "multitask_loss cases"),
        (pred_mobility, true_mobility, "multitask_loss mobility"),
    ] {
        let (ps, ts) = (tape.shape(p)?, tape.shape(t)?);
        if ps != ts {
            return Err(Error::Shape { op, lhs: ps, rhs: ts });
        }
    }
    let rc = tape.sub(pred_cases, true_cases)?;
    let rm = tape.sub(pred_mobility, true_mobility)?;
    let mae = tape.reduce(Reduction::MeanAbs, rc)?;
    let mse = tape.reduce(Reduction::MeanSq, rc)?;
    let mob = tape.reduce(Reduction::MeanSq, rm)?;
    let a = tape.scale(mae, w.w1)?;
    let b = tape.scale(mse, w.w2)?;
    let c = tape.scale(mob, w.w3)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Value-only form of [`multitask_loss`].
pub fn multitask_loss_value(
    pred_cases: &Tensor,
    true_cases: &Tensor,
    pred_mobility: &Tensor,
    true_mobility: &Tensor,
    w: LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [pred_cases, true_cases, pred_mobility, true_mobility].map(|t| tape.constant(t.detached()));
    let loss = multitask_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], w)?;
    tape.value(loss)?.item()
}

/// `base_lr · decay_factor^⌊epoch / decay_every⌋`.
///
/// Both inputs are taken at their shortest decimal form and the product is
/// rounded once, so `1e-3 · 0.9²` is exactly `8.1e-4`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let decays = (epoch / config.decay_every) as u32;
    decimal_pow_product(config.base_lr, config.decay_factor, decays)
        .unwrap_or_else(|| config.base_lr * config.decay_factor.powi(decays as i32))
}

/// Shortest round-trip decimal digits and exponent of a positive finite value.
fn decimal_parts(x: f64) -> Option<(u128, i32)> {
    if !(x > 0.0 && x.is_finite()) {
        return None;
    }
    let s = format!("{x:e}");
    let (mantissa, exp) = s.split_once('e')?;
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits = format!("{int}{frac}").parse().ok()?;
    Some((digits, exp.parse::<i32>().ok()? - frac.len() as i32))
}

fn decimal_pow_product(base: f64, factor: f64, n: u32) -> Option<f64> {
    let (mut digits, mut exp) = decimal_parts(base)?;
    let (f_digits, f_exp) = decimal_parts(factor)?;
    for _ in 0..n {
        digits = digits.checked_mul(f_digits)?;
        exp += f_exp;
    }
    format!("{digits}e{exp}").parse().ok()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// RMSProp without momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub rho: f64,
    pub epsilon: f64,
    /// Running mean of squared gradients, one per parameter.
    pub mean_sq: Vec<Tensor>,
}

impl RmsProp {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, rho: f64, epsilon: f64) -> Self {
        RmsProp {
            rho,
            epsilon,
            mean_sq: params.into_iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// `v ← ρv + (1−ρ)g²`, `p ← p − lr·g/(√v + ε)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.mean_sq.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.mean_sq.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.mean_sq) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "rmsprop_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.rho * *vv + (1.0 - self.rho) * gv * gv;
                *pv -= lr * gv / (vv.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
