use std::path::Path;

use serde::Serialize;

use super::{clip_global_norm, lr_at, multitask_loss, LossWeights, RmsProp, TrainConfig};
use crate::checkpoint::{AttentionSummary, Checkpoint};
use crate::data::{build_windows, normalize, NormalizationStats, NormalizedPanel, PanelDataset, WindowSample};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{forward, ModelParams, ModelVars};

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean training-window loss over the epoch's optimizer steps.
    pub train_loss: f64,
    /// Mean validation-window loss after the epoch's updates.
    pub val_loss: f64,
}

/// Normalized windows split chronologically into training and validation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub stats: NormalizationStats,
    pub normalized: NormalizedPanel,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    /// Days `[0, stats_days)` fed the normalization statistics.
    pub stats_days: usize,
}

pub fn prepare(panel: &PanelDataset, config: &TrainConfig) -> Result<Prepared> {
    config.validate()?;
    let k = config.window;
    if panel.n_days() < k + 2 {
        return Err(Error::Domain(format!(
            "{} days are too few for window {k}: training and validation each need a window",
            panel.n_days()
        )));
    }
    let n_windows = panel.n_days() - k;
    let n_val = ((n_windows as f64 * config.val_fraction).round() as usize).clamp(1, n_windows - 1);
    let n_train = n_windows - n_val;
    // inputs and targets of every training window
    let stats_days = n_train + k;
    let stats = NormalizationStats::fit(panel, 0..stats_days)?;
    let (normalized, _) = normalize(panel, Some(&stats))?;
    let mut windows = build_windows(&normalized, k)?;
    let val = windows.split_off(n_train);
    Ok(Prepared {
        stats,
        normalized,
        train: windows,
        val,
        stats_days,
    })
}

fn window_loss(tape: &mut Tape, vars: &ModelVars, w: &WindowSample, weights: LossWeights) -> Result<Var> {
    let out = vars.forward(tape, &w.input)?;
    let tc = tape.constant(w.target_cases.detached());
    let tm = tape.constant(w.target_mobility.detached());
    multitask_loss(tape, out.cases_next, tc, out.mobility_next, tm, weights)
}

/// Mean multitask loss of `params` over `windows`.
pub fn dataset_loss(params: &ModelParams, windows: &[WindowSample], weights: LossWeights) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Domain("loss over an empty window set".into()));
    }
    let mut total = 0.0;
    for w in windows {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        let loss = window_loss(&mut tape, &vars, w, weights)?;
        total += tape.value(loss)?.item()?;
    }
    Ok(total / windows.len() as f64)
}

fn attention_summary(params: &ModelParams, windows: &[WindowSample]) -> Result<AttentionSummary> {
    let k = params.config.window;
    let mut case = params.case_attention.as_ref().map(|_| vec![0.0; k]);
    let mut mobility = params.mobility_attention.as_ref().map(|_| vec![0.0; k]);
    for w in windows {
        let out = forward(params, &w.input)?;
        for (acc, weights) in [(&mut case, &out.case_attention), (&mut mobility, &out.mobility_attention)] {
            if let (Some(acc), Some(weights)) = (acc.as_mut(), weights) {
                for (a, v) in acc.iter_mut().zip(weights.data()) {
                    *a += v / windows.len() as f64;
                }
            }
        }
    }
    Ok(AttentionSummary { case, mobility })
}

/// Outcome of [`fit`]: the best-validation checkpoint and the per-epoch log.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Weights after the last epoch, which may differ from the checkpoint.
    pub final_params: ModelParams,
}

/// Trains a fresh model on `panel`, returning the parameters with the lowest
/// validation loss.
pub fn fit(panel: &PanelDataset, config: &TrainConfig) -> Result<FitResult> {
    let prepared = prepare(panel, config)?;
    let weights = config.weights();
    let mut params = ModelParams::new(config.model_config(panel.n_regions()), config.seed)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut optimizer = RmsProp::new(params.named_tensors().into_iter().map(|(_, t)| t), config.rho, config.epsilon);
    let batch = config.batch_size.unwrap_or(prepared.train.len()).min(prepared.train.len());

    let make_checkpoint = |params: &ModelParams, epoch: usize, val: f64| Checkpoint {
        params: params.clone(),
        stats: prepared.stats,
        region_ids: panel.region_ids().to_vec(),
        attention: AttentionSummary::default(),
        best_epoch: Some(epoch),
        best_val_loss: Some(val),
    };

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut train_total = 0.0;
        for chunk in prepared.train.chunks(batch) {
            let mut batch_total = 0.0;
            let mut grads: Vec<Tensor> = params
                .named_tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            for w in chunk {
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape)?;
                let loss = window_loss(&mut tape, &vars, w, weights)?;
                batch_total += tape.value(loss)?.item()?;
                let scaled = tape.scale(loss, 1.0 / chunk.len() as f64)?;
                let g = tape.backward(scaled)?;
                for (acc, gi) in grads.iter_mut().zip(g.iter()) {
                    for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            if !batch_total.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    reason: format!("training loss became {batch_total}"),
                    last_good: best.map(Box::new),
                });
            }
            train_total += batch_total;
            if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
                return Err(Error::NonFiniteGradient { param: names[i].clone() });
            }
            clip_global_norm(&mut grads, config.clip_norm);
            let mut slots = params.tensors_mut();
            optimizer.step(&mut slots, &grads, lr)?;
            if let Some(i) = slots.iter().position(|t| !t.all_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    reason: format!("parameter `{}` became non-finite after an update", names[i]),
                    last_good: best.map(Box::new),
                });
            }
        }
        let train_loss = train_total / prepared.train.len() as f64;
        let val_loss = dataset_loss(&params, &prepared.val, weights)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                reason: format!("validation loss became {val_loss}"),
                last_good: best.map(Box::new),
            });
        }
        log::debug!("epoch {} lr {lr:e} train {train_loss:.6} val {val_loss:.6}", epoch + 1);
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.best_val_loss.unwrap_or(f64::INFINITY)) {
            best = Some(make_checkpoint(&params, epoch + 1, val_loss));
        }
    }
    let mut checkpoint = best.expect("at least one epoch ran");
    checkpoint.attention = attention_summary(&checkpoint.params, &prepared.val)?;
    Ok(FitResult {
        checkpoint,
        log,
        final_params: params,
    })
}

/// Writes the log as CSV `epoch,lr,train_loss,val_loss`.
pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
