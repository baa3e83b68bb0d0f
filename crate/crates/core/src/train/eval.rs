use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::Serialize;

use crate::data::{NormalizationStats, PanelDataset, RawWindow};
use crate::error::{Error, Result};
use crate::model::{rollout, ModelParams};

/// Region-mean absolute error of one epi-week forecast.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub epiweek_start: NaiveDate,
    pub horizon_days: usize,
    pub model_mae: f64,
    pub persistence_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Week and horizon pairs that could not be scored, with the reason.
    pub skipped: Vec<String>,
}

impl EvalReport {
    /// Mean `(model, persistence)` MAE over rows with this horizon.
    pub fn mean_for(&self, horizon_days: usize) -> Option<(f64, f64)> {
        let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.horizon_days == horizon_days).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.model_mae).sum::<f64>() / n,
            rows.iter().map(|r| r.persistence_mae).sum::<f64>() / n,
        ))
    }

    /// CSV `epiweek_start,horizon_days,model_mae,persistence_mae`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn week_totals(panel: &PanelDataset, days: Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; panel.n_regions()];
    for row in &panel.daily_cases()[days] {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Scores epi-week totals forecast `h` days ahead for every complete epi-week
/// inside `eval_days`.
///
/// For a week ending on day `e`, `forecast(e - h, h)` receives the index of
/// the last observed day and returns `h` predicted daily rows; the last seven
/// are summed. The persistence baseline reuses the seven observed days ending
/// on `e - h`. Weeks whose origin leaves fewer than `window` (or seven) days
/// of history are skipped.
pub fn evaluate_forecaster<F>(
    panel: &PanelDataset,
    eval_days: Range<usize>,
    horizons: &[usize],
    window: usize,
    mut forecast: F,
) -> Result<EvalReport>
where
    F: FnMut(usize, usize) -> Result<Vec<Vec<f64>>>,
{
    if eval_days.end > panel.n_days() || eval_days.is_empty() {
        return Err(Error::Contract(format!(
            "evaluation days {eval_days:?} fall outside a {}-day panel",
            panel.n_days()
        )));
    }
    if let Some(h) = horizons.iter().find(|&&h| h < 7) {
        return Err(Error::Contract(format!("horizon {h} is shorter than a week")));
    }
    let dates = panel.dates();
    let mut report = EvalReport::default();
    let first_sunday = eval_days
        .clone()
        .find(|&d| dates[d].weekday() == Weekday::Sun)
        .unwrap_or(eval_days.end);
    for start in (first_sunday..eval_days.end).step_by(7) {
        let end = start + 6;
        if end >= eval_days.end {
            break;
        }
        let truth = week_totals(panel, start..end + 1);
        for &h in horizons {
            if end + 1 < h + window.max(7) {
                report.skipped.push(format!(
                    "week of {} at horizon {h}: not enough history before the forecast origin",
                    dates[start]
                ));
                continue;
            }
            let origin = end - h;
            let rows = forecast(origin, h)?;
            if rows.len() != h || rows.iter().any(|r| r.len() != panel.n_regions()) {
                return Err(Error::Contract(format!(
                    "forecaster returned {} rows for horizon {h}",
                    rows.len()
                )));
            }
            let mut predicted = vec![0.0; panel.n_regions()];
            for row in &rows[h - 7..] {
                for (p, v) in predicted.iter_mut().zip(row) {
                    *p += v;
                }
            }
            let persistence = week_totals(panel, origin - 6..origin + 1);
            report.rows.push(EvalRow {
                epiweek_start: dates[start],
                horizon_days: h,
                model_mae: mae(&predicted, &truth),
                persistence_mae: mae(&persistence, &truth),
            });
        }
    }
    Ok(report)
}

/// [`evaluate_forecaster`] driven by model rollouts.
pub fn evaluate_mae(
    params: &ModelParams,
    stats: &NormalizationStats,
    panel: &PanelDataset,
    eval_days: Range<usize>,
    horizons: &[usize],
) -> Result<EvalReport> {
    let k = params.config.window;
    evaluate_forecaster(panel, eval_days, horizons, k, |origin, h| {
        let seed = RawWindow::from_panel(panel, origin + 1, k)?;
        Ok(rollout(params, stats, &seed, h, None)?
            .into_iter()
            .map(|s| s.day.daily)
            .collect())
    })
}

/// Daily forecast over the final days of a panel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HoldoutReport {
    /// Last observed day fed to the model.
    pub origin: NaiveDate,
    pub days: usize,
    /// Mean absolute error over days and regions.
    pub model_mae: f64,
    /// Same, for repeating each region's last observed daily count.
    pub persistence_mae: f64,
    /// Predicted daily cases, one row per held-out day.
    pub predicted: Vec<Vec<f64>>,
}

/// Rolls out over the last `holdout_days` days from the window just before them.
pub fn evaluate_holdout(
    params: &ModelParams,
    stats: &NormalizationStats,
    panel: &PanelDataset,
    holdout_days: usize,
) -> Result<HoldoutReport> {
    let k = params.config.window;
    let t = panel.n_days();
    if holdout_days == 0 || holdout_days + k > t {
        return Err(Error::Contract(format!(
            "cannot hold out {holdout_days} of {t} days with window {k}"
        )));
    }
    let origin = t - holdout_days;
    let seed = RawWindow::from_panel(panel, origin, k)?;
    let steps = rollout(params, stats, &seed, holdout_days, None)?;
    let last = &panel.daily_cases()[origin - 1];
    let (mut model, mut naive) = (0.0, 0.0);
    for (step, truth) in steps.iter().zip(&panel.daily_cases()[origin..]) {
        model += mae(&step.day.daily, truth);
        naive += mae(last, truth);
    }
    Ok(HoldoutReport {
        origin: panel.dates()[origin - 1],
        days: holdout_days,
        model_mae: model / holdout_days as f64,
        persistence_mae: naive / holdout_days as f64,
        predicted: steps.into_iter().map(|s| s.day.daily).collect(),
    })
}
