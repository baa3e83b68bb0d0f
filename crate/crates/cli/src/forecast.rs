use std::path::Path;

use chrono::{Days, NaiveDate};
use epigraph::checkpoint::Checkpoint;
use epigraph::data::{epiweek_aggregate, EpiWeek, PanelDataset, RawWindow};
use epigraph::model::rollout;
use epigraph::Error;
use serde::Serialize;

use crate::error::{CliError, Result};

/// Rejects data the checkpoint was not trained for.
pub fn check_compatible(checkpoint: &Checkpoint, panel: &PanelDataset) -> epigraph::Result<()> {
    let (want, got) = (checkpoint.region_ids.len(), panel.n_regions());
    if want != got {
        return Err(Error::Validation(format!(
            "region count mismatch: checkpoint has {want} regions, data has {got}"
        )));
    }
    for (i, (a, b)) in checkpoint.region_ids.iter().zip(panel.region_ids()).enumerate() {
        if a != b {
            return Err(Error::Validation(format!(
                "region {} mismatch: checkpoint has `{a}`, data has `{b}`",
                i + 1
            )));
        }
    }
    let k = checkpoint.params.config.window;
    if panel.n_days() < k {
        return Err(Error::Validation(format!(
            "window length mismatch: checkpoint needs {k} days, data has {}",
            panel.n_days()
        )));
    }
    Ok(())
}

/// Daily predictions after `origin`, with their epi-week sums.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForecastReport {
    pub origin: NaiveDate,
    pub horizon: usize,
    pub regions: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// One row per date, one value per region.
    pub daily: Vec<Vec<f64>>,
    /// Weeks cut by the forecast span are flagged `partial`.
    pub epiweeks: Vec<EpiWeek>,
}

/// Rolls the model forward `horizon` days from the window ending on `origin`.
pub fn forecast(
    checkpoint: &Checkpoint,
    panel: &PanelDataset,
    origin: NaiveDate,
    horizon: usize,
) -> epigraph::Result<ForecastReport> {
    check_compatible(checkpoint, panel)?;
    let idx = panel.day_index(origin).ok_or_else(|| {
        Error::Contract(format!(
            "origin {origin} outside data range {}..={}",
            panel.start_date(),
            panel.end_date()
        ))
    })?;
    let k = checkpoint.params.config.window;
    if idx + 1 < k {
        return Err(Error::Contract(format!(
            "origin {origin} leaves fewer than {k} days of history"
        )));
    }
    let seed = RawWindow::from_panel(panel, idx + 1, k)?;
    let steps = rollout(&checkpoint.params, &checkpoint.stats, &seed, horizon, None)?;
    let dates: Vec<NaiveDate> = (1..=horizon as u64).map(|d| origin + Days::new(d)).collect();
    let daily: Vec<Vec<f64>> = steps.into_iter().map(|s| s.day.daily).collect();
    let epiweeks = epiweek_aggregate(&daily, &dates)?;
    Ok(ForecastReport {
        origin,
        horizon,
        regions: panel.region_ids().to_vec(),
        dates,
        daily,
        epiweeks,
    })
}

impl ForecastReport {
    /// CSV `date,region,predicted_cases`.
    pub fn write_daily_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        write_row(&mut w, &["date", "region", "predicted_cases"])?;
        for (date, row) in self.dates.iter().zip(&self.daily) {
            for (region, v) in self.regions.iter().zip(row) {
                write_row(&mut w, &[&date.to_string(), region, &v.to_string()])?;
            }
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }

    /// CSV `epiweek_start,region,days,partial,predicted_cases`.
    pub fn write_epiweek_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        write_row(&mut w, &["epiweek_start", "region", "days", "partial", "predicted_cases"])?;
        for week in &self.epiweeks {
            for (region, v) in self.regions.iter().zip(&week.totals) {
                write_row(
                    &mut w,
                    &[
                        &week.start.to_string(),
                        region,
                        &week.days.to_string(),
                        &week.partial.to_string(),
                        &v.to_string(),
                    ],
                )?;
            }
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_row(w: &mut csv::Writer<std::fs::File>, row: &[&str]) -> Result<()> {
    w.write_record(row).map_err(|e| CliError::Core(e.into()))
}
