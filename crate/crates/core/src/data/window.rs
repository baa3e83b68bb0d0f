use chrono::NaiveDate;

use super::normalize::{encode_day, NormalizationStats, NormalizedPanel};
use super::panel::PanelDataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::StepInput;

/// One training instance: `K` input days and the day right after them.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub input: StepInput,
    /// N×1 normalized daily cases of the target day.
    pub target_cases: Tensor,
    /// N×N normalized mobility of the target day.
    pub target_mobility: Tensor,
    /// Index of the first input day.
    pub start: usize,
    /// Index of the target day, always `start + K`.
    pub target_day: usize,
}

/// `(start, target_day)` for every window of length `k` over `n_days` days.
pub fn window_spans(n_days: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(Error::Domain("window length must be at least 1".into()));
    }
    if n_days <= k {
        return Err(Error::Domain(format!(
            "{n_days} days cannot hold a window of {k} days plus a target"
        )));
    }
    Ok((0..n_days - k).map(|s| (s, s + k)).collect())
}

fn step_input(norm: &NormalizedPanel, start: usize, k: usize) -> StepInput {
    let days = &norm.days[start..start + k];
    StepInput {
        case_features: days.iter().map(|d| d.cases.clone()).collect(),
        mobility_window: norm.raw_mobility[start..start + k].to_vec(),
        mobility_features: days.iter().map(|d| d.mobility.clone()).collect(),
    }
}

pub fn build_windows(norm: &NormalizedPanel, k: usize) -> Result<Vec<WindowSample>> {
    window_spans(norm.n_days(), k)?
        .into_iter()
        .map(|(start, target_day)| {
            let target = &norm.days[target_day];
            let n = target.cases.rows();
            let target_cases = Tensor::new(n, 1, (0..n).map(|i| target.cases.get(i, 0)).collect())?;
            Ok(WindowSample {
                input: step_input(norm, start, k),
                target_cases,
                target_mobility: target.mobility_z.clone(),
                start,
                target_day,
            })
        })
        .collect()
}

/// One day of the raw rollout window.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDay {
    pub date: NaiveDate,
    pub daily: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub mobility: Tensor,
}

/// The `K` most recent days in raw units, re-encoded before every step.
#[derive(Clone, Debug, PartialEq)]
pub struct RawWindow {
    pub days: Vec<RawDay>,
    pub population: Vec<f64>,
}

impl RawWindow {
    /// The `k` days ending just before day index `end`.
    pub fn from_panel(panel: &PanelDataset, end: usize, k: usize) -> Result<Self> {
        if k == 0 || end < k || end > panel.n_days() {
            return Err(Error::Contract(format!(
                "cannot take {k} days ending before day {end} of a {}-day panel",
                panel.n_days()
            )));
        }
        let days = (end - k..end)
            .map(|t| RawDay {
                date: panel.dates()[t],
                daily: panel.daily_cases()[t].clone(),
                cumulative: panel.cumulative_cases()[t].clone(),
                mobility: panel.mobility()[t].clone(),
            })
            .collect();
        Ok(RawWindow {
            days,
            population: panel.population().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn last(&self) -> &RawDay {
        self.days.last().expect("window is nonempty")
    }

    pub fn encode(&self, stats: &NormalizationStats) -> StepInput {
        let mut input = StepInput {
            case_features: Vec::with_capacity(self.len()),
            mobility_window: Vec::with_capacity(self.len()),
            mobility_features: Vec::with_capacity(self.len()),
        };
        for d in &self.days {
            let f = encode_day(stats, &d.daily, &d.cumulative, &d.mobility, &self.population, d.date);
            input.case_features.push(f.cases);
            input.mobility_features.push(f.mobility);
            input.mobility_window.push(d.mobility.clone());
        }
        input
    }

    /// Appends `day` and drops the oldest day.
    pub fn advance(&mut self, day: RawDay) {
        self.days.remove(0);
        self.days.push(day);
    }
}
