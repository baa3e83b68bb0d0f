use std::ops::Range;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::panel::{weekday_index, PanelDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Standard deviations below this mark a channel as constant.
pub const MIN_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Log1p,
    Log,
}

impl Transform {
    fn forward(self, x: f64) -> f64 {
        match self {
            Transform::Log1p => x.ln_1p(),
            Transform::Log => x.ln(),
        }
    }

    fn inverse(self, y: f64) -> f64 {
        match self {
            Transform::Log1p => y.exp_m1(),
            Transform::Log => y.exp(),
        }
    }
}

/// Log transform followed by a z-score. A constant channel passes through untouched.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub transform: Transform,
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

impl ChannelStats {
    pub fn fit(values: impl IntoIterator<Item = f64>, transform: Transform) -> Self {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let transformed: Vec<f64> = values.into_iter().map(|v| transform.forward(v)).collect();
        for &y in &transformed {
            n += 1;
            sum += y;
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        for &y in &transformed {
            sum_sq += (y - mean) * (y - mean);
        }
        let std = if n == 0 { 0.0 } else { (sum_sq / n as f64).sqrt() };
        let constant = !(std > MIN_STD) || !std.is_finite();
        ChannelStats {
            transform,
            mean,
            std,
            constant,
        }
    }

    pub fn encode(&self, x: f64) -> f64 {
        if self.constant {
            x
        } else {
            (self.transform.forward(x) - self.mean) / self.std
        }
    }

    pub fn decode(&self, z: f64) -> f64 {
        if self.constant {
            z
        } else {
            self.transform.inverse(z * self.std + self.mean)
        }
    }
}

/// Per-channel statistics, fitted on a training range of days.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub daily_cases: ChannelStats,
    pub cumulative_cases: ChannelStats,
    pub mobility: ChannelStats,
    pub population: ChannelStats,
}

impl NormalizationStats {
    /// Fits statistics on days `days` only; values outside the range never
    /// influence the result.
    pub fn fit(panel: &PanelDataset, days: Range<usize>) -> Result<Self> {
        if days.start >= days.end || days.end > panel.n_days() {
            return Err(Error::Domain(format!(
                "normalization range {days:?} outside panel of {} days",
                panel.n_days()
            )));
        }
        let daily = &panel.daily_cases()[days.clone()];
        let cumulative = &panel.cumulative_cases()[days.clone()];
        let mobility = &panel.mobility()[days];
        Ok(NormalizationStats {
            daily_cases: ChannelStats::fit(daily.iter().flatten().copied(), Transform::Log1p),
            cumulative_cases: ChannelStats::fit(cumulative.iter().flatten().copied(), Transform::Log1p),
            mobility: ChannelStats::fit(
                mobility.iter().flat_map(|m| m.data().iter().copied()),
                Transform::Log1p,
            ),
            population: ChannelStats::fit(panel.population().iter().copied(), Transform::Log),
        })
    }
}

/// Width of the per-node case-stream feature row.
pub const CASE_FEATURES: usize = 3;
pub const WEEKDAYS: usize = 7;

/// Width of the per-node mobility-stream feature row for `n` regions.
pub fn mobility_feature_width(n: usize) -> usize {
    n + 1 + WEEKDAYS
}

/// Encoded features of a single day.
#[derive(Clone, Debug, PartialEq)]
pub struct DayFeatures {
    /// N×3: daily cases, cumulative cases, population.
    pub cases: Tensor,
    /// N×(N+8): mobility outflow row, cumulative cases, weekday one-hot.
    pub mobility: Tensor,
    /// N×N normalized mobility, the mobility target encoding.
    pub mobility_z: Tensor,
}

pub fn encode_day(
    stats: &NormalizationStats,
    daily: &[f64],
    cumulative: &[f64],
    mobility: &Tensor,
    population: &[f64],
    date: NaiveDate,
) -> DayFeatures {
    let n = daily.len();
    let mobility_z = mobility.map(|v| stats.mobility.encode(v));
    let weekday = weekday_index(date);
    let mut cases = Tensor::zeros(n, CASE_FEATURES);
    let width = mobility_feature_width(n);
    let mut mob = Tensor::zeros(n, width);
    for i in 0..n {
        let cum_z = stats.cumulative_cases.encode(cumulative[i]);
        cases.set(i, 0, stats.daily_cases.encode(daily[i]));
        cases.set(i, 1, cum_z);
        cases.set(i, 2, stats.population.encode(population[i]));
        for j in 0..n {
            mob.set(i, j, mobility_z.get(i, j));
        }
        mob.set(i, n, cum_z);
        mob.set(i, n + 1 + weekday, 1.0);
    }
    DayFeatures {
        cases,
        mobility: mob,
        mobility_z,
    }
}

/// A panel with every day encoded under fixed statistics.
#[derive(Clone, Debug)]
pub struct NormalizedPanel {
    pub stats: NormalizationStats,
    pub dates: Vec<NaiveDate>,
    pub days: Vec<DayFeatures>,
    pub raw_mobility: Vec<Tensor>,
}

impl NormalizedPanel {
    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_regions(&self) -> usize {
        self.days.first().map_or(0, |d| d.cases.rows())
    }
}

/// Encodes `panel`. Without `stats`, statistics are fitted on the whole panel;
/// callers that hold out data pass statistics fitted on the training range.
pub fn normalize(panel: &PanelDataset, stats: Option<&NormalizationStats>) -> Result<(NormalizedPanel, NormalizationStats)> {
    let stats = match stats {
        Some(s) => *s,
        None => NormalizationStats::fit(panel, 0..panel.n_days())?,
    };
    let days = (0..panel.n_days())
        .map(|t| {
            encode_day(
                &stats,
                &panel.daily_cases()[t],
                &panel.cumulative_cases()[t],
                &panel.mobility()[t],
                panel.population(),
                panel.dates()[t],
            )
        })
        .collect();
    Ok((
        NormalizedPanel {
            stats,
            dates: panel.dates().to_vec(),
            days,
            raw_mobility: panel.mobility().to_vec(),
        },
        stats,
    ))
}

/// Inverse of the daily-case encoding applied to every entry.
pub fn denormalize_cases(stats: &NormalizationStats, z: &Tensor) -> Tensor {
    z.map(|v| stats.daily_cases.decode(v))
}

pub fn denormalize_mobility(stats: &NormalizationStats, z: &Tensor) -> Tensor {
    z.map(|v| stats.mobility.decode(v))
}
