use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{MobilityTransform, PolicyScenario, TransformKind};
use crate::data::{NormalizationStats, PanelDataset, RawWindow};
use crate::error::{Error, Result};
use crate::model::{rollout, ModelParams};

/// Parses the scenario text format, one transform per line:
///
/// ```text
/// # comment
/// scale 0.5 from 2020-08-01 to 2020-09-30
/// cut_interstate from 2020-08-15
/// isolate R03
/// ```
///
/// `from` and `to` are optional, inclusive, and may appear in either order.
pub fn parse_scenario(text: &str, path: &str) -> Result<PolicyScenario> {
    let mut transforms = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let keyword = tokens.next().expect("nonempty line");
        let mut rest: Vec<&str> = tokens.collect();
        let kind = match keyword {
            "scale" => {
                if rest.is_empty() {
                    return Err(err("`scale` needs a factor".into()));
                }
                let arg = rest.remove(0);
                let factor: f64 = arg.parse().map_err(|_| err(format!("bad scale factor `{arg}`")))?;
                if !(factor >= 0.0) || !factor.is_finite() {
                    return Err(err(format!("scale factor must be finite and nonnegative, got {arg}")));
                }
                TransformKind::Scale { factor }
            }
            "cut_interstate" => TransformKind::CutInterstate,
            "isolate" => {
                if rest.is_empty() || rest[0] == "from" || rest[0] == "to" {
                    return Err(err("`isolate` needs a region id".into()));
                }
                TransformKind::Isolate {
                    region: rest.remove(0).to_string(),
                }
            }
            other => {
                return Err(err(format!(
                    "unknown transform `{other}` (expected scale, cut_interstate or isolate)"
                )))
            }
        };
        let (mut from, mut to) = (None, None);
        let mut it = rest.into_iter();
        while let Some(key) = it.next() {
            let slot = match key {
                "from" => &mut from,
                "to" => &mut to,
                other => return Err(err(format!("unexpected token `{other}`"))),
            };
            if slot.is_some() {
                return Err(err(format!("`{key}` given twice")));
            }
            let value = it.next().ok_or_else(|| err(format!("`{key}` needs a date")))?;
            let date = NaiveDate::parse_from_str(value, "%Y-%m-%d")
                .map_err(|_| err(format!("bad date `{value}` (expected YYYY-MM-DD)")))?;
            *slot = Some(date);
        }
        if let (Some(f), Some(t)) = (from, to) {
            if f > t {
                return Err(err(format!("range starts {f} after it ends {t}")));
            }
        }
        transforms.push(MobilityTransform { kind, from, to });
    }
    Ok(PolicyScenario { transforms })
}

pub fn read_scenario(path: &Path) -> Result<PolicyScenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionImpact {
    pub region: String,
    pub baseline_cases: f64,
    pub scenario_cases: f64,
    pub delta: f64,
}

/// Cumulative predicted new cases over the evaluation window with and
/// without the scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub seed_date: NaiveDate,
    pub eval_start: NaiveDate,
    pub eval_end: NaiveDate,
    pub regions: Vec<RegionImpact>,
    pub total_baseline: f64,
    pub total_scenario: f64,
    pub total_delta: f64,
    /// Forecast dates, from the day after `seed_date` to `eval_end`.
    pub dates: Vec<NaiveDate>,
    /// Daily predictions per date, one value per region.
    pub baseline_daily: Vec<Vec<f64>>,
    pub scenario_daily: Vec<Vec<f64>>,
}

impl ImpactReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["region", "baseline_cases", "scenario_cases", "delta"])?;
        for r in &self.regions {
            w.write_record([
                r.region.clone(),
                r.baseline_cases.to_string(),
                r.scenario_cases.to_string(),
                r.delta.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}

/// Rolls the model forward from the `K` days ending on `seed_date` twice,
/// without and with `scenario`, and compares predicted cases summed over
/// `[eval_start, eval_end]`.
pub fn run_scenario(
    params: &ModelParams,
    stats: &NormalizationStats,
    panel: &PanelDataset,
    scenario: &PolicyScenario,
    seed_date: NaiveDate,
    eval_start: NaiveDate,
    eval_end: NaiveDate,
) -> Result<ImpactReport> {
    let k = params.config.window;
    let seed_idx = panel.day_index(seed_date).ok_or_else(|| {
        Error::Contract(format!(
            "seed date {seed_date} outside data range {}..={}",
            panel.start_date(),
            panel.end_date()
        ))
    })?;
    if seed_idx + 1 < k {
        return Err(Error::Contract(format!(
            "seed date {seed_date} leaves fewer than {k} days of history"
        )));
    }
    if eval_start <= seed_date || eval_end < eval_start {
        return Err(Error::Contract(format!(
            "evaluation window {eval_start}..={eval_end} must start after seed date {seed_date} and be ordered"
        )));
    }
    let resolved = scenario.resolve(panel.region_ids())?;
    let window_start = panel.dates()[seed_idx + 1 - k];
    for (i, t) in scenario.transforms.iter().enumerate() {
        let starts_late = t.from.is_some_and(|f| f > eval_end);
        let ends_early = t.to.is_some_and(|d| d < window_start);
        if starts_late || ends_early {
            return Err(Error::Contract(format!(
                "transform {} is never active between {window_start} and {eval_end}",
                i + 1
            )));
        }
    }
    let horizon = (eval_end - seed_date).num_days() as usize;
    let seed = RawWindow::from_panel(panel, seed_idx + 1, k)?;
    let baseline = rollout(params, stats, &seed, horizon, None)?;
    let scenario_run = rollout(params, stats, &seed, horizon, Some(&resolved))?;

    let n = panel.n_regions();
    let mut base_tot = vec![0.0; n];
    let mut scen_tot = vec![0.0; n];
    for (b, s) in baseline.iter().zip(&scenario_run) {
        if b.day.date < eval_start {
            continue;
        }
        for r in 0..n {
            base_tot[r] += b.day.daily[r];
            scen_tot[r] += s.day.daily[r];
        }
    }
    let regions: Vec<RegionImpact> = panel
        .region_ids()
        .iter()
        .enumerate()
        .map(|(r, id)| RegionImpact {
            region: id.clone(),
            baseline_cases: base_tot[r],
            scenario_cases: scen_tot[r],
            delta: scen_tot[r] - base_tot[r],
        })
        .collect();
    let total_baseline = base_tot.iter().sum();
    let total_scenario = scen_tot.iter().sum();
    Ok(ImpactReport {
        seed_date,
        eval_start,
        eval_end,
        total_delta: regions.iter().map(|r| r.delta).sum(),
        regions,
        total_baseline,
        total_scenario,
        dates: baseline.iter().map(|s| s.day.date).collect(),
        baseline_daily: baseline.iter().map(|s| s.day.daily.clone()).collect(),
        scenario_daily: scenario_run.iter().map(|s| s.day.daily.clone()).collect(),
    })
}

