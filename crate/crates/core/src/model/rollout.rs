use chrono::Days;

use super::{forward, ModelParams, StepOutput};
use crate::data::{NormalizationStats, RawDay, RawWindow};
use crate::error::{Error, Result};
use crate::policy::ResolvedScenario;

/// One day of an autoregressive forecast.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    /// The window this step was predicted from, in raw units.
    pub input: RawWindow,
    pub output: StepOutput,
    /// Appended day: clamped denormalized predictions, with the scenario
    /// already applied to its mobility.
    pub day: RawDay,
}

/// Predicts `horizon` days past `seed`, feeding every prediction back into
/// the window. With a scenario, active transforms rewrite the mobility of
/// the seed window and of every predicted day before it re-enters the model.
pub fn rollout(
    params: &ModelParams,
    stats: &NormalizationStats,
    seed: &RawWindow,
    horizon: usize,
    scenario: Option<&ResolvedScenario>,
) -> Result<Vec<RolloutStep>> {
    if horizon == 0 {
        return Err(Error::Contract("rollout horizon must be at least 1".into()));
    }
    let n = params.config.n_regions;
    if seed.len() != params.config.window || seed.population.len() != n {
        return Err(Error::Contract(format!(
            "seed window has {} days for {} regions, model expects {} days for {n} regions",
            seed.len(),
            seed.population.len(),
            params.config.window
        )));
    }
    let mut window = seed.clone();
    if let Some(s) = scenario {
        for day in &mut window.days {
            day.mobility = s.apply(day.date, &day.mobility)?;
        }
    }

    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let input = window.encode(stats);
        let output = forward(params, &input)?;
        let last = window.last();
        let date = last
            .date
            .checked_add_days(Days::new(1))
            .ok_or_else(|| Error::Domain("forecast date overflows".into()))?;
        let daily: Vec<f64> = output
            .cases_next
            .data()
            .iter()
            .map(|&z| stats.daily_cases.decode(z).max(0.0))
            .collect();
        let mut mobility = output.mobility_next.map(|z| stats.mobility.decode(z).max(0.0));
        if daily.iter().chain(mobility.data()).any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite prediction for {date}")));
        }
        if let Some(s) = scenario {
            mobility = s.apply(date, &mobility)?;
        }
        let cumulative = last.cumulative.iter().zip(&daily).map(|(c, d)| c + d).collect();
        let day = RawDay {
            date,
            daily,
            cumulative,
            mobility,
        };
        let input = window.clone();
        window.advance(day.clone());
        steps.push(RolloutStep { input, output, day });
    }
    Ok(steps)
}
