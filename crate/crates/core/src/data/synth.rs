use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::panel::{weekday_index, PanelDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Parameters of the synthetic metapopulation SIR world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_regions: usize,
    pub n_days: usize,
    pub seed: u64,
    /// Transmission rate per day.
    pub beta: f64,
    /// Recovery rate per day.
    pub gamma: f64,
    /// Share of a region's population travelling to other regions each day.
    pub travel_intensity: f64,
    /// Relative swing of mobility over the week, in [0, 1).
    pub weekly_amplitude: f64,
    /// Share of a region's population moving within the region each day.
    pub intra_mobility: f64,
    /// Log-scale standard deviation of the multiplicative noise on new infections.
    pub case_noise: f64,
    /// Log-scale standard deviation of the multiplicative noise on flows.
    pub mobility_noise: f64,
    /// Infected individuals placed in region 0 on day 0.
    pub initial_infected: f64,
    pub min_population: f64,
    pub max_population: f64,
    pub start_date: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_regions: 8,
            n_days: 240,
            seed: 7,
            beta: 0.12,
            gamma: 0.1,
            travel_intensity: 0.05,
            weekly_amplitude: 0.3,
            intra_mobility: 0.5,
            case_noise: 0.05,
            mobility_noise: 0.03,
            initial_infected: 20.0,
            min_population: 2.0e5,
            max_population: 5.0e6,
            start_date: NaiveDate::from_ymd_opt(2020, 2, 1).expect("valid date"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if self.n_regions < 2 {
            return bad(format!("synthetic world needs at least 2 regions, got {}", self.n_regions));
        }
        if self.n_days < 60 {
            return bad(format!("synthetic world needs at least 60 days, got {}", self.n_days));
        }
        let finite_nonneg = [
            ("beta", self.beta),
            ("travel_intensity", self.travel_intensity),
            ("intra_mobility", self.intra_mobility),
            ("case_noise", self.case_noise),
            ("mobility_noise", self.mobility_noise),
            ("initial_infected", self.initial_infected),
        ];
        for (name, v) in finite_nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.weekly_amplitude) {
            return bad(format!("weekly_amplitude must lie in [0, 1), got {}", self.weekly_amplitude));
        }
        if !(self.min_population >= 1.0) || !(self.max_population >= self.min_population) || !self.max_population.is_finite() {
            return bad(format!(
                "population bounds must satisfy 1 <= min <= max, got {}..{}",
                self.min_population, self.max_population
            ));
        }
        if self.initial_infected > self.min_population {
            return bad("initial_infected exceeds the smallest population".into());
        }
        Ok(())
    }
}

/// A simulated world with its hidden compartments.
#[derive(Clone, Debug)]
pub struct SynthRun {
    pub panel: PanelDataset,
    /// T×N susceptible, infected and recovered counts at the end of each day.
    pub susceptible: Vec<Vec<f64>>,
    pub infected: Vec<Vec<f64>>,
    pub recovered: Vec<Vec<f64>>,
}

/// Mobility multiplier for a weekday (Monday = 0), dipping at the weekend.
pub fn weekday_factor(amplitude: f64, weekday: usize) -> f64 {
    1.0 + amplitude * (2.0 * std::f64::consts::PI * (weekday as f64 + 1.5) / 7.0).sin()
}

pub fn synth_generate(config: &SynthConfig) -> Result<PanelDataset> {
    synth_simulate(config, |_, w| w).map(|run| run.panel)
}

/// Runs the world, letting `intervention` rewrite each day's mobility matrix
/// before it drives transmission. Noise draws do not depend on the
/// intervention, so two runs differ only through the rewritten flows.
pub fn synth_simulate(config: &SynthConfig, intervention: impl Fn(NaiveDate, Tensor) -> Tensor) -> Result<SynthRun> {
    config.validate()?;
    let n = config.n_regions;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (lo, hi) = (config.min_population.ln(), config.max_population.ln());
    let population: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi).exp().round()).collect();
    let mean_pop = population.iter().sum::<f64>() / n as f64;

    let mut base = Tensor::zeros(n, n);
    for i in 0..n {
        let weights: Vec<f64> = (0..n)
            .map(|j| {
                let u: f64 = rng.random_range(0.05..1.0);
                if i == j { 0.0 } else { u * population[j] / mean_pop }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for j in 0..n {
            let flow = if i == j {
                config.intra_mobility * population[i]
            } else {
                config.travel_intensity * population[i] * weights[j] / total
            };
            base.set(i, j, flow);
        }
    }

    let mut s: Vec<f64> = population.clone();
    let mut inf = vec![0.0; n];
    let mut rec = vec![0.0; n];
    s[0] -= config.initial_infected;
    inf[0] = config.initial_infected;

    let mut daily = Vec::with_capacity(config.n_days);
    let mut mobility = Vec::with_capacity(config.n_days);
    let (mut s_hist, mut i_hist, mut r_hist) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..config.n_days {
        let date = config
            .start_date
            .checked_add_days(Days::new(t as u64))
            .ok_or_else(|| Error::Domain("start date overflows".into()))?;
        let factor = weekday_factor(config.weekly_amplitude, weekday_index(date));
        let mut w = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                let noise = (config.mobility_noise * z - 0.5 * config.mobility_noise.powi(2)).exp();
                w.set(i, j, (base.get(i, j) * factor * noise).round());
            }
        }
        let case_z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w = intervention(date, w);
        if w.shape() != (n, n) || w.data().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("intervention must return a nonnegative N×N matrix".into()));
        }

        let mut new_cases = vec![0.0; n];
        if t == 0 {
            new_cases[0] = config.initial_infected;
        } else {
            let pressure: Vec<f64> = (0..n).map(|i| inf[i] / population[i]).collect();
            let mut recovering = vec![0.0; n];
            for j in 0..n {
                let imported: f64 = (0..n).map(|i| w.get(i, j) * pressure[i]).sum();
                let force = config.beta * s[j] * (inf[j] + imported) / population[j];
                let noise = (config.case_noise * case_z[j] - 0.5 * config.case_noise.powi(2)).exp();
                new_cases[j] = (force * noise).min(s[j]).max(0.0);
                recovering[j] = config.gamma * inf[j];
            }
            for j in 0..n {
                s[j] -= new_cases[j];
                inf[j] += new_cases[j] - recovering[j];
                rec[j] += recovering[j];
            }
        }
        daily.push(new_cases);
        mobility.push(w);
        s_hist.push(s.clone());
        i_hist.push(inf.clone());
        r_hist.push(rec.clone());
    }

    let region_ids = (1..=n).map(|i| format!("R{i:02}")).collect();
    let panel = PanelDataset::from_daily(region_ids, config.start_date, daily, mobility, population)?;
    Ok(SynthRun {
        panel,
        susceptible: s_hist,
        infected: i_hist,
        recovered: r_hist,
    })
}

#[derive(Serialize)]
struct Provenance<'a> {
    generator: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a SynthConfig,
}

/// Writes the panel CSVs plus a provenance sidecar recording the config.
pub fn write_synth(dir: &Path, config: &SynthConfig, panel: &PanelDataset) -> Result<()> {
    panel.write_csv(dir)?;
    let prov = Provenance {
        generator: "metapopulation-sir",
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config,
    };
    let path = dir.join(PROVENANCE_FILE);
    let mut text = serde_json::to_string_pretty(&prov)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
