use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Days, NaiveDate};
use clap::{Args, Parser, Subcommand};
use epigraph::checkpoint::Checkpoint;
use epigraph::data::{
    load_panel_dir, synth_generate, write_synth, PanelDataset, CASES_FILE, MOBILITY_FILE, POPULATION_FILE,
    PROVENANCE_FILE,
};
use epigraph::model::EdgeMode;
use epigraph::policy::{read_scenario, run_scenario};
use epigraph::train::{evaluate_holdout, evaluate_mae, fit, write_train_log, TrainConfig};
use epigraph::Error;
use serde::Serialize;

use crate::config::FileConfig;
use crate::error::{CliError, Result};
use crate::forecast::{check_compatible, forecast};
use crate::manifest::ManifestBuilder;
use crate::service::{serve, ServiceState};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "model.last_good.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const HOLDOUT_FILE: &str = "holdout.json";
pub const FORECAST_DAILY_FILE: &str = "forecast_daily.csv";
pub const FORECAST_EPIWEEK_FILE: &str = "forecast_epiweek.csv";
pub const IMPACT_CSV_FILE: &str = "impact.csv";
pub const IMPACT_JSON_FILE: &str = "impact.json";
pub const EVAL_FILE: &str = "eval.csv";

/// Mobility-aware epidemic forecasting and policy simulation.
#[derive(Debug, Parser)]
#[command(name = "epigraph", version, about)]
pub struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML file with `seed`, `data_dir`, `[synth]` and `[train]` settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel with a metapopulation SIR simulator.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, training log and attention weights.
    Train(TrainArgs),
    /// Forecast daily and epi-week cases from a checkpoint.
    Forecast(ForecastArgs),
    /// Compare a mobility policy scenario against the baseline forecast.
    Simulate(SimulateArgs),
    /// Score epi-week forecasts against persistence.
    Evaluate(EvaluateArgs),
    /// Serve forecasts and scenarios over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory [default: data directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Share of each population travelling between regions per day.
    #[arg(long)]
    pub travel: Option<f64>,
    /// First simulated date (YYYY-MM-DD).
    #[arg(long)]
    pub start: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding cases.csv, mobility.csv and population.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Days of history per input window [default: 15].
    #[arg(long)]
    pub window: Option<usize>,
    /// [default: 150]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate, decayed 10% every 10 epochs [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Case MAE weight [default: 1].
    #[arg(long)]
    pub w1: Option<f64>,
    /// Case MSE weight [default: 1].
    #[arg(long)]
    pub w2: Option<f64>,
    /// Mobility MSE weight [default: 0.5].
    #[arg(long)]
    pub w3: Option<f64>,
    /// Read out the last hidden state instead of attention pooling.
    #[arg(long)]
    pub no_attention: bool,
    /// `learned` edges from the generator or fixed `mobility` edges.
    #[arg(long)]
    pub edge_mode: Option<EdgeMode>,
    /// Windows per optimizer step [default: 8].
    #[arg(long, conflicts_with = "full_batch")]
    pub batch_size: Option<usize>,
    /// One optimizer step per epoch over every training window.
    #[arg(long)]
    pub full_batch: bool,
    /// Share of windows held out for checkpoint selection [default: 0.1].
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Global gradient-norm clip [default: 5].
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Exclude the last N days from training and report forecast error on them.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 14)]
    pub horizon: usize,
    /// Last observed day to forecast from [default: last day of the data].
    #[arg(long)]
    pub origin: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario file, one transform per line.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Last observed day [default: last day of the data].
    #[arg(long)]
    pub origin: Option<NaiveDate>,
    /// Days simulated after the origin.
    #[arg(long, default_value_t = 30)]
    pub horizon: usize,
    /// First day counted in the impact totals [default: day after origin].
    #[arg(long)]
    pub eval_start: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// First day of the evaluation range [default: first day of the data].
    #[arg(long)]
    pub from: Option<NaiveDate>,
    /// Last day of the evaluation range [default: last day of the data].
    #[arg(long)]
    pub to: Option<NaiveDate>,
    #[arg(long, value_delimiter = ',', default_values_t = [14, 21])]
    pub horizons: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Address to bind; loopback unless set.
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    pub bind: IpAddr,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load_opt(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed);
    match cli.command {
        Command::Synth(args) => cmd_synth(&args, &file, seed).map(|_| ()),
        Command::Train(args) => cmd_train(&args, &file, seed).map(|_| ()),
        Command::Forecast(args) => cmd_forecast(&args, &file, seed).map(|_| ()),
        Command::Simulate(args) => cmd_simulate(&args, &file, seed).map(|_| ()),
        Command::Evaluate(args) => cmd_evaluate(&args, &file, seed).map(|_| ()),
        Command::Serve(args) => cmd_serve(&args, &file),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn panel_files(dir: &Path) -> [PathBuf; 3] {
    [CASES_FILE, MOBILITY_FILE, POPULATION_FILE].map(|f| dir.join(f))
}

fn load_data(args: &DataArgs, file: &FileConfig) -> Result<(PathBuf, PanelDataset)> {
    let dir = file.data_dir(args.data.as_deref())?;
    let loaded = load_panel_dir(&dir)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok((dir, loaded.panel))
}

fn load_model(args: &ModelArgs, file: &FileConfig) -> Result<(PathBuf, Checkpoint, PanelDataset)> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (dir, panel) = load_data(&args.data, file)?;
    check_compatible(&checkpoint, &panel)?;
    Ok((dir, checkpoint, panel))
}

pub fn cmd_synth(args: &SynthArgs, file: &FileConfig, seed: Option<u64>) -> Result<PathBuf> {
    let mut config = file.synth.clone().unwrap_or_default();
    if let Some(v) = args.regions {
        config.n_regions = v;
    }
    if let Some(v) = args.days {
        config.n_days = v;
    }
    if let Some(v) = args.beta {
        config.beta = v;
    }
    if let Some(v) = args.gamma {
        config.gamma = v;
    }
    if let Some(v) = args.travel {
        config.travel_intensity = v;
    }
    if let Some(v) = args.start {
        config.start_date = v;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = file.data_dir(args.out.as_deref())?;
    let manifest = ManifestBuilder::new("synth", &config, Some(config.seed))?;
    let panel = synth_generate(&config)?;
    create_dir(&out)?;
    write_synth(&out, &config, &panel)?;
    let mut outputs = panel_files(&out).to_vec();
    outputs.push(out.join(PROVENANCE_FILE));
    manifest.finish(&out, &outputs)?;
    println!(
        "wrote {} regions x {} days to {}",
        panel.n_regions(),
        panel.n_days(),
        out.display()
    );
    Ok(out)
}

/// Resolves defaults, config file and flags into one training config.
pub fn train_config(args: &TrainArgs, file: &FileConfig, seed: Option<u64>) -> Result<TrainConfig> {
    let mut c = file.train.clone().unwrap_or_default();
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { c.$field = v; })*
        };
    }
    set!(window => window, epochs => epochs, lr => base_lr, w1 => w1, w2 => w2, w3 => w3,
         val_fraction => val_fraction, clip_norm => clip_norm, edge_mode => edge_mode);
    if args.no_attention {
        c.attention_enabled = false;
    }
    if args.full_batch {
        c.batch_size = None;
    } else if let Some(b) = args.batch_size {
        c.batch_size = Some(b);
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

#[derive(Debug, Serialize)]
struct TrainSnapshot<'a> {
    train: &'a TrainConfig,
    holdout_days: usize,
}

/// Paths written by a successful training run.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub attention: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs, file: &FileConfig, seed: Option<u64>) -> Result<TrainOutputs> {
    let config = train_config(args, file, seed)?;
    let (dir, full) = load_data(&args.data, file)?;
    let mut manifest = ManifestBuilder::new(
        "train",
        &TrainSnapshot {
            train: &config,
            holdout_days: args.holdout,
        },
        Some(config.seed),
    )?;
    for p in panel_files(&dir) {
        manifest.input(p);
    }
    let panel = if args.holdout > 0 {
        if args.holdout >= full.n_days() {
            return Err(CliError::Usage(format!(
                "--holdout {} leaves no training days out of {}",
                args.holdout,
                full.n_days()
            )));
        }
        full.slice_days(0..full.n_days() - args.holdout)?
    } else {
        full.clone()
    };
    create_dir(&args.out)?;
    let result = match fit(&panel, &config) {
        Ok(r) => r,
        Err(Error::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            let mut msg = format!("training diverged at epoch {epoch}: {reason}");
            if let Some(ck) = last_good {
                let path = args.out.join(LAST_GOOD_FILE);
                ck.save(&path)?;
                msg.push_str(&format!("; last good checkpoint saved to {}", path.display()));
            }
            return Err(CliError::Core(Error::Diverged {
                epoch,
                reason: msg,
                last_good: None,
            }));
        }
        Err(e) => return Err(e.into()),
    };

    let checkpoint = args.out.join(CHECKPOINT_FILE);
    result.checkpoint.save(&checkpoint)?;
    let train_log = args.out.join(TRAIN_LOG_FILE);
    write_train_log(&train_log, &result.log)?;
    let mut outputs = vec![checkpoint.clone(), train_log.clone()];

    let attention = if result.checkpoint.attention.case.is_some() {
        let path = args.out.join(ATTENTION_FILE);
        write_attention_csv(&path, &result.checkpoint)?;
        outputs.push(path.clone());
        Some(path)
    } else {
        None
    };

    let holdout = if args.holdout > 0 {
        let ck = &result.checkpoint;
        let report = evaluate_holdout(&ck.params, &ck.stats, &full, args.holdout)?;
        println!(
            "holdout {} days: model MAE {:.3}, persistence MAE {:.3}",
            report.days, report.model_mae, report.persistence_mae
        );
        let path = args.out.join(HOLDOUT_FILE);
        let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        outputs.push(path.clone());
        Some(path)
    } else {
        None
    };
    manifest.finish(&args.out, &outputs)?;

    let first = result.log.first().map(|r| r.train_loss).unwrap_or(f64::NAN);
    let last = result.log.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs: train loss {first:.5} -> {last:.5}, best validation loss {:.5} at epoch {}",
        result.log.len(),
        result.checkpoint.best_val_loss.unwrap_or(f64::NAN),
        result.checkpoint.best_epoch.unwrap_or(0),
    );
    Ok(TrainOutputs {
        checkpoint,
        train_log,
        attention,
        holdout,
    })
}

/// CSV `step,days_before_target,case_weight,mobility_weight`; step 1 is the
/// oldest day of the window.
pub fn write_attention_csv(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let k = checkpoint.params.config.window;
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(["step", "days_before_target", "case_weight", "mobility_weight"])
        .map_err(Error::from)?;
    let fmt = |v: Option<&Vec<f64>>, i: usize| v.map(|x| x[i].to_string()).unwrap_or_default();
    for i in 0..k {
        w.write_record([
            (i + 1).to_string(),
            (k - i).to_string(),
            fmt(checkpoint.attention.case.as_ref(), i),
            fmt(checkpoint.attention.mobility.as_ref(), i),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn origin_or_last(origin: Option<NaiveDate>, panel: &PanelDataset) -> NaiveDate {
    origin.unwrap_or_else(|| panel.end_date())
}

#[derive(Debug, Serialize)]
struct ForecastSnapshot {
    horizon: usize,
    origin: NaiveDate,
}

pub fn cmd_forecast(args: &ForecastArgs, file: &FileConfig, seed: Option<u64>) -> Result<[PathBuf; 2]> {
    let (dir, ck, panel) = load_model(&args.model, file)?;
    let origin = origin_or_last(args.origin, &panel);
    let mut manifest = ManifestBuilder::new(
        "forecast",
        &ForecastSnapshot {
            horizon: args.horizon,
            origin,
        },
        seed,
    )?;
    manifest.input(&args.model.checkpoint);
    for p in panel_files(&dir) {
        manifest.input(p);
    }
    let report = forecast(&ck, &panel, origin, args.horizon)?;
    create_dir(&args.out)?;
    let daily = args.out.join(FORECAST_DAILY_FILE);
    let weekly = args.out.join(FORECAST_EPIWEEK_FILE);
    report.write_daily_csv(&daily)?;
    report.write_epiweek_csv(&weekly)?;
    let outputs = [daily, weekly];
    manifest.finish(&args.out, &outputs)?;
    println!(
        "forecast {} days from {} for {} regions",
        args.horizon,
        origin,
        panel.n_regions()
    );
    Ok(outputs)
}

#[derive(Debug, Serialize)]
struct SimulateSnapshot {
    scenario: PathBuf,
    origin: NaiveDate,
    horizon: usize,
    eval_start: NaiveDate,
}

pub fn cmd_simulate(args: &SimulateArgs, file: &FileConfig, seed: Option<u64>) -> Result<[PathBuf; 2]> {
    let scenario = read_scenario(&args.scenario)?;
    let (dir, ck, panel) = load_model(&args.model, file)?;
    if args.horizon == 0 {
        return Err(CliError::Usage("--horizon must be at least 1".into()));
    }
    let origin = origin_or_last(args.origin, &panel);
    let eval_start = args.eval_start.unwrap_or(origin + Days::new(1));
    let eval_end = origin + Days::new(args.horizon as u64);
    let mut manifest = ManifestBuilder::new(
        "simulate",
        &SimulateSnapshot {
            scenario: args.scenario.clone(),
            origin,
            horizon: args.horizon,
            eval_start,
        },
        seed,
    )?;
    manifest.input(&args.model.checkpoint);
    manifest.input(&args.scenario);
    for p in panel_files(&dir) {
        manifest.input(p);
    }
    let report = run_scenario(&ck.params, &ck.stats, &panel, &scenario, origin, eval_start, eval_end)?;
    create_dir(&args.out)?;
    let csv_path = args.out.join(IMPACT_CSV_FILE);
    let json_path = args.out.join(IMPACT_JSON_FILE);
    report.write_csv(&csv_path)?;
    report.write_json(&json_path)?;
    let outputs = [csv_path, json_path];
    manifest.finish(&args.out, &outputs)?;
    println!(
        "scenario {eval_start}..={eval_end}: baseline {:.1}, scenario {:.1}, delta {:+.1}",
        report.total_baseline, report.total_scenario, report.total_delta
    );
    Ok(outputs)
}

#[derive(Debug, Serialize)]
struct EvaluateSnapshot {
    from: NaiveDate,
    to: NaiveDate,
    horizons: Vec<usize>,
}

pub fn cmd_evaluate(args: &EvaluateArgs, file: &FileConfig, seed: Option<u64>) -> Result<PathBuf> {
    let (dir, ck, panel) = load_model(&args.model, file)?;
    let from = args.from.unwrap_or_else(|| panel.start_date());
    let to = args.to.unwrap_or_else(|| panel.end_date());
    let index = |d: NaiveDate| {
        panel
            .day_index(d)
            .ok_or_else(|| CliError::Usage(format!("{d} is outside the data range")))
    };
    let range = index(from)?..index(to)? + 1;
    let mut manifest = ManifestBuilder::new(
        "evaluate",
        &EvaluateSnapshot {
            from,
            to,
            horizons: args.horizons.clone(),
        },
        seed,
    )?;
    manifest.input(&args.model.checkpoint);
    for p in panel_files(&dir) {
        manifest.input(p);
    }
    let report = evaluate_mae(&ck.params, &ck.stats, &panel, range, &args.horizons)?;
    for s in &report.skipped {
        log::info!("skipped {s}");
    }
    create_dir(&args.out)?;
    let path = args.out.join(EVAL_FILE);
    report.write_csv(&path)?;
    manifest.finish(&args.out, std::slice::from_ref(&path))?;
    for &h in &args.horizons {
        match report.mean_for(h) {
            Some((m, p)) => println!("horizon {h}: model MAE {m:.3}, persistence MAE {p:.3}"),
            None => println!("horizon {h}: no complete epi-week could be scored"),
        }
    }
    Ok(path)
}

pub fn cmd_serve(args: &ServeArgs, file: &FileConfig) -> Result<()> {
    let (_, checkpoint, panel) = load_model(&args.model, file)?;
    let state = Arc::new(ServiceState::new(checkpoint, panel)?);
    let addr = SocketAddr::new(args.bind, args.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Serve(e.to_string()))?;
    runtime.block_on(serve(state, addr))
}
