use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use demandnet::config::RunConfig;
use demandnet::data::{export_dataset, load_dataset, Dataset, DatasetPaths, LoadOptions};
use demandnet::eval::{evaluate, evaluate_baseline, forecasts_csv, predict_network, BaselineMethod, EvaluationReport};
use demandnet::graph::NetworkSnapshot;
use demandnet::synth::generate;
use demandnet::train::train_with;
use demandnet::{CategorySimilarity64, Checkpoint64, Error};

const SIMILARITY_FILE: &str = "poi_similarity.csv";

#[derive(Parser, Debug)]
#[command(name = "demandnet", version, about = "Expected-demand prediction for expanding station networks")]
struct Cli {
    /// Seed for the scenario, training and forest; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding stations.csv, orders.csv, poi.csv, road_features.csv
    /// and weather.csv, plus an optional poi_similarity.csv.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario into --out.
    Simulate,
    /// Load and validate a dataset; with --out, re-export it.
    Ingest(DataArgs),
    /// Write the three adjacency matrices on a date as CSV into --out.
    BuildGraphs {
        #[command(flatten)]
        data: DataArgs,
        /// Stations in service on this date (YYYY-MM-DD) form the graphs
        #[arg(long)]
        as_of: NaiveDate,
    },
    /// Train a model and write its checkpoint to --out.
    Train(DataArgs),
    /// Predict expected demand on a date for existing and planned stations.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Forecast date (YYYY-MM-DD); history up to and including it is used
        #[arg(long)]
        as_of: NaiveDate,
        /// Stations deploying within this many days count as planned.
        #[arg(long, default_value_t = 28)]
        horizon: usize,
    },
    /// Score a checkpoint on the held-out horizon.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Score a reference predictor on the held-out horizon.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        method: Method,
        /// Neighbours for knn; overrides knn_k.
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        window: WindowArgs,
    },
}

#[derive(Args, Debug)]
struct WindowArgs {
    /// Defaults to the training cutoff.
    #[arg(long)]
    eval_date: Option<NaiveDate>,
    /// Defaults to holdout_days.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Knn,
    Forest,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Data(other),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Data(e),
            other => Failure::Usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Simulate => simulate(&config, require_out(out)?, cli.json),
        Command::Ingest(d) => ingest(&config, &d.data, out, cli.json),
        Command::BuildGraphs { data, as_of } => build_graphs(&config, &data.data, *as_of, require_out(out)?, cli.json),
        Command::Train(d) => train(&config, &d.data, require_out(out)?, cli.json),
        Command::Predict {
            data,
            checkpoint,
            as_of,
            horizon,
        } => predict(&config, &data.data, checkpoint, *as_of, *horizon, out, cli.json),
        Command::Evaluate { data, checkpoint, window } => {
            let dataset = load(&config, &data.data)?;
            let ckpt = Checkpoint64::read(checkpoint)?;
            let (date, horizon) = eval_window(&config, &dataset, window)?;
            let report = evaluate(&ckpt, &dataset, date, horizon, config_echo(&config))?;
            emit_report(&report, "evaluation", out, cli.json)
        }
        Command::Baseline {
            data,
            method,
            k,
            window,
        } => {
            let dataset = load(&config, &data.data)?;
            let (date, horizon) = eval_window(&config, &dataset, window)?;
            let method = match method {
                Method::Knn => BaselineMethod::Knn {
                    k: k.unwrap_or(config.eval.knn_k),
                },
                Method::Forest => BaselineMethod::Forest(config.eval.forest.clone()),
            };
            let report = evaluate_baseline(
                &method,
                &dataset,
                date,
                horizon,
                config.eval.baseline_history_days,
                json!({ "baseline": method, "run": config_echo(&config) }),
            )?;
            emit_report(&report, &format!("baseline_{}", method.name()), out, cli.json)
        }
    }
}

fn require_out(out: Option<&Path>) -> Result<&Path, Failure> {
    out.ok_or_else(|| Failure::Usage("this subcommand needs --out".into()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialize"));
}

fn config_echo(config: &RunConfig) -> serde_json::Value {
    serde_json::to_value(config).expect("config serializes")
}

fn load(config: &RunConfig, dir: &Path) -> Result<Dataset, Failure> {
    let offset = chrono::FixedOffset::east_opt(config.scenario.utc_offset_hours * 3600)
        .ok_or_else(|| Failure::Usage(format!("bad utc_offset_hours {}", config.scenario.utc_offset_hours)))?;
    let opts = LoadOptions {
        utc_offset: offset,
        ..LoadOptions::default()
    };
    Ok(load_dataset(&DatasetPaths::in_dir(dir), &opts)?)
}

/// `poi_similarity.csv` from the data directory, identity when absent.
fn similarity(dataset: &Dataset, dir: &Path) -> Result<CategorySimilarity64, Failure> {
    let path = dir.join(SIMILARITY_FILE);
    if path.exists() {
        Ok(CategorySimilarity64::load_csv(&path, &dataset.categories)?)
    } else {
        Ok(CategorySimilarity64::identity(dataset.poi_categories()))
    }
}

fn eval_window(config: &RunConfig, dataset: &Dataset, window: &WindowArgs) -> Result<(NaiveDate, usize), Failure> {
    let mut config = config.clone();
    if window.eval_date.is_some() {
        config.eval.eval_date = window.eval_date;
    }
    if window.horizon.is_some() {
        config.eval.horizon_days = window.horizon;
    }
    Ok(config.eval_window(dataset.weather.span())?)
}

fn simulate(config: &RunConfig, out: &Path, json: bool) -> Outcome {
    create_dir(out)?;
    let scenario = generate(&config.scenario, out)?;
    let ds = &scenario.dataset;
    let summary = json!({
        "out": out,
        "stations": ds.stations.len(),
        "orders": ds.orders.len(),
        "pois": ds.pois.len(),
        "start": ds.weather.start(),
        "end": ds.weather.end(),
        "scenario": config.scenario,
    });
    if json {
        print_json(&summary);
    } else {
        println!(
            "wrote {} stations, {} orders, {} POIs ({} to {}) to {}",
            ds.stations.len(),
            ds.orders.len(),
            ds.pois.len(),
            ds.weather.start(),
            ds.weather.end(),
            out.display()
        );
    }
    Ok(())
}

fn ingest(config: &RunConfig, dir: &Path, out: Option<&Path>, json: bool) -> Outcome {
    let ds = load(config, dir)?;
    if let Some(out) = out {
        create_dir(out)?;
        export_dataset(&ds, out)?;
    }
    let demand = ds.demand_table().total();
    if json {
        print_json(&json!({
            "stations": ds.stations.len(),
            "orders": ds.orders.len(),
            "pois": ds.pois.len(),
            "road_records": ds.roads.len(),
            "days": ds.weather.len(),
            "start": ds.weather.start(),
            "end": ds.weather.end(),
            "categories": ds.categories,
            "pickups_counted": demand,
            "rejected": ds.rejections,
        }));
    } else {
        println!(
            "{} stations, {} orders ({} rejected), {} POIs in {} categories, {} days from {} to {}",
            ds.stations.len(),
            ds.orders.len(),
            ds.rejections.total(),
            ds.pois.len(),
            ds.categories.len(),
            ds.weather.len(),
            ds.weather.start(),
            ds.weather.end()
        );
    }
    Ok(())
}

fn build_graphs(config: &RunConfig, dir: &Path, as_of: NaiveDate, out: &Path, json: bool) -> Outcome {
    let ds = load(config, dir)?;
    let sim = similarity(&ds, dir)?;
    let snapshot = NetworkSnapshot::alive(as_of, &ds.stations, &sim)?;
    create_dir(out)?;
    snapshot.write_csv(out)?;
    if json {
        print_json(&json!({ "as_of": as_of, "stations": snapshot.len(), "out": out }));
    } else {
        println!("wrote {}x{} graphs for {as_of} to {}", snapshot.len(), snapshot.len(), out.display());
    }
    Ok(())
}

fn train(config: &RunConfig, dir: &Path, out: &Path, json: bool) -> Outcome {
    let ds = load(config, dir)?;
    let sim = similarity(&ds, dir)?;
    let outcome = train_with(&ds, &ds.demand_table(), &config.training, sim)?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        eprintln!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    outcome.checkpoint.write(out)?;
    if json {
        print_json(&json!({
            "checkpoint": out,
            "snapshots": outcome.snapshots,
            "epoch_losses": outcome.epoch_losses,
            "trained_through": outcome.checkpoint.trained_through,
            "training": config.training,
        }));
    } else {
        println!(
            "trained on {} snapshots for {} epochs; wrote {}",
            outcome.snapshots,
            outcome.epoch_losses.len(),
            out.display()
        );
    }
    Ok(())
}

fn predict(
    config: &RunConfig,
    dir: &Path,
    checkpoint: &Path,
    as_of: NaiveDate,
    horizon: usize,
    out: Option<&Path>,
    json: bool,
) -> Outcome {
    let ds = load(config, dir)?;
    let ckpt = Checkpoint64::read(checkpoint)?;
    let forecasts = predict_network(&ckpt, &ds, &ds.demand_table(), as_of, horizon)?;
    if let Some(out) = out {
        write_file(out, &forecasts_csv(&forecasts))?;
    }
    if json {
        print_json(&json!({ "as_of": as_of, "horizon_days": horizon, "stations": forecasts }));
    } else if out.is_none() {
        print!("{}", forecasts_csv(&forecasts));
    } else {
        println!("wrote {} station forecasts for {as_of}", forecasts.len());
    }
    Ok(())
}

/// Writes `<stem>.json` and `<stem>.csv` into `out` when given.
fn emit_report(report: &EvaluationReport, stem: &str, out: Option<&Path>, json: bool) -> Outcome {
    if let Some(out) = out {
        create_dir(out)?;
        report.write(&out.join(format!("{stem}.json")), &out.join(format!("{stem}.csv")))?;
    }
    if json {
        println!("{}", report.to_json()?);
        return Ok(());
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!("{} on {} (+{} days)", report.method, report.eval_date, report.horizon_days);
    for (name, group) in [
        ("existing", report.existing.as_ref()),
        ("planned", report.planned.as_ref()),
        ("all", Some(&report.all)),
    ] {
        match group {
            Some(g) => println!(
                "  {name:<8} stations {:>4}  rmse {:.4}  er {}",
                g.stations,
                g.rmse,
                fmt(g.er)
            ),
            None => println!("  {name:<8} absent"),
        }
    }
    Ok(())
}
