//! `meshflow` command-line driver: data generation, training, rollout,
//! evaluation and parameter sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshflow::config::{split_assignment, ExperimentConfig};
use meshflow::experiment::{self, guard, SweepAxis};
use meshflow::formats;
use meshflow::rollout::{rollout, rollout_mse, window_ending_at};
use meshflow::synth::{generate_mesh, generate_series, scenario_by_name, scenario_catalog};
use meshflow::Error;
use ndarray::s;

#[derive(Parser)]
#[command(name = "meshflow", version, about = "Graph U-Net surrogate for mesh-based flow prediction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Seed for model initialization and noise draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, e.g. `--set train.epochs=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-pair passes.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write `<name>.mesh` and `<name>.series` for a catalog scenario (or `all`).
    Gen {
        scenario: String,
        /// Output directory (alternative to --out).
        dir: Option<PathBuf>,
        /// Number of snapshots to generate.
        #[arg(long, default_value_t = 400)]
        snapshots: usize,
    },
    /// Print the scenario catalog.
    Catalog,
    /// Train a model; writes config.txt, model.ckpt, loss.csv, eval.csv.
    Train,
    /// Autoregressive rollout from a checkpoint.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        series: PathBuf,
        /// Horizon S.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Index of the first predicted snapshot (defaults to the window length).
        #[arg(long)]
        start: Option<usize>,
    },
    /// Rollout MSE of a rollout directory against a truth series.
    Eval {
        pred_dir: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Train and evaluate one cell per value of an axis.
    Sweep {
        /// operator, pooling_ratio, noise_sigma, window or kernels.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::AlreadyExists(_) => 1,
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => 3,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::parse(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path, Error> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required".into()))
}

fn cmd_gen(common: &Common, scenario: &str, dir: Option<&Path>, snapshots: usize) -> Result<(), Error> {
    let out = dir.or(common.out.as_deref()).unwrap_or(Path::new("."));
    let specs = if scenario == "all" {
        scenario_catalog()
    } else {
        vec![scenario_by_name(scenario)?]
    };
    let targets: Vec<_> = specs
        .iter()
        .flat_map(|s| [out.join(format!("{}.mesh", s.name)), out.join(format!("{}.series", s.name))])
        .collect();
    for t in &targets {
        guard(t, common.force)?;
    }
    fs::create_dir_all(out)?;
    for mut spec in specs {
        if let Some(seed) = common.seed {
            spec.seed = spec.seed.wrapping_add(seed);
        }
        let g = generate_mesh(&spec)?;
        let series = generate_series(&spec, &g, snapshots)?;
        formats::save_mesh(&out.join(format!("{}.mesh", spec.name)), &g)?;
        formats::save_series(&out.join(format!("{}.series", spec.name)), &series)?;
        println!("{}: {} nodes, {} edges, {} snapshots", spec.name, g.num_nodes(), g.undirected_edges().len(), series.len());
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let out = require_out(common)?;
    for name in ["config.txt", "model.ckpt", "loss.csv", "eval.csv"] {
        guard(&out.join(name), common.force)?;
    }
    let outcome = experiment::run_training(&cfg, common.workers, |r| {
        if r.epoch % 100 == 0 {
            log::info!("epoch {} loss {} lr {} best {}", r.epoch, r.loss, r.lr, r.best);
        } else {
            log::debug!("epoch {} loss {} lr {}", r.epoch, r.loss, r.lr);
        }
    })?;
    let evals = experiment::evaluate(&outcome.model, &cfg)?;
    experiment::write_training_outputs(out, &cfg, &outcome, &evals, common.force)?;
    println!(
        "best loss {} at epoch {} ({} epochs run)",
        outcome.report.best_loss,
        outcome.report.best_epoch,
        outcome.report.trace.len()
    );
    for e in &evals {
        println!("{}: rollout mse {} over {} steps", e.scenario, e.mse, e.rollout.horizon());
    }
    Ok(())
}

fn cmd_rollout(
    common: &Common,
    checkpoint: &Path,
    mesh: &Path,
    series: &Path,
    steps: usize,
    start: Option<usize>,
) -> Result<(), Error> {
    let out = require_out(common)?;
    let model = formats::load_model(checkpoint)?;
    let g = formats::load_mesh(mesh)?;
    let s = formats::load_series(series)?;
    s.check_graph(&g)?;
    let start = start.unwrap_or(model.window());
    let seed = window_ending_at(&s, start, model.window())?;
    let result = rollout(&model, &g, &seed, steps, start)?;
    experiment::write_rollout_outputs(out, &g, &s.graph_id, s.dt, &result, common.force)?;
    if start + steps <= s.len() {
        let truth = s.fields.slice(s![start..start + steps, ..]).to_owned();
        println!("rollout mse {}", rollout_mse(&result.predictions, &truth)?);
    }
    Ok(())
}

fn read_meta(path: &Path) -> Result<(usize, usize), Error> {
    let text = fs::read_to_string(path)?;
    let (mut start, mut steps) = (None, None);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = split_assignment(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let parse = |v: &str| {
            v.parse::<usize>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("invalid count `{v}`"),
            })
        };
        match k {
            "start" => start = Some(parse(v)?),
            "steps" => steps = Some(parse(v)?),
            _ => {}
        }
    }
    match (start, steps) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Invalid(format!("{} lacks start/steps", path.display()))),
    }
}

fn cmd_eval(pred_dir: &Path, truth: &Path) -> Result<(), Error> {
    let (start, steps) = read_meta(&pred_dir.join("rollout.txt"))?;
    let pred = formats::load_series(&pred_dir.join("predictions.series"))?;
    let truth = formats::load_series(truth)?;
    if pred.len() != steps {
        return Err(Error::Invalid(format!("rollout.txt says {steps} steps, predictions hold {}", pred.len())));
    }
    if start + steps > truth.len() {
        return Err(Error::Invalid(format!(
            "truth has {} snapshots, rollout covers {start}..{}",
            truth.len(),
            start + steps
        )));
    }
    let t = truth.fields.slice(s![start..start + steps, ..]).to_owned();
    println!("{}", rollout_mse(&pred.fields, &t)?);
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str, values: &[String]) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let out = require_out(common)?;
    let axis: SweepAxis = axis.parse()?;
    let rows = experiment::run_sweep(&cfg, axis, values, out, common.workers, common.force)?;
    let mut stdout = std::io::stdout();
    experiment::write_summary_csv(&mut stdout, axis, &rows)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let common = &cli.common;
    if common.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    match &cli.command {
        Command::Gen {
            scenario,
            dir,
            snapshots,
        } => cmd_gen(common, scenario, dir.as_deref(), *snapshots),
        Command::Catalog => {
            for spec in scenario_catalog() {
                println!("{spec}");
            }
            Ok(())
        }
        Command::Train => cmd_train(common),
        Command::Rollout {
            checkpoint,
            mesh,
            series,
            steps,
            start,
        } => cmd_rollout(common, checkpoint, mesh, series, *steps, *start),
        Command::Eval { pred_dir, truth } => cmd_eval(pred_dir, truth),
        Command::Sweep { axis, values } => cmd_sweep(common, axis, values),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MESHFLOW_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
