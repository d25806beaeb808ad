//! Experiment runners shared by the CLI, the Python bindings, and the acceptance suite.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, NoiseScale};
use crate::error::{Error, Result};
use crate::formats;
use crate::graph::{induced_subgraph, restrict_series, Graph, SnapshotSeries};
use crate::model::{GraphUNet, Operator};
use crate::rollout::{default_probe_points, probe_trace, rollout_from_series, rollout_mse, window_ending_at, ProbeSet, RolloutResult};
use crate::synth::{generate_mesh, generate_series, scenario_by_name};
use crate::train::{train_with, EpochRecord, Scenario, TrainReport};

/// Reads `<dir>/<name>.mesh` and `<dir>/<name>.series`, or generates the catalog scenario.
pub fn load_scenario(cfg: &ExperimentConfig, name: &str) -> Result<(Graph, SnapshotSeries)> {
    let (g, series) = match &cfg.data.dir {
        Some(dir) => (
            formats::load_mesh(&dir.join(format!("{name}.mesh")))?,
            formats::load_series(&dir.join(format!("{name}.series")))?,
        ),
        None => {
            let spec = scenario_by_name(name)?;
            let g = generate_mesh(&spec)?;
            let series = generate_series(&spec, &g, cfg.data.snapshots)?;
            (g, series)
        }
    };
    series.check_graph(&g)?;
    Ok((g, series))
}

/// Training scenarios over snapshots `0..train_snapshots`, truncated when requested.
pub fn training_scenarios(cfg: &ExperimentConfig) -> Result<Vec<Scenario>> {
    cfg.data
        .scenarios
        .iter()
        .map(|name| {
            let (g, series) = load_scenario(cfg, name)?;
            let (graph, series) = match cfg.data.truncate_x {
                None => (g, series),
                Some(xmax) => {
                    let (sub, map) = induced_subgraph(&g, |p| p[0] < xmax)?;
                    let series = restrict_series(&series, &map.kept)?;
                    (sub, series)
                }
            };
            if series.len() < cfg.data.train_snapshots {
                return Err(Error::Invalid(format!(
                    "scenario `{name}` has {} snapshots, training needs {}",
                    series.len(),
                    cfg.data.train_snapshots
                )));
            }
            Ok(Scenario {
                name: name.clone(),
                graph,
                series,
                train_range: 0..cfg.data.train_snapshots,
            })
        })
        .collect()
}

/// Standard deviation over every training snapshot entry of every scenario.
pub fn training_std(scenarios: &[Scenario]) -> f64 {
    let mut n = 0.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for sc in scenarios {
        for v in sc.series.fields.slice(s![sc.train_range.clone(), ..]).iter() {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0).sqrt()
}

/// Noise standard deviation in velocity units.
pub fn resolve_sigma(cfg: &ExperimentConfig, scenarios: &[Scenario]) -> f64 {
    match cfg.data.noise_scale {
        NoiseScale::Absolute => cfg.train.noise_sigma,
        NoiseScale::Relative => cfg.train.noise_sigma * training_std(scenarios),
    }
}

pub struct TrainOutcome {
    pub model: GraphUNet,
    pub report: TrainReport,
    pub scenarios: Vec<Scenario>,
    /// Noise standard deviation actually applied.
    pub noise_sigma: f64,
}

pub fn run_training<F: FnMut(&EpochRecord)>(cfg: &ExperimentConfig, workers: usize, on_epoch: F) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenarios = training_scenarios(cfg)?;
    let mut tc = cfg.train.clone();
    tc.noise_sigma = resolve_sigma(cfg, &scenarios);
    tc.workers = workers.max(1);
    let mut mc = cfg.model.clone();
    if mc.length_scale.is_none() {
        mc.length_scale = Some(scenarios[0].graph.mean_edge_length());
    }
    let mut model = GraphUNet::build(mc)?;
    let report = train_with(&mut model, &scenarios, &tc, on_epoch)?;
    Ok(TrainOutcome {
        model,
        report,
        scenarios,
        noise_sigma: tc.noise_sigma,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scenario: String,
    pub graph: Graph,
    pub rollout: RolloutResult,
    pub truth: Array2<f64>,
    pub mse: f64,
    /// Population variance of the ground-truth rollout window.
    pub truth_variance: f64,
}

/// Rolls out every evaluation scenario on its full mesh, starting right after the training range.
pub fn evaluate(model: &GraphUNet, cfg: &ExperimentConfig) -> Result<Vec<Evaluation>> {
    let start = cfg.data.train_snapshots;
    let horizon = cfg.data.horizon;
    cfg.data
        .eval_scenarios
        .par_iter()
        .map(|name| {
            let (g, series) = load_scenario(cfg, name)?;
            let (rollout, truth) = rollout_from_series(model, &g, &series, start, horizon)?;
            let mse = rollout_mse(&rollout.predictions, &truth)?;
            let truth_variance = truth.var(0.0);
            Ok(Evaluation {
                scenario: name.clone(),
                graph: g,
                rollout,
                truth,
                mse,
                truth_variance,
            })
        })
        .collect()
}

/// Original node indices retained at each pooling level for the given window.
pub fn pooled_levels(model: &GraphUNet, g: &Graph, window: &Array2<f64>) -> Result<Vec<Vec<usize>>> {
    let records = model.pool_trace(g, window)?;
    let mut current: Vec<usize> = (0..g.num_nodes()).collect();
    let mut levels = Vec::with_capacity(records.len());
    for r in records {
        current = r.idx_saved.iter().map(|&i| current[i]).collect();
        levels.push(current.clone());
    }
    Ok(levels)
}

/// Fails when `path` exists and `force` is off.
pub fn guard(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::AlreadyExists(path.display().to_string()));
    }
    Ok(())
}

fn write_file(path: &Path, force: bool, body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    guard(path, force)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

/// `scenario,mse,truth_variance` rows.
pub fn write_eval_csv<W: Write>(w: &mut W, evals: &[Evaluation]) -> Result<()> {
    writeln!(w, "scenario,mse,truth_variance")?;
    for e in evals {
        writeln!(w, "{},{},{}", e.scenario, e.mse, e.truth_variance)?;
    }
    Ok(())
}

/// Writes `config.txt`, `model.ckpt`, `loss.csv`, `eval.csv` and the pooled-node files into `out`.
pub fn write_training_outputs(
    out: &Path,
    cfg: &ExperimentConfig,
    outcome: &TrainOutcome,
    evals: &[Evaluation],
    force: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let path = out.join("config.txt");
    write_file(&path, force, |w| Ok(w.write_all(cfg.to_text().as_bytes())?))?;
    written.push(path);
    let path = out.join("model.ckpt");
    write_file(&path, force, |w| formats::write_model(w, &outcome.model))?;
    written.push(path);
    let path = out.join("loss.csv");
    write_file(&path, force, |w| formats::write_loss_trace(w, &outcome.report.trace))?;
    written.push(path);
    let path = out.join("eval.csv");
    write_file(&path, force, |w| write_eval_csv(w, evals))?;
    written.push(path);

    if let Some(sc) = outcome.scenarios.first() {
        let window = window_ending_at(&sc.series, sc.train_range.end, outcome.model.window())?;
        for (level, kept) in pooled_levels(&outcome.model, &sc.graph, &window)?.iter().enumerate() {
            let path = out.join(format!("pooled_nodes_{}.txt", level + 1));
            write_file(&path, force, |w| formats::write_pooled_nodes(w, level + 1, kept, &sc.graph))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Writes `fields.txt`, `probes.csv`, `predictions.series` and `rollout.txt` for one rollout.
pub fn write_rollout_outputs(
    out: &Path,
    g: &Graph,
    graph_id: &str,
    dt: f64,
    result: &RolloutResult,
    force: bool,
) -> Result<()> {
    fs::create_dir_all(out)?;
    write_file(&out.join("fields.txt"), force, |w| {
        formats::write_fields(w, g, &result.predictions, result.start)
    })?;
    let probes = ProbeSet::bind(g, &default_probe_points())?;
    let trace = probe_trace(&result.predictions, &probes)?;
    write_file(&out.join("probes.csv"), force, |w| formats::write_probe_csv(w, &trace, result.start))?;
    let series = if result.horizon() >= 2 {
        Some(SnapshotSeries::new(graph_id, dt, result.predictions.clone())?)
    } else {
        None
    };
    write_file(&out.join("predictions.series"), force, |w| match &series {
        Some(s) => formats::write_series(w, s),
        None => {
            writeln!(w, "series {graph_id} 1 {} {dt}", result.predictions.ncols())?;
            let vals: Vec<String> = result.predictions.row(0).iter().map(f64::to_string).collect();
            writeln!(w, "{}", vals.join(" "))?;
            Ok(())
        }
    })?;
    write_file(&out.join("rollout.txt"), force, |w| {
        writeln!(w, "start={}", result.start)?;
        writeln!(w, "steps={}", result.horizon())?;
        writeln!(w, "graph_id={graph_id}")?;
        Ok(())
    })
}

/// Sweepable configuration axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Operator,
    PoolingRatio,
    NoiseSigma,
    Window,
    Kernels,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "operator" => SweepAxis::Operator,
            "pooling_ratio" => SweepAxis::PoolingRatio,
            "noise_sigma" => SweepAxis::NoiseSigma,
            "window" => SweepAxis::Window,
            "kernels" => SweepAxis::Kernels,
            other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        })
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Operator => "operator",
            SweepAxis::PoolingRatio => "pooling_ratio",
            SweepAxis::NoiseSigma => "noise_sigma",
            SweepAxis::Window => "window",
            SweepAxis::Kernels => "kernels",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Operator => "model.operator",
            SweepAxis::PoolingRatio => "model.pooling_ratio",
            SweepAxis::NoiseSigma => "train.noise_sigma",
            SweepAxis::Window => "train.window",
            SweepAxis::Kernels => "model.kernels",
        }
    }

    /// Config for one cell; rejects values that are invalid for the axis.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.set(self.key(), value)?;
        if self == SweepAxis::Kernels && cfg.model.operator != Operator::Gmm {
            return Err(Error::Config("the kernels axis needs model.operator=gmm".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub value: String,
    pub final_loss: f64,
    /// `(scenario, rollout MSE)` per evaluation scenario.
    pub mse: Vec<(String, f64)>,
}

pub fn write_summary_csv<W: Write>(w: &mut W, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let scenarios: Vec<&str> = rows
        .first()
        .map(|r| r.mse.iter().map(|(s, _)| s.as_str()).collect())
        .unwrap_or_default();
    write!(w, "cell,{},final_loss", axis.name())?;
    for s in &scenarios {
        write!(w, ",mse_{s}")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(w, "{},{},{}", r.cell, r.value, r.final_loss)?;
        for (_, m) in &r.mse {
            write!(w, ",{m}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Runs every cell sequentially into `out/cell_<i>` and writes `out/summary.csv`.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
    workers: usize,
    force: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cells: Vec<ExperimentConfig> = values.iter().map(|v| axis.apply(base, v)).collect::<Result<_>>()?;
    guard(&out.join("summary.csv"), force)?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, (cfg, value)) in cells.iter().zip(values).enumerate() {
        log::info!("sweep cell {i}: {}={value}", axis.key());
        let outcome = run_training(cfg, workers, |_| {})?;
        let evals = evaluate(&outcome.model, cfg)?;
        write_training_outputs(&out.join(format!("cell_{i}")), cfg, &outcome, &evals, force)?;
        rows.push(SweepRow {
            cell: i,
            value: value.clone(),
            final_loss: outcome.report.best_loss,
            mse: evals.iter().map(|e| (e.scenario.clone(), e.mse)).collect(),
        });
    }
    write_file(&out.join("summary.csv"), force, |w| write_summary_csv(w, axis, &rows))?;
    Ok(rows)
}
