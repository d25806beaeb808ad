//! Full-batch sliding-window training with optional Gaussian noise injection.
//!
//! Each epoch sums the one-step MSE of every training pair of every scenario,
//! runs one backward pass, and takes one Adam step. The loss of record (used
//! by the learning-rate schedule, checkpointing and early stopping) is the
//! clean loss: inputs and targets without injected noise.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamConfig, ParamGrads, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::graph::{Graph, SnapshotSeries};
use crate::model::GraphUNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    None,
    /// Corrupt the input window only.
    Input,
    /// Corrupt the input window and the target.
    InputOutput,
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::None => "none",
            NoiseMode::Input => "input",
            NoiseMode::InputOutput => "input_output",
        })
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => NoiseMode::None,
            "input" | "i" => NoiseMode::Input,
            "input_output" | "io" => NoiseMode::InputOutput,
            other => return Err(Error::Config(format!("unknown noise mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_min: f64,
    pub noise: NoiseMode,
    pub noise_sigma: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Threads used for per-pair forward/backward passes (1 = sequential).
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 7500,
            lr0: 1e-3,
            lr_factor: 0.5,
            lr_patience: 500,
            lr_min: 1e-5,
            noise: NoiseMode::None,
            noise_sigma: 0.0,
            early_stop_patience: 1500,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.lr0 > 0.0) || !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_sigma(&self) -> f64 {
        match self.noise {
            NoiseMode::None => 0.0,
            _ => self.noise_sigma,
        }
    }
}

/// A mesh, its snapshot series, and the snapshot range used for training.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub graph: Graph,
    pub series: SnapshotSeries,
    pub train_range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub scenario: usize,
    /// `N x W`: snapshots `t - W + 1 ..= t`, oldest first.
    pub window: Array2<f64>,
    /// `N x 1`: snapshot `t + 1`.
    pub target: Array2<f64>,
}

/// One pair per valid `t` inside `range`: `range.len() - w` pairs.
pub fn make_windows(series: &SnapshotSeries, w: usize, range: Range<usize>, scenario: usize) -> Result<Vec<TrainingPair>> {
    if range.end > series.len() || range.start > range.end {
        return Err(Error::Invalid(format!(
            "training range {range:?} exceeds a series of {} snapshots",
            series.len()
        )));
    }
    if w == 0 || range.len() < w + 1 {
        return Err(Error::Invalid(format!(
            "training range of {} snapshots is too short for a window of {w}",
            range.len()
        )));
    }
    Ok((range.start + w..range.end)
        .map(|next| TrainingPair {
            scenario,
            window: series.fields.slice(s![next - w..next, ..]).t().to_owned(),
            target: series.fields.slice(s![next..next + 1, ..]).t().to_owned(),
        })
        .collect())
}

/// Noisy copy of `pair`; i.i.d. `N(0, sigma^2)` per entry, window first (row-major), then target.
pub fn inject_noise<R: Rng>(pair: &TrainingPair, mode: NoiseMode, sigma: f64, rng: &mut R) -> TrainingPair {
    let mut out = pair.clone();
    if mode == NoiseMode::None || sigma == 0.0 {
        return out;
    }
    for v in out.window.iter_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    if mode == NoiseMode::InputOutput {
        for v in out.target.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective that was differentiated (noisy when noise is on).
    pub train_loss: f64,
    /// Clean loss of record.
    pub loss: f64,
    pub lr: f64,
    /// Best clean loss so far.
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct PairOutcome {
    objective: f64,
    clean: f64,
    grads: ParamGrads,
}

fn pair_pass(
    model: &GraphUNet,
    graph: &Graph,
    noisy: &TrainingPair,
    clean: Option<&TrainingPair>,
) -> Result<PairOutcome> {
    let mut tape = Tape::new();
    let x = tape.constant(noisy.window.clone());
    let pred = model.forward(&mut tape, graph, x)?;
    let loss = tape.mse(pred, &noisy.target)?;
    let objective = tape.value(loss)[[0, 0]];
    let grads = tape.backward(loss, model.store.len())?;
    let clean = match clean {
        None => objective,
        Some(c) => {
            let mut tape = Tape::new();
            let x = tape.constant(c.window.clone());
            let pred = model.forward(&mut tape, graph, x)?;
            let loss = tape.mse(pred, &c.target)?;
            tape.value(loss)[[0, 0]]
        }
    };
    Ok(PairOutcome { objective, clean, grads })
}

pub fn build_pairs(scenarios: &[Scenario], w: usize) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::new();
    for (i, sc) in scenarios.iter().enumerate() {
        sc.series.check_graph(&sc.graph)?;
        pairs.extend(make_windows(&sc.series, w, sc.train_range.clone(), i)?);
    }
    Ok(pairs)
}

/// Summed clean one-step loss of the current parameters over every pair.
pub fn evaluate_loss(model: &GraphUNet, scenarios: &[Scenario]) -> Result<f64> {
    let pairs = build_pairs(scenarios, model.window())?;
    let mut total = 0.0;
    for p in &pairs {
        let pred = model.predict(&scenarios[p.scenario].graph, &p.window)?;
        total += (&pred - &p.target).mapv(|d| d * d).mean().expect("non-empty");
    }
    Ok(total)
}

/// Trains `model` in place and leaves it at the best checkpoint.
pub fn train(model: &mut GraphUNet, scenarios: &[Scenario], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, scenarios, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with<F>(model: &mut GraphUNet, scenarios: &[Scenario], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(Error::Invalid("no training scenarios".into()));
    }
    let pairs = build_pairs(scenarios, model.window())?;
    let sigma = cfg.effective_sigma();
    let noisy_run = sigma > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut lr = cfg.lr0;
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_store: ParamStore = model.store.clone();
    let mut since_best = 0usize;
    let mut plateau_best = f64::INFINITY;
    let mut plateau_wait = 0usize;
    let mut trace = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let noisy: Vec<TrainingPair> = if noisy_run {
            pairs.iter().map(|p| inject_noise(p, cfg.noise, sigma, &mut rng)).collect()
        } else {
            Vec::new()
        };
        let m: &GraphUNet = model;
        let run = |i: usize| -> Result<PairOutcome> {
            let graph = &scenarios[pairs[i].scenario].graph;
            if noisy_run {
                pair_pass(m, graph, &noisy[i], Some(&pairs[i]))
            } else {
                pair_pass(m, graph, &pairs[i], None)
            }
        };
        let outcomes: Vec<Result<PairOutcome>> = if cfg.workers > 1 {
            pool.install(|| (0..pairs.len()).into_par_iter().map(run).collect())
        } else {
            (0..pairs.len()).map(run).collect()
        };

        model.store.zero_grad();
        let (mut objective, mut clean) = (0.0, 0.0);
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let o = outcome?;
            if !o.objective.is_finite() || !o.clean.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, pair {i} (scenario `{}`)",
                    scenarios[pairs[i].scenario].name
                )));
            }
            objective += o.objective;
            clean += o.clean;
            model.store.accumulate(&o.grads);
        }

        if clean < best {
            best = clean;
            best_epoch = epoch;
            best_store = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: objective,
            loss: clean,
            lr,
            best,
        };
        on_epoch(&record);
        trace.push(record);

        if since_best >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
        if clean < plateau_best {
            plateau_best = clean;
            plateau_wait = 0;
        } else {
            plateau_wait += 1;
            if plateau_wait >= cfg.lr_patience {
                lr = (lr * cfg.lr_factor).max(cfg.lr_min);
                plateau_wait = 0;
            }
        }
        adam_step(&mut model.store, lr, AdamConfig::default()).map_err(|e| match e {
            Error::NonFiniteGradient(name) => {
                Error::NonFinite(format!("gradient of `{name}` at epoch {epoch}"))
            }
            other => other,
        })?;
    }
    model.store = best_store;
    model.store.zero_grad();
    Ok(TrainReport {
        trace,
        best_loss: best,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn series(t: usize, n: usize) -> SnapshotSeries {
        let fields = Array2::from_shape_fn((t, n), |(i, j)| (i * 10 + j) as f64);
        SnapshotSeries::new("g", 0.01, fields).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&series(150, 2), 20, 0..150, 0).unwrap().len(), 130);
        assert_eq!(make_windows(&series(150, 2), 40, 0..150, 0).unwrap().len(), 110);
        assert_eq!(make_windows(&series(21, 2), 20, 0..21, 0).unwrap().len(), 1);
        assert!(make_windows(&series(20, 2), 20, 0..20, 0).is_err());
        assert!(make_windows(&series(30, 2), 5, 0..31, 0).is_err());
    }

    #[test]
    fn window_contents() {
        let pairs = make_windows(&series(6, 2), 3, 1..6, 0).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].window, ndarray::array![[10.0, 20.0, 30.0], [11.0, 21.0, 31.0]]);
        assert_eq!(pairs[0].target, ndarray::array![[40.0], [41.0]]);
        assert_eq!(pairs[1].target, ndarray::array![[50.0], [51.0]]);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let pair = make_windows(&series(5, 3), 2, 0..5, 0).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [NoiseMode::None, NoiseMode::Input, NoiseMode::InputOutput] {
            assert_eq!(inject_noise(&pair, mode, 0.0, &mut rng), pair);
        }
        assert_eq!(inject_noise(&pair, NoiseMode::None, 0.5, &mut rng), pair);
    }

    #[test]
    fn input_noise_leaves_target() {
        let pair = make_windows(&series(5, 3), 2, 0..5, 0).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = inject_noise(&pair, NoiseMode::Input, 0.1, &mut rng);
        assert_eq!(noisy.target, pair.target);
        assert!(noisy.window.iter().zip(pair.window.iter()).all(|(a, b)| a != b));
        let both = inject_noise(&pair, NoiseMode::InputOutput, 0.1, &mut rng);
        assert!(both.target.iter().zip(pair.target.iter()).all(|(a, b)| a != b));
    }

    #[test]
    fn noise_statistics() {
        let sigma = 0.16;
        let pair = TrainingPair {
            scenario: 0,
            window: Array2::zeros((1000, 100)),
            target: Array2::zeros((1000, 1)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noisy = inject_noise(&pair, NoiseMode::Input, sigma, &mut rng);
        let n = noisy.window.len() as f64;
        let mean = noisy.window.sum() / n;
        let var = noisy.window.mapv(|v| (v - mean).powi(2)).sum() / n;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            noise_sigma: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
