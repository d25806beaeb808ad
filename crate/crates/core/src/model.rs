//! The assembled Graph U-Net.
//!
//! Encoder level `l` runs `conv -> norm -> ELU` mapping `c_l -> c_{l+1}`,
//! records the block output as a skip feature, then pools (when enabled).
//! A bridge block runs at the coarsest level. Each decoder level unpools,
//! concatenates the matching skip feature along channels, and maps back to a
//! single channel. The final decoder convolution has neither norm nor
//! activation so that the output can take any sign.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::conv::{Conv, GcnLayer, GcnVariant, GmmLayer};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::norm::{NormKind, NormLayer};
use crate::pool::{gunpool, GateActivation, PoolLayer, PoolRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    GcnVanilla,
    GcnImproved,
    GcnImprovedWeighted,
    Gmm,
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::GcnVanilla => "gcn_vanilla",
            Operator::GcnImproved => "gcn_improved",
            Operator::GcnImprovedWeighted => "gcn_improved_weighted",
            Operator::Gmm => "gmm",
        })
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gcn_vanilla" | "gcn" => Operator::GcnVanilla,
            "gcn_improved" => Operator::GcnImproved,
            "gcn_improved_weighted" => Operator::GcnImprovedWeighted,
            "gmm" => Operator::Gmm,
            other => return Err(Error::Config(format!("unknown operator `{other}`"))),
        })
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Layer => "layer",
            NormKind::Graph => "graph",
            NormKind::None => "none",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "layer" | "ln" => NormKind::Layer,
            "graph" | "gn" => NormKind::Graph,
            "none" => NormKind::None,
            other => return Err(Error::Config(format!("unknown normalization `{other}`"))),
        })
    }
}

impl fmt::Display for GateActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateActivation::Tanh => "tanh",
            GateActivation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for GateActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(GateActivation::Tanh),
            "sigmoid" => Ok(GateActivation::Sigmoid),
            other => Err(Error::Config(format!("unknown gate activation `{other}`"))),
        }
    }
}

/// Architecture schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub operator: Operator,
    /// GMM kernel count (ignored by the GCN operators).
    pub kernels: usize,
    /// `[W, c_1, ..., 1]`: the first entry is the input window length.
    pub encoder_channels: Vec<usize>,
    /// `None` disables pooling.
    pub pooling_ratio: Option<f64>,
    pub norm: NormKind,
    pub seed: u64,
    /// Initial GMM kernel mean and standard deviation (meters). `None` lets
    /// the trainer use the mean edge length of the first training mesh;
    /// a bare build then falls back to [`DEFAULT_LENGTH_SCALE`].
    pub length_scale: Option<f64>,
    pub gmm_self_loops: bool,
    /// Adds a per-node `x_i Θ_root` term to every GMM layer.
    pub gmm_root_weight: bool,
    pub gate: GateActivation,
    pub power2_adjacency: bool,
    pub bias: bool,
}

pub const DEFAULT_LENGTH_SCALE: f64 = 0.05;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            operator: Operator::Gmm,
            kernels: 1,
            encoder_channels: vec![20, 15, 10, 5, 1],
            pooling_ratio: Some(0.6),
            norm: NormKind::Layer,
            seed: 0,
            length_scale: None,
            gmm_self_loops: true,
            gmm_root_weight: true,
            gate: GateActivation::Tanh,
            power2_adjacency: false,
            bias: true,
        }
    }
}

impl ModelConfig {
    /// Single-mesh configuration: GMM with one kernel, window 20, ratio 0.6, LN.
    pub fn single_mesh() -> Self {
        ModelConfig::default()
    }

    /// Multi-scenario configuration: GMM with three kernels, window 40, no pooling, LN.
    pub fn inductive() -> Self {
        ModelConfig {
            kernels: 3,
            encoder_channels: vec![40, 20, 10, 5, 1],
            pooling_ratio: None,
            ..ModelConfig::default()
        }
    }

    pub fn window(&self) -> usize {
        self.encoder_channels[0]
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let ch = &self.encoder_channels;
        if ch.len() < 2 {
            return Err(Error::Config("encoder_channels needs at least two entries".into()));
        }
        if ch.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if *ch.last().unwrap() != 1 {
            return Err(Error::Config("the last encoder channel count must be 1".into()));
        }
        if let Some(r) = self.pooling_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("pooling ratio must lie in (0, 1], got {r}")));
            }
        }
        if self.operator == Operator::Gmm && self.kernels == 0 {
            return Err(Error::Config("GMM needs at least one kernel".into()));
        }
        if self.length_scale.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Config("length_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub conv: Conv,
    pub norm: NormLayer,
}

impl Block {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, g: &Graph, x: Var, activate: bool) -> Result<Var> {
        let h = self.conv.forward(tape, store, g, x)?;
        let h = self.norm.forward(tape, store, h)?;
        Ok(if activate { tape.elu(h) } else { h })
    }
}

#[derive(Debug, Clone)]
pub struct GraphUNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Vec<Block>,
    pub pools: Vec<PoolLayer>,
    pub bridge: Block,
    /// `decoder[l]` consumes skip feature `l`; `decoder[0]` is the output layer.
    pub decoder: Vec<Block>,
}

/// Intermediate structure of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub records: Vec<PoolRecord>,
}

impl GraphUNet {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let ch = config.encoder_channels.clone();
        let levels = ch.len() - 1;

        let conv = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fin: usize, fout: usize| -> Result<Conv> {
            Ok(match config.operator {
                Operator::Gmm => {
                    let mut l = GmmLayer::new(store, rng, name, config.kernels, fin, fout, config.length_scale.unwrap_or(DEFAULT_LENGTH_SCALE), config.bias)?;
                    l.include_self_loops = config.gmm_self_loops;
                    if config.gmm_root_weight {
                        l = l.with_root_weight(store, rng, name);
                    }
                    Conv::Gmm(l)
                }
                op => {
                    let variant = match op {
                        Operator::GcnVanilla => GcnVariant::Vanilla,
                        Operator::GcnImproved => GcnVariant::Improved,
                        _ => GcnVariant::ImprovedWeighted,
                    };
                    Conv::Gcn(GcnLayer::new(store, rng, name, variant, fin, fout, config.bias))
                }
            })
        };
        // per-node statistics over a single feature are degenerate, so LN is
        // skipped on one-channel blocks
        let norm = |store: &mut ParamStore, name: &str, channels: usize| {
            let kind = if config.norm == NormKind::Layer && channels == 1 {
                NormKind::None
            } else {
                config.norm
            };
            NormLayer::new(store, name, kind, channels)
        };

        let mut encoder = Vec::with_capacity(levels);
        let mut pools = Vec::new();
        for l in 0..levels {
            let name = format!("enc{l}");
            let c = conv(&mut store, &mut rng, &name, ch[l], ch[l + 1])?;
            let n = norm(&mut store, &format!("{name}.norm"), ch[l + 1]);
            encoder.push(Block { conv: c, norm: n });
            if let Some(ratio) = config.pooling_ratio {
                let mut p = PoolLayer::new(&mut store, &mut rng, &format!("pool{l}"), ch[l + 1], ratio)?;
                p.gate = config.gate;
                p.use_power2_adjacency = config.power2_adjacency;
                pools.push(p);
            }
        }
        let bottom = ch[levels];
        let bridge = Block {
            conv: conv(&mut store, &mut rng, "bridge", bottom, 1)?,
            norm: norm(&mut store, "bridge.norm", 1),
        };
        let mut decoder: Vec<Option<Block>> = vec![None; levels];
        for l in (0..levels).rev() {
            let name = format!("dec{l}");
            let c = conv(&mut store, &mut rng, &name, 1 + ch[l + 1], 1)?;
            let n = if l == 0 {
                NormLayer::new(&mut store, &format!("{name}.norm"), NormKind::None, 1)
            } else {
                norm(&mut store, &format!("{name}.norm"), 1)
            };
            decoder[l] = Some(Block { conv: c, norm: n });
        }
        Ok(GraphUNet {
            config,
            store,
            encoder,
            pools,
            bridge,
            decoder: decoder.into_iter().map(|b| b.expect("built")).collect(),
        })
    }

    pub fn window(&self) -> usize {
        self.config.window()
    }

    pub fn forward(&self, tape: &mut Tape, g: &Graph, window: Var) -> Result<Var> {
        self.forward_traced(tape, g, window).map(|(v, _)| v)
    }

    pub fn forward_traced(&self, tape: &mut Tape, g: &Graph, window: Var) -> Result<(Var, ForwardTrace)> {
        self.forward_with_store(tape, &self.store, g, window)
    }

    /// Forward pass reading parameters from `store` instead of the model's own
    /// (same layout); used by the finite-difference oracle.
    pub fn forward_with_store(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &Graph,
        window: Var,
    ) -> Result<(Var, ForwardTrace)> {
        let (rows, cols) = tape.shape(window);
        if cols != self.window() {
            return Err(Error::shape(
                "forward",
                format!("window has {cols} snapshots, model expects {}", self.window()),
            ));
        }
        if rows != g.num_nodes() {
            return Err(Error::shape(
                "forward",
                format!("window has {rows} rows for a {}-node graph", g.num_nodes()),
            ));
        }
        let mut trace = ForwardTrace::default();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut graph: Cow<'_, Graph> = Cow::Borrowed(g);
        // graph at each encoder level, reused on the way up so cached
        // self-loop edges survive
        let mut level_graphs = Vec::with_capacity(self.pools.len());
        let mut h = window;
        for (l, block) in self.encoder.iter().enumerate() {
            h = block.forward(tape, store, &graph, h, true)?;
            skips.push(h);
            if let Some(pool) = self.pools.get(l) {
                let pooled = pool.forward(tape, store, &graph, h)?;
                level_graphs.push(std::mem::replace(&mut graph, Cow::Owned(pooled.graph)));
                h = pooled.x;
                trace.records.push(pooled.record);
            }
        }
        h = self.bridge.forward(tape, store, &graph, h, true)?;
        for l in (0..self.decoder.len()).rev() {
            if let Some(record) = trace.records.get(l) {
                let (_, up) = gunpool(tape, record, h)?;
                graph = level_graphs.pop().expect("one graph per pooled level");
                h = up;
            }
            h = tape.concat_cols(h, skips[l])?;
            h = self.decoder[l].forward(tape, store, &graph, h, l != 0)?;
        }
        Ok((h, trace))
    }

    /// One-step prediction without keeping the tape.
    pub fn predict(&self, g: &Graph, window: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let w = tape.constant(window.clone());
        let out = self.forward(&mut tape, g, w)?;
        Ok(tape.value(out).clone())
    }

    /// Pool records of one forward pass (empty without pooling).
    pub fn pool_trace(&self, g: &Graph, window: &Array2<f64>) -> Result<Vec<PoolRecord>> {
        let mut tape = Tape::new();
        let w = tape.constant(window.clone());
        Ok(self.forward_traced(&mut tape, g, w)?.1.records)
    }
}
