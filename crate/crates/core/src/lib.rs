//! Graph U-Net surrogate for mesh-agnostic spatio-temporal flow prediction.
//!
//! The crate is organized bottom-up:
//!
//! * [`graph`] and [`formats`]: immutable meshes, snapshot series, and their text formats.
//! * [`autodiff`]: a small reverse-mode engine over dense `f64` matrices, Adam, and a
//!   finite-difference oracle.
//! * [`conv`], [`pool`], [`norm`]: the layers (GCN variants, Gaussian-mixture
//!   convolution, top-k pooling/unpooling, layer and graph normalization).
//! * [`model`]: the assembled Graph U-Net.
//! * [`train`] and [`rollout`]: sliding-window training with noise injection, and
//!   autoregressive inference with its error metric.
//! * [`synth`]: a synthetic vortex-street generator standing in for CFD data.
//! * [`config`] and [`experiment`]: text configs and the experiment runners used by the CLI.

pub mod autodiff;
pub mod config;
pub mod conv;
mod error;
pub mod experiment;
pub mod formats;
pub mod graph;
pub mod model;
pub mod norm;
pub mod pool;
pub mod rollout;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use graph::{build_graph, induced_subgraph, restrict_series, Graph, NodeMap, SnapshotSeries};
pub use model::{GraphUNet, ModelConfig};
pub use rollout::{rollout, rollout_mse, Predictor, ProbeSet, RolloutResult};
pub use train::{train, NoiseMode, TrainConfig};
