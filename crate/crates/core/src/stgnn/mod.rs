//! Graph-WaveNet-style spatio-temporal network.
//!
//! Each layer applies a gated dilated causal convolution, mixes nodes through
//! the row-normalised graph and a learned adaptive adjacency, and adds skip
//! and residual paths. The feature map exposed for fusion is the pre-head
//! skip sum `[K, N, D]`; this choice of layer is an interpretation.

mod config;
mod data;
mod model;
mod train;

pub use config::StgnnConfig;
pub use data::WindowTensors;
pub use model::{adaptive_adjacency, forward_vars, init_params, support_tensor, FeatureMap, StgnnModel, StgnnOutput};
pub use train::{predict_raw, train_stage1, Stage1Data, TrainConfig, TrainLog};
