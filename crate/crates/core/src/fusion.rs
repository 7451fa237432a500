//! Stage 2: channel-wise graph attention fusing each GCT node's feature map
//! with the camera feature maps, a predictor network over the fused maps,
//! and the learnable two-term MAE loss.

mod loss;
mod mgat;
mod model;
mod samples;
mod train;

pub use loss::{dynamic_loss, dynamic_loss_vars, free_nodes, theta_for_lambda, LossBreakdown, PredictionBatch};
pub use mgat::{candidate_mask, init_mgat, mgat_fuse, mgat_vars, FusionBatch, MgatConfig, MgatOutput, MASKED};
pub use model::{
    batch_loss, predict_samples, stage2_forward, DynamicLossModel, FusionConfig, FusionModel, GctOnlyModel, THETA,
};
pub use samples::{Block, SampleSet, SampleSpec};
pub use train::{camera_mae, train_dynamic, train_stage2, Stage2Log};
