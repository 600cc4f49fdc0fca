//! Online multi-object tracking driven by an autoregressive motion model.
//!
//! Box velocities are tokenized with per-component k-means codebooks; a
//! recurrent network predicts a categorical distribution over the next
//! token. The tracker uses those distributions to score detection-to-track
//! assignments and to inpaint detection gaps by sampling continuations.

pub mod assignment;
pub mod codebook;
pub mod config;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod mot_io;
pub mod pipeline;
pub mod scorer;
pub mod synth;
pub mod tracker;

pub use codebook::{ClusterIndexQuad, Codebook};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{apply_velocity, iou, velocity, Axis, BoundingBox, FrameGeometry, VelocityDelta};
pub use model::{
    init_state, log_likelihood, sample, step, step_batch, DistributionQuad, ModelConfig, ModelWeights,
    RecurrentState,
};
pub use metrics::{evaluate, MetricsReport};
pub use synth::{generate, MotionFamily, Scene, SceneSpec};
