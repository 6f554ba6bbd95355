//! Compact anchor-free one-stage detector: CSP-style backbone, top-down
//! neck with three branches and per-level heads. In DiffYOLO mode a
//! zero-initialised residual adapter mixes fused diffusion features into one
//! neck branch, so an untrained adapter reproduces the baseline exactly.

mod augment;
mod decode;
mod loss;
mod model;
mod train;

pub use augment::{Augment, Transform};
pub use decode::{decode, decode_and_nms, decode_box, nms, DecodeConfig};
pub use loss::{assign_targets, detection_loss, level_for, LossComponents, LossVars, LossWeights, Target};
pub use model::{Detector, DetectorConfig, InjectionConfig, ParamGroup, RawPredictions, STRIDES};
pub use train::{
    load_detector, save_detector, train_detector, DetectorCheckpoint, DetectorMode, DetectorTrainHistory,
    FeatureBinding, TrainPolicy, Trainable,
};
