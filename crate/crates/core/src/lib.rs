//! Spatially heterogeneous losses for semi-supervised segmentation.
//!
//! Pixels are split into four regions by whether two predictions agree and
//! whether the reference prediction is confident. Each region receives its
//! own loss weight, thresholds adapt per class, and the resulting losses are
//! wired into Mean Teacher, cross pseudo supervision, FixMatch and R-Drop
//! training loops around a tiny convolutional classifier.

pub mod backbones;
pub mod cli;
pub mod error;
pub mod grid;
pub mod hetloss;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod synthdata;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{argmax, max_prob, one_hot, softmax, Image, LabelMap, LogitMap, ProbMap, Region, RegionMap};
pub use hetloss::{check_gradient, het_ce, het_dice, het_mse, GradWrt, LossOutput};
pub use model::{DropoutSpec, ForwardCache, ParamGrads, TinySegNet};
pub use partition::{
    class_mean_conf, quadripartition, region_accuracy, region_sizes, ClassConfidence, EmaOrientation,
    RegionAccuracy, RegionCounts, ThresholdTracker,
};
pub use weights::{lambda_warmup, make_schedule, phi, DecayFunction, Ordering, WeightSchedule};
