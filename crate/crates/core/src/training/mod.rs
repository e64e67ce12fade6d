//! On-device training and inference: a fixed color/layout feature extractor
//! followed by a softmax classifier.

pub mod features;
mod model;
pub mod softmax;

pub use features::{FeatureExtractor, FeatureVector, HistPool, FEATURE_DIM, HIST_POOL_V1};
pub use model::{
    BlobSource, ClassifyError, ConfidenceVector, ModelFileError, TrainError, TrainedModel,
    TrainingEngine,
};
pub use softmax::{Hyper, Params};
