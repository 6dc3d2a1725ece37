//! Multi-label dysfluency detection over precomputed speech-backbone hidden
//! states: the pooling head, its losses, the dataset protocol, training and
//! evaluation.

pub mod datasets;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod fsutil;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use datasets::{Class, ClassSet, ClipRecord, DatasetId, Labels, Manifest, Split};
pub use error::{Error, Result};
pub use features::{read_features, write_features, FeatureFile, FeatureStore};
pub use head::{head_forward, init_params, HeadDims, HeadOutput, HeadParams};
pub use losses::LossConfig;
pub use metrics::{evaluate, prf1, MetricsReport};
pub use tensor::Tensor;
pub use training::{train, Checkpoint, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
