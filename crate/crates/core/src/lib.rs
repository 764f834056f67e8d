pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod overlay;
pub mod recognition;
pub mod roi;
pub mod rpn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use backbone::{Backbone, BackboneConfig, FeatureMap, Fpn, Level};
pub use error::{Error, Result};
pub use geometry::{Label, TextBox};
pub use metrics::{EvalReport, MatchResult};
pub use recognition::{Alphabet, AttentionMode, RecognitionConfig, RecognizerKind};
pub use roi::{RecognitionPoolConfig, RoIFeature};
pub use rpn::{Anchor, BoxDelta, RpnConfig};
pub use tensor::{Graph, ParamStore, Tensor, Var};
pub use checkpoint::Checkpoint;
pub use config::{Config, InferConfig, ModelConfig, TrainConfig};
pub use dataset::{Dataset, Sample};
pub use model::{Detection, Model, MultiTaskLoss};
pub use synth::GenConfig;
pub use train::{EpochLog, Trainer};
