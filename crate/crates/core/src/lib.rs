//! Fully aligned referring segmentation network on the `fan-autograd` tape.
//!
//! Image and text encoders feed four interaction stages: per-level
//! activation, vision projection with pyramid fusion, a language decoder
//! over visual memory, and a similarity mask head.

pub mod ablation;
pub mod activation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod l2v;
pub mod model;
pub mod nn;
pub mod pnm;
pub mod rng;
pub mod text;
pub mod train;
pub mod v2l;
pub mod vision;

pub use config::{ModelConfig, TextGranularity, TrainConfig, VpmMode};
pub use error::{FanError, Result};
pub use head::{binarize, binarize_probs, iou, precision_at, BinaryMask};
pub use model::{FanModel, ForwardOutput, LossWeights, Prediction};
pub use text::{tokenize, TokenSequence, Vocabulary};
pub use vision::Image;
