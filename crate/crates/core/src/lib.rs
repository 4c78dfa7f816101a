//! Attention U-Net segmentation with a style-based generator for synthetic
//! augmentation, trained jointly in a cycle-consistent adversarial loop.

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod disc;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod perceptual;
pub mod style;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod unet;
pub mod viz;

pub use config::TrainConfig;
pub use data::{load_dataset, split_dataset, DatasetSplit, SamplePair};
pub use error::{Error, Result};
pub use metrics::{evaluate_dataset, SegReport};
pub use style::{GenConfig, GenModelState};
pub use tensor::Tensor;
pub use trainer::{train_sagegan, CycleState};
pub use unet::{pretrain_segmenter, SegModelState, UNetConfig};
