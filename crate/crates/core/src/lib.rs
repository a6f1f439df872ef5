//! Two-stage transformer fingerprint matching.
//!
//! Stage 1 encodes an image into patch tokens and a unit-norm global
//! embedding. Stage 2 refines a candidate pair with two-way cross-attention
//! over their token sets. Both are trained with a multi-similarity loss and
//! evaluated with EER, TAR@FAR and CMC.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod msloss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{Batch, BatchConfig, Dataset, Image, Modality, Rotation, Sample, Split};
pub use encoder::{Encoder, EncoderConfig, GlobalEmbedding, TokenSet};
pub use error::{Error, Result};
pub use fusion::{fused_score, Fusion, FusionConfig, PairScore};
pub use metrics::{ScoreReport, ScoreSet};
pub use msloss::{LossConfig, SimilarityMatrix};
pub use params::ParamStore;
pub use tensor::{Matrix, Real};
pub use trainer::{EvalConfig, Model, Protocol, TrainConfig};
