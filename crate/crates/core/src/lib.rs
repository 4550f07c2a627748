//! Set-prediction detector trained with denoising queries, and the harness
//! that measures matching stability on synthetic scenes.

pub mod autodiff;
pub mod datagen;
pub mod denoising;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;

pub use denoising::{AttentionMask, DenoisingGroup, DenoisingQuery, GtObject, QueryBatch};
pub use error::{Error, Result};
pub use geometry::{BBox, NoiseConfig, Xyxy};
pub use matching::{Assignment, CostMatrix, MatchWeights};
pub use metrics::{EpochRecord, IndexVector};
pub use model::{ModelConfig, ModelParams};
