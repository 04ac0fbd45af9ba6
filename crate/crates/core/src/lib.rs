//! Homography-equivariant representation learning at desk scale.
//!
//! Images seen from several related viewpoints are encoded into lists of
//! 3-vectors ([`vn::VNFeature`]); training pushes the representation of each
//! view to equal its neighbor's representation moved by the same homography
//! that relates the two images ([`home_loss`]).

pub mod data;
pub mod error;
pub mod geometry;
pub mod home_loss;
pub mod models;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;
pub mod vn;

pub use data::{Dataset, DatasetConfig, Image, Manifest, MultiViewSample, Split};
pub use error::{Error, Result};
pub use geometry::{Homography, HomographyBounds, HomographyParams, PointH};
pub use home_loss::{home_loss, NeighborGraph, ViewRepresentations};
pub use models::{Decoder, Encoder, Model, ModelConfig, Trainable};
pub use tensor::{Archive, Graph, Tensor, Var};
pub use trainer::{Checkpoint, CheckpointKind, Evaluation, Regime, TrainConfig};
pub use vn::{VNFeature, VnStack};
