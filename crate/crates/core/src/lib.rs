//! Context-model codec and trainer for binarized multi-resolution hash-grid
//! feature fields.
//!
//! Feature tables hold ±1 values. Small context networks predict the
//! probability of +1 for every entry from already decoded coarser levels, and
//! a binary range coder turns those predictions into a compact bitstream.

pub mod codec;
pub mod context;
pub mod corpus;
pub mod entropy;
pub mod error;
pub mod field;
pub mod grid;
pub mod nn;
pub mod occupancy;

pub use codec::{decode_model, encode_model, Bitstream, EncodeReport};
pub use context::{Ablation, CodingMode, ContextConfig, ContextModel};
pub use error::{Error, ErrorClass, Result};
pub use field::{FieldModel, RdPoint, TargetField, TrainConfig};
pub use grid::{GridConfig, GridDims, LevelEmbedding, LevelGeometry, PlaneAxis};
pub use occupancy::{OccupancyGrid, ValidityCriterion};
