//! Mask-conditioned local low-light image enhancement.
//!
//! A two-channel region mask splits the image into an area to brighten (A),
//! a transition band (B) and an area to keep unchanged (C). Enhancement
//! networks are made mask-aware by replacing some of their normalization
//! layers with region-aware normalization ([`ranlen`]), whose per-pixel
//! scale and bias are predicted from the mask. Training applies different
//! objectives per area ([`losses`]), with an edge-aware second-order
//! smoothness penalty on the band.

pub mod autograd;
pub mod backbones;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod ranlen;
pub mod stencil;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use conv::Padding;
pub use error::{Error, ErrorKind, Result};
pub use backbones::{enhance_rgb, Backbone, Conditioning, Model, ModelConfig};
pub use checkpoint::Checkpoint;
pub use masks::{AreaPartition, BandMode, BinaryMap, CircleSpec, RegionMask};
pub use trainer::TrainConfig;
pub use tensor::{Real, Shape, Tensor};
