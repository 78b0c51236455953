//! Compact slot labelling: a character-level word encoder, attention over
//! the utterance, block-diagonal dense layers and a linear-chain CRF.

pub mod ablation;
pub mod attention;
pub mod autograd;
pub mod char_encoder;
pub mod checkpoint;
pub mod crf;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
