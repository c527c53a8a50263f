pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod flow_ops;
pub mod gradcheck;
pub mod moco;
pub mod motion_sampling;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
