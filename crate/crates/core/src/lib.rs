pub mod ccr;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod synth;
pub mod tracklet;

pub use error::{Error, Result};
