//! Conformer-transducer speech recognition with dynamic sparse attention
//! masks, silence-triggered prediction-state resets and overlapping
//! long-form segmentation.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model_io;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod segmentation;
pub mod transducer;

pub use error::{Error, Result};
