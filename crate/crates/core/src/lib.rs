//! Video depth estimation with a per-frame transformer encoder and a decoder
//! head whose temporal layers cross-attend to keyframes sampled from the
//! whole video.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod encoder;
pub mod error;
pub mod head;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scheduler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
