//! Robust image watermarking: an encoder/decoder pair with SE blocks and a
//! message processor, trained against real and simulated JPEG compression
//! chosen per mini-batch.

pub mod error;
pub mod imaging;
pub mod jpeg;
pub mod network;
pub mod training;
pub mod checkpoint;
pub mod noise;
pub mod harness;

pub use error::{Error, Result};
