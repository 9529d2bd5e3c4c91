//! Token-conditioned pole selective state-space operator.
//!
//! Each channel group owns a small bank of stable base poles. Every token rescales the pole
//! radii and angles, the modulated poles are multiplied out into a local denominator, and a
//! low-rank numerator drives a grouped recurrence. Around the operator sit a naive f64
//! oracle, a hand-written backward pass, z-domain diagnostics and a command-line driver.

pub mod analysis;
pub mod cli;
pub mod denominator;
pub mod distill;
pub mod error;
pub mod mat;
pub mod modulation;
pub mod numerator;
pub mod pole_bank;
pub mod scan;
pub mod sequence;
pub mod tensor_io;
pub mod verify;

pub use error::{Error, Result};
