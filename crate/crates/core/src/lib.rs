//! Grouped vector quantization with a learned organizing projection.

pub mod analysis;
pub mod codebook;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod linalg;
pub mod ogdr;
pub mod par;
pub mod quantizer;
pub mod tensor;
pub mod toy;
pub mod vae;

pub use error::{Error, Result};
