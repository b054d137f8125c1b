pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod optimizer;
pub mod resample;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod types;
pub mod victim;

pub use error::{Error, Result};
