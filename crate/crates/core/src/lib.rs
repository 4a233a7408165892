pub mod augment;
pub mod backbone;
pub mod classifier;
pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod eval_report;
pub mod fixture;
pub mod fsio;
pub mod imaging;
pub mod pipeline;
pub mod rng;
pub mod stain_norm;
pub mod tensor;

pub use error::{Error, Result};
