pub mod autodiff;
pub mod capsnet;
#[cfg(feature = "cli")]
pub mod cli;
pub mod dataset;
pub mod gradcheck;
pub mod imaging;
pub mod metrics;
mod par;
pub mod synth;
pub mod tensor;
pub mod train;
