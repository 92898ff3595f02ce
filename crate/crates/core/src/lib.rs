pub mod attention;
pub mod autograd;
pub mod bench;
pub mod cli;
pub mod config;
pub mod crossstitch;
pub mod diffusion;
pub mod error;
pub mod material;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod wavelet;

pub use error::{HimatError, Result};
pub use tensor::Tensor;

/// Library version recorded in every manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
