pub mod attention;
pub mod autograd;
pub mod conv;
pub mod episodes;
pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod spatial;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
