pub mod autodiff;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod losses;
pub mod oracles;
pub mod tensor;
pub mod timeline;
pub mod trainer;
pub mod velocity;

pub use error::{Error, Result};
pub use tensor::Mat;
