pub mod autograd;
mod binio;
pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use params::{FreezeMask, ParamStore, Session};
pub use tensor::{Real, Tensor};
