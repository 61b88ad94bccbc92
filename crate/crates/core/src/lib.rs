pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod control;
pub mod curves;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod generator;
pub mod imageio;
pub mod nn;
pub mod oracle;
pub mod pairs;
pub mod ranker;
pub mod rundir;
pub mod seed;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
