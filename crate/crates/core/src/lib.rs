pub mod autodiff;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod hfp;
pub mod membank;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod streams;
pub mod trainer;
pub mod ucf;

pub use autodiff::{Bindings, Graph, ParamSet, Tensor};
pub use error::{Error, Result};
pub use scalar::Real;

/// Working precision for training, checkpoints and evaluation.
pub type Array = Tensor<f64>;
pub type Array32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Params = ParamSet<f64>;
