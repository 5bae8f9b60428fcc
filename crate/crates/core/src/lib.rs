//! A desk-scale lab for mean-shift ("mimetic") initialization of MLP blocks.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod population;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{build_model, Family, ModelConfig, TinyModel};
pub use tensor::Tensor;
