//! Polynomial blocks of deep classifiers, with oracles that certify them.

pub mod algebra;
pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod netzoo;
pub mod oracle;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
