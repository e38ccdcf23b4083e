#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod latent;
pub mod mil;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
