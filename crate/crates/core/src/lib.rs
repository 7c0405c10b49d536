//! One-layer softmax-attention transformer trained by gradient descent on
//! circular random walks, with exact population gradients, closed-form
//! oracles and numerical checks of the training dynamics.

pub mod error;
pub mod gradients;
pub mod markov;
pub mod model;
pub mod posembed;
pub mod theorycheck;
pub mod trainer;
pub mod walkgen;

pub use error::{Error, Result};
