//! Policy-gradient training with advantage-guided preference learning.
//!
//! The library trains a PPO agent whose behavior policy is the
//! product-of-experts fusion of a main policy head and a preference head;
//! the preference head is trained toward a Boltzmann distribution over
//! batch-normalized advantages. Everything is dependency-light and f64:
//! a small reverse-mode autodiff tape, distribution algebra, desk-scale
//! environments, the training loop, and a numerical verification suite.

pub mod advantage;
pub mod autograd;
pub mod cli;
pub mod distributions;
pub mod envs;
pub mod error;
pub mod losses;
pub mod networks;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use cli::run_cli;
