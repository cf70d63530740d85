pub mod attack;
pub mod baselines;
pub mod craft;
pub mod error;
pub mod harness;
pub mod leakage;
pub mod nas;
pub mod noise;
pub mod par;
pub mod rng;

pub use error::{CoreError, Result};
