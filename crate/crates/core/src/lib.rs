pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};
