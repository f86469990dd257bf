pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod robustness;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
