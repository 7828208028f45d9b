pub mod ergodic;
pub mod error;
pub mod experiments;
pub mod hj;
pub mod measures;
pub mod mfg;
pub mod model;
pub mod torus;
pub mod transport;
pub mod viscous;

pub use error::{Error, Result};
