//! Weakly supervised contrastive pretraining with gradient surgery for
//! multiple-instance learning on synthetic whole-slide patch features.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod losses;
pub mod matrix;
pub mod mil;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod surgery;

pub use error::{Error, Result};
pub use matrix::Matrix;
