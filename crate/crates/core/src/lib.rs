//! Desk-scale simulator for personalized federated segmentation with a
//! shared encoder-decoder body, locally calibrated feature channels and
//! disagreement-aware prediction heads.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod hc;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pcs;
pub mod report;
pub mod seed;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
