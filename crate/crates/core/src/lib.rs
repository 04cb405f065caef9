//! Data-driven identification, error bounds, pre-conditioning and robust
//! state-feedback synthesis for linear and switched linear systems.
//!
//! The pipeline: simulate or load a trajectory ([`plant`]), build data
//! matrices ([`datamat`]), identify ([`identify`]), bound the estimation error
//! ([`bounds`]), optionally pre-condition ([`precond`]), then synthesize a
//! robust gain through a semidefinite program ([`synth`], [`lmi`]).

pub mod basis;
pub mod bounds;
pub mod datamat;
pub mod error;
pub mod identify;
pub mod io;
pub mod lmi;
pub mod numkernel;
pub mod plant;
pub mod precond;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use numkernel::Mat;
