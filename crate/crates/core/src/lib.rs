//! Hierarchical multi-agent navigation: a hazard-estimating hidden Markov model on laser
//! scans blends an analytic goal-seeking controller with a learned collision-avoidance
//! actor. Includes the simulator, an ORCA baseline, and the evaluation harness.

pub mod binio;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod control;
pub mod ddpg;
pub mod error;
pub mod eval;
pub mod geom;
pub mod hmm;
pub mod neural;
pub mod orca;
pub mod sim;

pub use error::{Error, Result};
