//! Output-feedback robust tube MPC for a multirotor, and tube-guided data
//! augmentation for learning a visuomotor policy from its demonstrations.

pub mod error;
pub mod learn;
pub mod linalg;
pub mod config;
pub mod control;
pub mod model;
pub mod qp;
pub mod rng;
pub mod setops;
pub mod synthesis;
pub mod vision;
pub mod world;

pub use error::{Error, Result};
