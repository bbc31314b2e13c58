//! Visuomotor policy, imitation learning loops and tube-guided data
//! augmentation.

pub mod net;
pub mod train;
pub mod data;
pub mod dagger;
