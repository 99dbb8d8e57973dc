//! Optimization, loss assembly, the two pretraining stages, the adversarial
//! loop and resumable checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod losses;
pub mod pretrain;
pub mod trainer;

pub use adam::Adam;
pub use losses::{LossBundle, TERM_NAMES};
