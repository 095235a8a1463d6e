//! Volumetric segmentation toolkit: a small reverse-mode tensor engine,
//! squeeze-and-excitation residual U-Nets, class-imbalance losses with
//! missing-annotation masking, surface metrics, synthetic head-and-neck
//! phantoms and a two-phase trainer.

pub mod blocks;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod trainer;
pub mod volgrid;

pub use error::{Error, Result};
