//! Single-visit and multi-visit two-view CNN classifiers for kidney
//! ultrasound sequences, with everything needed to train and evaluate them
//! on synthetic cohorts.
//!
//! | module | contents |
//! |---|---|
//! | [`autograd`] | tensors, reverse-mode differentiation, weight files |
//! | [`imageproc`] | center crop, CLAHE, bilinear resize, PGM I/O |
//! | [`synthdata`] | synthetic cohorts, manifests, patient-level splits |
//! | [`network`] | Siamese baseline and the four temporal fusion heads |
//! | [`trainer`] | SGD with gradient accumulation, random search + k-fold CV |
//! | [`metrics`] | AUROC, average precision, BCa bootstrap intervals |
//! | [`harness`] | first-vs-latest and fusion-comparison experiments |

pub mod autograd;
pub mod error;
pub mod harness;
pub mod imageproc;
pub mod metrics;
pub mod network;
mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
