//! Segmentation of thin, heavily class-imbalanced bright structures in 3D
//! volumes.
//!
//! The pipeline: synthetic phantoms ([`data`]) feed patch-oversampled
//! training of a V-Net ([`vnet`]) under the Tversky loss ([`losses`]) with
//! AMSGrad ([`optim`]); inference tiles whole volumes, and
//! [`postproc`] keeps the largest connected components before
//! [`metrics`] scores the result.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod postproc;
pub mod rng;
pub mod vnet;

pub use error::{Error, Result};
