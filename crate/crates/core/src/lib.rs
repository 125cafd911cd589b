//! Heteroscedastic regression with a Taylor-composed noise variance.
//!
//! The model predicts, for each input, a diagonal Gaussian over the outputs.
//! Its variance combines two sources:
//!
//! * aleatoric noise, from a block of three networks where feature-noise
//!   variance is pushed through the mean network's input Jacobian and added
//!   to an output-noise variance ([`dtb`]), sharpened by contrasting clean
//!   and re-noised inputs ([`ncl`]);
//! * epistemic uncertainty, from a learned data-density score that blends the
//!   network prediction with a broad prior in sparsely sampled regions
//!   ([`dpm`], [`uco`]).
//!
//! [`training`] runs the end-to-end loop and inference, [`data`] provides the
//! toy generators and CSV ingestion, and [`experiments`] implements the
//! comparison, anti-noise, active-learning and ablation protocols.

pub mod autodiff;
pub mod data;
pub mod dpm;
pub mod dtb;
pub mod error;
pub mod experiments;
pub mod ncl;
pub mod training;
pub mod uco;

pub use error::{Result, TsnetError};
