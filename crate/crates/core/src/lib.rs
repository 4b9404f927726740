//! Differentially private image generation at desk scale.
//!
//! The generator is trained only through a sanitized gradient: per-source
//! image gradients (critic, classifier, encoder) are clipped with error
//! feedback, perturbed with calibrated Gaussian noise, and back-propagated
//! into the generator. A Rényi-DP ledger tracks the cost of every release.

pub mod accountant;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod numeric;
pub mod sanitizer;
pub mod trainer;

pub use error::{Error, Result};
