//! Stateful mixture-of-experts routing on a small reverse-mode autodiff core.

pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod models;
pub mod routing;
pub mod tasks;

pub use error::{Error, Result};
