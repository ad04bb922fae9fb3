//! Files, configuration and the command line around `onellm-core`.

pub mod binio;
pub mod checkpoint;
pub mod config;
mod error;
pub mod exec;
pub mod manifest;
pub mod metrics;
pub mod run;

pub use error::{Error, Result};
