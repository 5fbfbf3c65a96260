//! Files, configuration and command-line front end for `zori-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod zemb;

pub use config::RunConfig;
pub use error::{FormatError, Result, ZoriError};
