//! Configuration, pipeline stages and artifact manifest behind the `cced`
//! command.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::CampaignConfig;
pub use error::{CliError, Result};
pub use pipeline::Pipeline;
