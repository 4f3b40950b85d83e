//! File formats, run directories and the command-line front end around
//! `lpmlab-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod oracle;
pub mod pipeline;
pub mod run;

use std::fmt;

/// Bad invocation: unknown flag, missing value, unknown setting. Maps to
/// exit status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
