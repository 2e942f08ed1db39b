//! Command-line front end: argument parsing lives in [`args`], each
//! subcommand in [`commands`].

pub mod args;
pub mod commands;

use std::fmt;

/// Usage errors exit with status 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(rnvc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<rnvc::Error> for CliError {
    fn from(e: rnvc::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

/// Cap the worker pool from `RNVC_THREADS`.
pub fn configure_threads(value: Option<&str>) -> Result<(), CliError> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("RNVC_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_must_be_positive() {
        assert!(configure_threads(None).is_ok());
        for bad in ["0", "-3", "many", ""] {
            assert_eq!(configure_threads(Some(bad)).unwrap_err().exit_code(), 2, "{bad}");
        }
    }
}
