//! Batch runner behind the `ctrl` binary: config loading, experiment
//! orchestration, artifact writing and exit-code mapping.

pub mod commands;
pub mod config;

use std::path::Path;

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// A check ran to completion and did not meet its threshold.
    pub const CHECK_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const DIVERGED: u8 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] ctrl_core::Error),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use ctrl_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::DimensionMismatch { .. } | E::NoData | E::NoiseSupport => exit::CONFIG,
                E::Io(_) | E::Parse { .. } | E::Format(_) => exit::IO,
                E::NonFinite(_) | E::Diverged { .. } | E::Singular(_) | E::Environment(_) => exit::DIVERGED,
            },
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

/// Parses `a..b` (exclusive) or `a..=b`.
pub fn parse_seed_range(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("seed range {text:?} must look like 0..4 or 0..=3"));
    let (lo, hi, inclusive) = if let Some((a, b)) = text.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = text.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
    let seeds: Vec<u64> = if inclusive { (lo..=hi).collect() } else { (lo..hi).collect() };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seed_range("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seed_range("2..=3").unwrap(), vec![2, 3]);
        assert!(parse_seed_range("3..3").is_err());
        assert!(parse_seed_range("x").is_err());
    }

    #[test]
    fn core_errors_map_to_documented_codes() {
        let code = |e: ctrl_core::Error| CliError::from(e).exit_code();
        assert_eq!(code(ctrl_core::Error::NoData), exit::CONFIG);
        assert_eq!(code(ctrl_core::Error::Parse { line: 1, msg: String::new() }), exit::IO);
        assert_eq!(code(ctrl_core::Error::Diverged { what: "x".into(), step: 0 }), exit::DIVERGED);
    }
}
