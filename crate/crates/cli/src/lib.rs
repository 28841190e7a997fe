//! Orchestration for the pipe-flow workbench binary: configuration parsing,
//! the subcommand implementations, and deterministic output emission with a
//! hashed manifest.

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::{parse_config, parse_config_str, RunConfig};

/// Process exit status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    /// A theory gate failed (exit condition, smallness budget,
    /// admissibility); the run still reports what it can.
    GateFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> u8 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::GateFailure => 2,
        }
    }
}
