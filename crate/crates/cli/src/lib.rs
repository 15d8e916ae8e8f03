//! Shared plumbing for the `hub`, `wallet` and `simnet` binaries.

use std::process::ExitCode;

use serde::Serialize;
use upc_core::protocol::ChannelMode;

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
}

/// Prints one JSON record on stdout.
pub fn emit(record: &impl Serialize) {
    println!("{}", serde_json::to_string(record).expect("records serialize"));
}

pub fn parse_mode(s: &str) -> Result<ChannelMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "serialized" => Ok(ChannelMode::Serialized),
        "concurrent" => Ok(ChannelMode::Concurrent),
        _ => Err(format!("unknown mode {s:?}; expected serialized or concurrent")),
    }
}

/// Exit status for a command: 0 when it succeeded, 1 when it ran but the
/// outcome was FAILED, 2 when it could not run. Errors are reported as a
/// FAILED record on stdout as well as on stderr.
pub fn finish(result: anyhow::Result<bool>) -> ExitCode {
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            emit(&serde_json::json!({ "outcome": "FAILED", "error": format!("{e:#}") }));
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
