//! Command-line front end for the cascade: TOML configuration, run and sweep
//! orchestration, report files, plots and overlay figures.

pub mod commands;
pub mod config;
pub mod overlay;
pub mod plot;

use mricascade::Error;
use serde_json::{json, Value};

/// Machine-readable form of an error, as printed on stderr.
pub fn error_json(err: &Error) -> Value {
    let mut v = json!({ "error": err.kind(), "message": err.to_string() });
    match err {
        Error::InvalidConfig { field, .. } => v["field"] = json!(field),
        Error::Io { path, .. }
        | Error::MalformedManifest { path, .. }
        | Error::DanglingReference { path, .. }
        | Error::Decode { path, .. }
        | Error::Encode { path, .. } => v["path"] = json!(path),
        _ => {}
    }
    v
}
