//! Command-line interface and HTTP service for sequential design campaigns
//! on the propanol/propyl-acetate bubble-point model.

pub mod args;
pub mod commands;
pub mod replay;
pub mod server;

use seqoed::Error;

/// One-line JSON error report, e.g.
/// `{"error":"parse","message":"parse error at row 2, column v: ..."}`.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
