use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{read_bytes, write_atomic, IoError, Result};

pub const REPORT_HEADER_PREFIX: &str = "# wipose report";

/// Writes `body` as pretty JSON below a single header line, which is the only
/// place the wall-clock time appears.
pub fn write_report<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut text = format!("{REPORT_HEADER_PREFIX} kind={kind} generated_unix={secs}\n");
    text.push_str(&serde_json::to_string_pretty(body)?);
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Everything after the header line.
pub fn read_report_body(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| IoError::Parse(e.to_string()))?;
    match text.split_once('\n') {
        Some((head, body)) if head.starts_with(REPORT_HEADER_PREFIX) => Ok(body.to_string()),
        _ => Err(IoError::Parse(format!("{} is not a report", path.display()))),
    }
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_report_body(path)?)?)
}
