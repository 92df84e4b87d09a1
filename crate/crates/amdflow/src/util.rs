//! Shared helpers: subprocess control with timeouts and tiny TSV parsing.

use std::path::Path;
use std::process::{Child, ExitStatus};
use std::time::{Duration, Instant};

#[derive(Debug)]
pub enum CommandOutcome {
    Exited(ExitStatus),
    TimedOut,
}

/// Waits for `child` to exit, killing it once `timeout` elapses.
pub fn wait_with_timeout(mut child: Child, timeout: Duration) -> std::io::Result<CommandOutcome> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(CommandOutcome::Exited(status));
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(CommandOutcome::TimedOut);
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TsvError {
    #[error("{0}")]
    Io(std::io::Error),
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
}

/// Reads a two-column TSV file into `(line_number, key, value)` rows.
/// Blank lines are skipped; CRLF endings are tolerated.
pub fn read_tsv_pairs(path: &Path) -> Result<Vec<(usize, String, String)>, TsvError> {
    let text = std::fs::read_to_string(path).map_err(TsvError::Io)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let key = parts.next().unwrap_or("");
        let value = parts.next().ok_or_else(|| TsvError::BadLine {
            line: i + 1,
            reason: "expected two tab-separated fields".to_string(),
        })?;
        if key.is_empty() {
            return Err(TsvError::BadLine {
                line: i + 1,
                reason: "empty key".to_string(),
            });
        }
        out.push((i + 1, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Last `max_bytes` of a file as trimmed text; empty string on any failure.
pub fn tail_of_file(path: &Path, max_bytes: usize) -> String {
    match std::fs::read(path) {
        Ok(bytes) => {
            let start = bytes.len().saturating_sub(max_bytes);
            String::from_utf8_lossy(&bytes[start..]).trim().to_string()
        }
        Err(_) => String::new(),
    }
}
