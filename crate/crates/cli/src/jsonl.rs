use std::fs;
use std::io::Read;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::CliError;

/// Worker pool sized by `RSVL_THREADS`, or rayon's default when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("RSVL_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => b = b.num_threads(n),
            _ => {
                return Err(CliError::format(format!(
                    "RSVL_THREADS must be a positive integer, got `{v}`"
                )))
            }
        }
    }
    b.build().map_err(|e| CliError::Internal(e.to_string()))
}

/// Reads a whole file (or stdin for `-`) as UTF-8 text.
pub fn read_text(path: &Path) -> Result<String, CliError> {
    let bytes = if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::stdin()
            .read_to_end(&mut buf)
            .map_err(|e| CliError::io(path, e))?;
        buf
    } else {
        fs::read(path).map_err(|e| CliError::io(path, e))?
    };
    if let Some(i) = bytes.iter().position(|&b| b == 0) {
        return Err(CliError::format(format!(
            "{}: binary data (NUL byte at offset {i})",
            path.display()
        )));
    }
    String::from_utf8(bytes).map_err(|e| {
        CliError::format(format!(
            "{}: not valid UTF-8 (at byte {})",
            path.display(),
            e.utf8_error().valid_up_to()
        ))
    })
}

/// A non-empty line of a JSONL file: 1-based line number and content.
#[derive(Debug, Clone, Copy)]
pub struct Line<'a> {
    pub number: usize,
    pub text: &'a str,
}

/// Splits on LF and drops blank lines. A trailing CR is kept so callers can
/// flag it.
pub fn lines(text: &str) -> Vec<Line<'_>> {
    text.split('\n')
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, text)| Line {
            number: i + 1,
            text,
        })
        .collect()
}

/// Deserializes one JSON value and collects the paths of keys the target
/// type does not know.
pub fn parse_value<T: DeserializeOwned>(text: &str) -> Result<(T, Vec<String>), serde_json::Error> {
    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_ignored::deserialize(&mut de, |path| unknown.push(path.to_string()))?;
    de.end()?;
    Ok((value, unknown))
}

/// Reads and deserializes a JSON file, also returning unknown key paths.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(T, Vec<String>), CliError> {
    let text = read_text(path)?;
    parse_value(&text).map_err(|e| CliError::format(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
