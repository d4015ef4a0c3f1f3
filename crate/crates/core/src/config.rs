//! Flat `key = value` config files that mirror command-line flags.
//!
//! Each key is a long flag name without the leading dashes. `true` turns a
//! switch on, `false` leaves it off. Blank lines and `#` comments are
//! ignored. Flags given on the command line win over the file.

use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim().trim_start_matches("--");
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn config_to_args(entries: &[(String, String)]) -> Vec<String> {
    let mut args = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "true" => args.push(format!("--{k}")),
            "false" => {}
            _ => {
                args.push(format!("--{k}"));
                args.push(v.clone());
            }
        }
    }
    args
}

/// Expands `--config FILE` in `argv`: the file's flags go right after the
/// subcommand, ahead of everything typed by the user, so later flags
/// override them.
pub fn expand_config_flag(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let (path, consumed) = match argv[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => (
            argv.get(pos + 1)
                .cloned()
                .ok_or_else(|| Error::Config("--config needs a file".into()))?,
            2,
        ),
    };
    let text = std::fs::read_to_string(Path::new(&path)).map_err(|e| Error::io(&path, e))?;
    let extra = config_to_args(&parse_config(&text)?);
    let mut rest = argv;
    rest.drain(pos..pos + consumed);
    // program name and subcommand come first
    let at = rest.len().min(2);
    let tail = rest.split_off(at);
    rest.extend(extra);
    rest.extend(tail);
    Ok(rest)
}
