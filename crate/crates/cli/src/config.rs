//! `key = value` config files. Entries become flags placed before the
//! command-line flags of the subcommand, and are skipped when the same flag
//! is given explicitly.

use std::path::Path;

use anyhow::{Context, Result};

use crate::UsageError;

/// Parses a config file into `(key, value)` pairs. Blank lines, `#`
/// comments and `[section]` headers are ignored.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, UsageError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key = value, got {line:?}", i + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", i + 1)));
        }
        out.push((key, v.trim().to_owned()));
    }
    Ok(out)
}

fn given(args: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    args.iter().any(|a| a == &flag || a.starts_with(&format!("{flag}=")))
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_owned());
        }
    }
    None
}

/// Returns `argv` with config-file entries spliced in after the subcommand.
pub fn merge(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(sub) = argv.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| UsageError(format!("cannot read config {path}: {e}")))
        .context("loading config")?;
    let explicit = &argv[sub + 1..];
    let mut extra = Vec::new();
    for (key, value) in parse(&text)? {
        if key == "config" || given(explicit, &key) {
            continue;
        }
        match value.as_str() {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            _ => extra.push(format!("--{key}={value}")),
        }
    }
    let mut out = argv[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(explicit);
    Ok(out)
}
