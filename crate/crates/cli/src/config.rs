//! `--config` files: `key = value` lines naming long flags of the subcommand.
//! Their values are spliced in ahead of the real flags, so anything given on
//! the command line wins.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::CommandFactory;

use crate::args::Cli;
use crate::CliError;

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        out.push((key, v.trim().trim_matches('"').to_string()));
    }
    Ok(out)
}

fn find_config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Some(rest.into());
        }
    }
    None
}

/// Returns `args` with the entries of any `--config` file inserted right after the subcommand.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = find_config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let entries = parse_config(&text)?;
    let Some(sub_name) = args.get(1).and_then(|s| s.to_str()).map(str::to_string) else {
        return Ok(args);
    };
    let root = Cli::command();
    let sub = root
        .find_subcommand(&sub_name)
        .ok_or_else(|| CliError::Usage(format!("unknown command `{sub_name}`")))?;
    let mut injected = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}` for `{sub_name}`")))?;
        if key == "config" {
            continue;
        }
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                other => {
                    return Err(CliError::Usage(format!("`{key}` expects true or false, got `{other}`")));
                }
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}
