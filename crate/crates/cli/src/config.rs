//! Flat `key = value` config files, merged into the argument list so flags given on
//! the command line take precedence.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};

use crate::Failure;

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// Parses the file into ordered `(key, value)` pairs; keys use dashes.
pub fn read_config(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::runtime("io", format!("cannot read config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Failure::usage(format!("{}:{}: expected `key = value`", path.display(), n + 1))
        })?;
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(Failure::usage(format!("{}:{}: empty key", path.display(), n + 1)));
        }
        out.push((key, value));
    }
    Ok(out)
}

fn find_config(rest: &[OsString]) -> Option<OsString> {
    let mut it = rest.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn given(rest: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    let with_value = format!("--{key}=");
    rest.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&with_value)
    })
}

/// Inserts config-file settings right after the subcommand name, skipping keys also
/// given as flags. Unknown keys are usage errors.
pub fn expand(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let Some(pos) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let name = args[pos].to_string_lossy().to_string();
    let Some(sub) = cmd.find_subcommand(&name) else {
        return Ok(args);
    };
    let rest = &args[pos + 1..];
    let Some(path) = find_config(rest) else {
        return Ok(args);
    };
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in read_config(Path::new(&path))? {
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| Failure::usage(format!("unknown config key `{key}` for `{name}`")))?;
        if given(rest, &key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => {
                let on = parse_bool(&value)
                    .ok_or_else(|| Failure::usage(format!("config key `{key}` expects true/false, got `{value}`")))?;
                if on {
                    injected.push(format!("--{key}").into());
                }
            }
            _ => {
                injected.push(format!("--{key}").into());
                injected.push(value.into());
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(rest);
    Ok(out)
}
