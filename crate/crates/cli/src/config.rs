//! `key = value` config files for `run`. Each line becomes the matching
//! long flag, inserted ahead of the command-line flags so that explicit
//! flags win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use crate::CliError;

/// Boolean switches: `true` adds the flag, `false` leaves it out.
const SWITCHES: [&str; 3] = ["strict", "no-verify", "payload-only-signatures"];

pub fn parse(text: &str, origin: &Path) -> Result<Vec<OsString>, CliError> {
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected `key = value`", origin.display(), n + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key == "config" {
            return Err(CliError::Usage(format!("{}:{}: config files cannot nest", origin.display(), n + 1)));
        }
        if SWITCHES.contains(&key.as_str()) {
            match value {
                "true" | "yes" | "1" => args.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                _ => {
                    return Err(CliError::Usage(format!(
                        "{}:{}: {key} must be true or false",
                        origin.display(),
                        n + 1
                    )))
                }
            }
        } else {
            args.push(format!("--{key}").into());
            args.push(value.into());
        }
    }
    Ok(args)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
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

/// Splices the config file named by `--config` into a `run` invocation.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    if args.get(1).map(|a| a != "run").unwrap_or(true) {
        return Ok(args);
    }
    let Some(path) = config_path(&args[2..]) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let from_file = parse(&text, path)?;
    let mut out = args[..2].to_vec();
    out.extend(from_file);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}
