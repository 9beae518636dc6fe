//! `flag = value` config files and the effective-config echo.
//!
//! A config line `lhz-radius = 5` becomes `--lhz-radius 5` right after the subcommand,
//! unless the same flag is also given on the command line. `true` stands for a bare
//! switch, `false` drops it, and repeating a key repeats the flag.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Command};

pub const EFFECTIVE_CONFIG: &str = "config.txt";

fn flag_name(arg: &str) -> Option<&str> {
    let rest = arg.strip_prefix("--")?;
    Some(rest.split_once('=').map_or(rest, |(k, _)| k))
}

/// Path given with `--config` anywhere on the command line.
pub fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(|p| PathBuf::from(p.as_ref()));
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Parses config text into `(flag, value)` pairs with `_` normalized to `-`.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `flag = value`, got {line:?}", i + 1))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty flag name", i + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Inserts the config entries after the subcommand token of `argv`.
pub fn merge(
    argv: Vec<OsString>,
    entries: &[(String, String)],
    subcommands: &[&str],
) -> Vec<OsString> {
    let Some(pos) = argv
        .iter()
        .skip(1)
        .position(|a| subcommands.iter().any(|s| a.to_str() == Some(*s)))
        .map(|p| p + 1)
    else {
        return argv;
    };
    let given: Vec<String> = argv[pos + 1..]
        .iter()
        .filter_map(|a| flag_name(&a.to_string_lossy()).map(str::to_string))
        .collect();
    let mut injected = Vec::new();
    for (k, v) in entries {
        if k == "config" || given.contains(k) {
            continue;
        }
        match v.as_str() {
            "true" => injected.push(OsString::from(format!("--{k}"))),
            "false" => {}
            _ => {
                injected.push(OsString::from(format!("--{k}")));
                injected.push(OsString::from(v));
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    out
}

/// Every flag of `cmd` with its effective value, in config-file syntax.
pub fn effective_config(cmd: &Command, matches: &ArgMatches) -> String {
    let mut text = format!(
        "# hotspot {} {}\n",
        cmd.get_name(),
        env!("CARGO_PKG_VERSION")
    );
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if matches!(id, "help" | "version" | "config" | "verbose" | "quiet") {
            continue;
        }
        let Ok(Some(raw)) = matches.try_get_raw(id) else {
            continue;
        };
        for v in raw {
            text.push_str(&format!("{long} = {}\n", v.to_string_lossy()));
        }
    }
    text
}

pub fn write_effective_config(dir: &Path, text: &str) -> std::io::Result<()> {
    fs::write(dir.join(EFFECTIVE_CONFIG), text)
}
