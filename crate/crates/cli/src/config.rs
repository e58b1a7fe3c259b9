//! `--config` files: flat `key = value` lines whose keys mirror flag names.
//!
//! File entries are turned into extra arguments placed right after the
//! subcommand. An entry is dropped when the command line already sets the same
//! flag (or its `--no-` form, or another member of its exclusive group), so
//! explicit flags always win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const SUBCOMMANDS: [&str; 5] = ["embed", "audit", "run", "eval", "ablation"];

const EXCLUSIVE: &[&[&str]] = &[&["threshold", "target-skip"]];

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key = value", no + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key.starts_with('-') {
            bail!("config line {}: bad key {:?}", no + 1, k.trim());
        }
        if key == "config" {
            bail!("config line {}: nested config files are not supported", no + 1);
        }
        let mut value = v.trim();
        if let Some(hash) = value.find(" #") {
            value = value[..hash].trim_end();
        }
        if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
            value = &value[1..value.len() - 1];
        }
        out.push(Entry {
            key,
            value: value.to_string(),
        });
    }
    Ok(out)
}

fn sets(args: &[OsString], key: &str) -> bool {
    let long = format!("--{key}");
    let neg = format!("--no-{key}");
    let eq = format!("--{key}=");
    args.iter().any(|a| {
        let a = a.to_string_lossy();
        a == long || a == neg || a.starts_with(&eq)
    })
}

fn overridden(args: &[OsString], key: &str) -> bool {
    let base = key.strip_prefix("no-").unwrap_or(key);
    if sets(args, base) {
        return true;
    }
    EXCLUSIVE
        .iter()
        .filter(|g| g.contains(&base))
        .any(|g| g.iter().any(|k| sets(args, k)))
}

fn to_args(e: &Entry) -> Vec<OsString> {
    match e.value.as_str() {
        "true" => vec![format!("--{}", e.key).into()],
        "false" => vec![format!("--no-{}", e.key).into()],
        v => vec![format!("--{}", e.key).into(), v.into()],
    }
}

/// Returns the value of `--config` on the raw command line, if any.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
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

/// Splices file entries into `args` (which includes the program name).
pub fn merge(args: Vec<OsString>, entries: &[Entry]) -> Vec<OsString> {
    let Some(pos) = args
        .iter()
        .skip(1)
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return args;
    };
    let sub = pos + 1;
    let mut extra = Vec::new();
    for e in entries {
        if !overridden(&args, &e.key) {
            extra.extend(to_args(e));
        }
    }
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    out
}

pub fn load_and_merge(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(merge(args, &entries))
}
