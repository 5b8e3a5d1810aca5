//! Injects `--config` file keys as flags the command line did not set.

use std::path::Path;

use anyhow::{bail, Context, Result};

fn has_flag(args: &[String], flag: &str) -> bool {
    args.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn subcommand(args: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if a == "--config" || a == "--threads" {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn render(key: &str, value: &toml::Value) -> Result<Vec<String>> {
    let flag = format!("--{}", key.replace('_', "-"));
    Ok(match value {
        toml::Value::Boolean(true) => vec![flag],
        toml::Value::Boolean(false) => vec![],
        toml::Value::String(s) => vec![flag, s.clone()],
        toml::Value::Integer(i) => vec![flag, i.to_string()],
        toml::Value::Float(f) => vec![flag, f.to_string()],
        toml::Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(i) => Ok(i.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    other => bail!("config key {key:?}: unsupported array element {other}"),
                })
                .collect::<Result<_>>()?;
            vec![flag, parts.join(",")]
        }
        other => bail!("config key {key:?}: unsupported value {other}"),
    })
}

/// Returns `args` with config-file flags appended after the subcommand's own.
///
/// Keys in a `[<subcommand>]` table are always injected (unknown ones then fail
/// flag parsing); top-level keys only where `accepts(subcommand, flag)` holds.
pub fn apply(args: Vec<String>, accepts: impl Fn(&str, &str) -> bool) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {path}"))?;
    let Some(sub_at) = subcommand(&args) else {
        return Ok(args);
    };
    let sub = args[sub_at].clone();

    let mut entries: Vec<(String, toml::Value)> = Vec::new();
    for (k, v) in &table {
        match v {
            toml::Value::Table(section) if *k == sub => {
                entries.extend(section.iter().map(|(k, v)| (k.clone(), v.clone())));
            }
            toml::Value::Table(_) => {}
            _ if accepts(&sub, &k.replace('_', "-")) => entries.push((k.clone(), v.clone())),
            _ => {}
        }
    }
    let mut out = args;
    for (k, v) in entries {
        let flag = format!("--{}", k.replace('_', "-"));
        if has_flag(&out, &flag) {
            continue;
        }
        out.extend(render(&k, &v)?);
    }
    Ok(out)
}
