//! `--config FILE` support. The file is TOML; the table named after the
//! subcommand (plus an optional `[common]` table) is turned into long flags
//! inserted right after the subcommand, so flags typed on the command line
//! come later and win.
//!
//! ```toml
//! [common]
//! seed = 7
//!
//! [train]
//! base = "base.bin"
//! lr = 3e-4
//! target = ["q_proj", "v_proj"]
//! allow-mixed-templates = true
//! ```

use std::ffi::OsString;
use std::path::Path;

use toml::Value;

use crate::error::{CliError, CliResult};

fn scalar(key: &str, v: &Value) -> CliResult<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        other => {
            return Err(CliError::Usage(format!(
                "config key {key}: unsupported value {other}"
            )))
        }
    })
}

/// Flags for one table: `k = v` → `--k v`, `k = true` → `--k`,
/// `k = false` → nothing, arrays repeat the flag.
pub fn table_flags(table: &toml::Table) -> CliResult<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Boolean(true) => out.push(flag.into()),
            Value::Boolean(false) => {}
            Value::Array(items) => {
                for item in items {
                    out.push(flag.clone().into());
                    out.push(scalar(key, item)?.into());
                }
            }
            Value::Table(_) => {
                return Err(CliError::Usage(format!("config key {key}: nested tables are not allowed")))
            }
            v => {
                out.push(flag.into());
                out.push(scalar(key, v)?.into());
            }
        }
    }
    Ok(out)
}

pub fn flags_for(path: &Path, subcommand: &str) -> CliResult<Vec<OsString>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let doc: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for section in ["common", subcommand] {
        match doc.get(section) {
            Some(Value::Table(t)) => out.extend(table_flags(t)?),
            Some(_) => return Err(CliError::Usage(format!("config: [{section}] must be a table"))),
            None => {}
        }
    }
    Ok(out)
}

/// Rewrites `argv` by splicing config-derived flags after the subcommand.
/// Without `--config` the arguments come back unchanged.
pub fn expand_args(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut config = None;
    let mut sub_pos = None;
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" {
            config = argv.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.into());
        } else if sub_pos.is_none() && !a.starts_with('-') {
            sub_pos = Some(i);
        }
        i += 1;
    }
    let (Some(config), Some(pos)) = (config, sub_pos) else {
        return Ok(argv);
    };
    let sub = argv[pos].to_string_lossy().into_owned();
    let extra = flags_for(Path::new(&config), &sub)?;
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
