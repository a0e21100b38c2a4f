//! Run configuration loading: a TOML file, then `key.path=value` overrides,
//! then validation. Unknown keys anywhere are rejected.

use std::path::Path;

use anyhow::{Context, Result};
use ppd_core::config::RunConfig;
use serde::Deserialize;
use toml::{Table, Value};

use crate::UsageError;

/// Parses `raw` as a TOML value, falling back to a bare string so that
/// `--set train.out_dir=runs/a` works without quoting.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn apply_override(root: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("override key `{key}` has an empty segment")).into());
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(UsageError(format!("override `{key}`: `{part}` is not a section")).into()),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>().map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg = RunConfig::deserialize(Value::Table(root)).map_err(|e| UsageError(format!("invalid config: {e}")))?;
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to TOML")
}

/// Writes the fully resolved config next to a command's outputs.
pub fn archive(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("resolved_config.toml");
    std::fs::write(&path, to_toml(cfg)).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_type() {
        let cfg = load(None, &["train.steps=7".into(), "train.out_dir=runs/x".into(), "model.cascade=false".into()]).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.out_dir, Path::new("runs/x"));
        assert!(!cfg.model.cascade);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = load(None, &["model.depth=3".into()]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some(), "{err:#}");
        assert!(load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn resolved_config_reloads_identically() {
        let cfg = load(None, &["seed=5".into(), "model.fusion_block_index=8".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        archive(&cfg, dir.path()).unwrap();
        let back = load(Some(&dir.path().join("resolved_config.toml")), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
