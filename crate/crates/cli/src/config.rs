//! Config file loading, `--set` overrides and seed lists.

use std::path::Path;

use fcil_core::ExperimentConfig;
use toml::{Table, Value};

use crate::CliError;

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` to `table`, creating intermediate tables.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set: malformed key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(CliError::Config(format!(
                    "--set {key}: `{part}` is not a table"
                )))
            }
        };
    }
    cursor.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// `0,1,4` or `0..5` (end exclusive), or a mix of both.
pub fn parse_seeds(list: &str) -> Result<Vec<u64>, CliError> {
    let bad = |part: &str| CliError::Config(format!("--seeds: cannot parse `{part}`"));
    let mut seeds = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
            let b: u64 = b.trim().parse().map_err(|_| bad(part))?;
            seeds.extend(a..b);
        } else {
            seeds.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Config("--seeds: empty seed list".into()));
    }
    Ok(seeds)
}

/// Reads the config (defaults when `path` is `None`), applies overrides and
/// the seed list, and validates the result.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seeds: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(Value::Table(data)) = table.get_mut("data") {
        data.entry("source")
            .or_insert_with(|| Value::String("synthetic".into()));
    }
    let origin = path.map_or_else(|| "config".to_string(), |p| p.display().to_string());
    let mut cfg: ExperimentConfig =
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| {
                CliError::Config(format!("{origin}: {}", e.to_string().trim()))
            })?;
    if let Some(list) = seeds {
        cfg.seeds = parse_seeds(list)?;
    }
    cfg.validate()
        .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_tables() {
        let mut t = Table::new();
        apply_override(&mut t, "seed=7").unwrap();
        apply_override(&mut t, "methods.gp=false").unwrap();
        apply_override(&mut t, "hidden=[32, 16]").unwrap();
        assert_eq!(t["seed"].as_integer(), Some(7));
        assert_eq!(t["methods"]["gp"].as_bool(), Some(false));
        assert!(apply_override(&mut t, "seed").is_err());
        assert!(apply_override(&mut t, "seed.x=1").is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3,7").unwrap(), vec![0, 1, 2, 7]);
        assert!(parse_seeds("a").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = load_config(None, &["learning_rte=0.1".into()], None).unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
        let err = load_config(None, &["dirichlet_alpha=0".into()], None).unwrap_err();
        assert!(err.to_string().contains("dirichlet_alpha"), "{err}");
        let cfg = load_config(
            None,
            &["data.cluster_spread=0.5".into(), "methods.kd=false".into()],
            Some("3"),
        )
        .unwrap();
        assert!(!cfg.methods.kd && cfg.methods.gp);
        assert_eq!(cfg.seeds, vec![3]);
    }
}
