use std::fs;
use std::path::{Path, PathBuf};

use fpo_core::pipeline::ExperimentConfig;
use fpo_core::Error;

use crate::CliError;

/// Reads the TOML config (or the built-in defaults), applies overrides and
/// validates the result.
pub fn load(path: Option<&Path>, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            parse(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                other => other,
            })?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    // check the version before the schema so old files get the clearer error
    let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(v) = raw.get("version") {
        let found = v
            .as_integer()
            .ok_or_else(|| CliError::Config("version must be an integer".into()))?;
        let expected = fpo_core::pipeline::CONFIG_VERSION;
        if found != i64::from(expected) {
            let e = Error::SchemaVersion {
                what: "experiment config".into(),
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected,
            };
            return Err(CliError::Config(e.to_string()));
        }
    }
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string_pretty(cfg).map_err(|e| CliError::Config(format!("config does not serialize: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = parse(&to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = parse("version = 1\nseed = 5\n[sampling]\nk = 6\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.sampling.k, 6);
        assert_eq!(cfg.train, ExperimentConfig::default().train);
    }

    #[test]
    fn wrong_version_names_both() {
        let e = parse("version = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let msg = e.to_string();
        assert!(msg.contains('3') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn unknown_field_is_config_error() {
        assert!(matches!(parse("version = 1\n[sampling]\nkk = 2\n"), Err(CliError::Config(_))));
    }
}
