//! Run configuration: a JSON file merged with command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smae_core::exec::Exec;
use smae_core::sit::SitConfig;
use smae_core::ssl::PretrainConfig;
use smae_core::tasks::TrainRun;

pub const SEED_ENV: &str = "SMAE_SEED";

/// Every section is optional in the file; missing sections take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: SitConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainRun,
    /// Global seed; overrides the per-section seeds when set.
    pub seed: Option<u64>,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: SitConfig::desk(),
            pretrain: PretrainConfig::default(),
            train: TrainRun::default(),
            seed: None,
            exec: Exec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// Resolves the seed (flag, then file, then `SMAE_SEED`) and copies it
    /// into every section.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> anyhow::Result<()> {
        let seed = match flag.or(self.seed) {
            Some(s) => Some(s),
            None => env_seed()?,
        };
        if let Some(s) = seed {
            self.seed = Some(s);
            self.pretrain.seed = s;
            self.train.seed = s;
        }
        Ok(())
    }

    /// All validation problems at once.
    pub fn validate(&self) -> anyhow::Result<()> {
        let problems: Vec<String> = [
            self.model.validate().err(),
            self.pretrain.validate().err(),
            self.train.validate().err(),
        ]
        .into_iter()
        .flatten()
        .map(|e| e.to_string())
        .collect();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("\n")))
        }
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// User-facing validation failure (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}
