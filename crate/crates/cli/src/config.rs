//! Run configuration files.
//!
//! A config is TOML: training fields at the top level, an optional
//! `out` directory and an optional `[sample]` table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tps_core::eval::EtsScan;
use tps_core::training::TrainConfig;
use tps_core::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub paths: usize,
    pub seed: u64,
    pub ets_scan: EtsScan,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            paths: 1024,
            seed: 0,
            ets_scan: EtsScan::FirstHit,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sample: SampleOptions,
    pub out: Option<PathBuf>,
}

fn bad(e: impl std::fmt::Display) -> CoreError {
    CoreError::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(bad)?;
        if !table.contains_key("system") {
            return Err(bad("missing required field `system`"));
        }
        let out = table
            .remove("out")
            .map(|v| v.try_into::<PathBuf>().map_err(|e| bad(format!("field `out`: {e}"))))
            .transpose()?;
        let sample = table
            .remove("sample")
            .map(|v| v.try_into::<SampleOptions>().map_err(|e| bad(format!("[sample]: {e}"))))
            .transpose()?
            .unwrap_or_default();
        let train: TrainConfig = toml::Value::Table(table).try_into().map_err(bad)?;
        train.validate()?;
        Ok(Self { train, sample, out })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML form; parsing it gives back the same config (minus `out`).
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.train).expect("config serializes");
        table.insert(
            "sample".into(),
            toml::Value::Table(toml::Table::try_from(&self.sample).expect("config serializes")),
        );
        toml::to_string(&table).expect("config serializes")
    }
}
