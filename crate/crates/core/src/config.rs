//! Run configuration: TOML schema, validation, profiles and hashing.
//!
//! Every block uses `deny_unknown_fields` and per-field defaults, so an empty
//! document is the full default configuration and a misspelt key is an error
//! naming its dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::market::{MarketModel, MarketParams};
use crate::neural::{PpaSpec, TrainConfig};

/// Overrides `output.directory` when set.
pub const ENV_OUTPUT_DIR: &str = "PPA_HEDGE_OUTPUT_DIR";
/// Worker-thread count for the parallel pool.
pub const ENV_THREADS: &str = "PPA_HEDGE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_eval_paths: usize,
    pub eval_seed: u64,
    pub es_levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_eval_paths: 100_000,
            eval_seed: 20_240_501,
            es_levels: vec![0.01, 0.05, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("out"),
            formats: vec!["csv".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub market: MarketParams,
    pub ppa: PpaSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

/// Named overrides applied on top of a parsed configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// The configuration as written.
    Full,
    /// Reduced training budget for CI and desk machines.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config {
                path: "profile".into(),
                reason: format!("unknown profile `{other}` (expected `full` or `desk`)"),
            }),
        }
    }
}

fn config_err(path: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config {
        path: path.into(),
        reason: reason.to_string(),
    }
}

fn prefixed(block: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument { name, reason } => config_err(&format!("{block}.{name}"), reason),
        other => other,
    }
}

impl RunConfig {
    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { String::from("<root>") } else { path };
            config_err(&path, e.into_inner().message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical TOML rendering; `parse(to_toml())` is the identity.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// First 16 hex digits of the SHA-256 of the canonical rendering, with
    /// the output block reset: where results are written does not change them.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output: OutputConfig::default(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_profile(mut self, profile: Profile) -> Self {
        if profile == Profile::Desk {
            self.train.epochs = 200;
            self.train.n_train_paths = 20_000;
            self.eval.n_eval_paths = 100_000;
        }
        self
    }

    /// Applies [`ENV_OUTPUT_DIR`] if present.
    pub fn with_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(ENV_OUTPUT_DIR) {
            self.output.directory = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        MarketModel::new(&self.market).map_err(|e| prefixed("market", e))?;
        let ppa = &self.ppa;
        if !(ppa.capacity.is_finite() && ppa.capacity >= 0.0) {
            return Err(config_err("ppa.capacity", format!("must be finite and >= 0, got {}", ppa.capacity)));
        }
        if !ppa.strike.is_finite() {
            return Err(config_err("ppa.strike", "must be finite"));
        }
        self.train.validate().map_err(|e| prefixed("train", e))?;
        // TOML integers are signed 64-bit
        for (path, seed) in [("train.seed", self.train.seed), ("eval.eval_seed", self.eval.eval_seed)] {
            if seed > i64::MAX as u64 {
                return Err(config_err(path, format!("must be below 2^63, got {seed}")));
            }
        }
        let ev = &self.eval;
        if ev.n_eval_paths == 0 {
            return Err(config_err("eval.n_eval_paths", "must be >= 1"));
        }
        if ev.es_levels.is_empty() {
            return Err(config_err("eval.es_levels", "must list at least one level"));
        }
        for &a in &ev.es_levels {
            if !(a > 0.0 && a < 1.0) || a * (ev.n_eval_paths as f64) < 1.0 - 1e-9 {
                return Err(config_err(
                    "eval.es_levels",
                    format!("level {a} must lie in (0, 1) with at least one tail path"),
                ));
            }
        }
        if let Some(f) = self.output.formats.iter().find(|f| f.as_str() != "csv") {
            return Err(config_err("output.formats", format!("unsupported format `{f}` (only `csv`)")));
        }
        Ok(())
    }

    /// True when training and evaluation draw from the same master seed.
    pub fn seeds_collide(&self) -> bool {
        self.train.seed == self.eval.eval_seed
    }

    /// `# key=value …` line stamped at the top of every output file.
    pub fn metadata_line(&self, extra: &[(&str, String)]) -> String {
        let mut line = format!(
            "# config_hash={} train_seed={} eval_seed={}",
            self.hash(),
            self.train.seed,
            self.eval.eval_seed
        );
        for (k, v) in extra {
            line.push_str(&format!(" {k}={v}"));
        }
        line
    }
}
