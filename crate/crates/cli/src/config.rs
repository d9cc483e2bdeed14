//! TOML run configuration.
//!
//! Top-level keys: `dataset`, `kinds`, `seed`, `out`, `fractions`, `seeds`
//! and a `[synthetic]` table. Every other table is a pipeline section
//! (`[split]`, `[preprocess]`, `[augmentation]`, `[roi]`, `[unet]`,
//! `[deepsegnet]`, `[resnet]`, `[recurrent]`, `[segmenter_training]`,
//! `[classifier_training]`, `[segmenter_optimizer]`, `[classifier_optimizer]`)
//! plus the `oracle_segmenter` and `retrain_segmenter` switches. Relative
//! paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use mricascade::dataio::SyntheticConfig;
use mricascade::pipeline::{PipelineConfig, PipelineKind};
use mricascade::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

pub const SEED_ENV: &str = "MRICASCADE_SEED";

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub kinds: Vec<PipelineKind>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub synthetic: SyntheticConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            kinds: PipelineKind::ALL.to_vec(),
            seed: 0,
            out: None,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            seeds: vec![0],
            synthetic: SyntheticConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn take<T: DeserializeOwned>(table: &mut Table, key: &str) -> Result<Option<T>> {
    match table.remove(key) {
        None => Ok(None),
        Some(v) => v.try_into().map(Some).map_err(|e: toml::de::Error| Error::config(key, e.message().to_string())),
    }
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses TOML text; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let d = RunConfig::default();
        let dataset = take::<PathBuf>(&mut table, "dataset")?.map(|p| resolve(base, p));
        let out = take::<PathBuf>(&mut table, "out")?.map(|p| resolve(base, p));
        let kinds = match take::<Vec<String>>(&mut table, "kinds")? {
            Some(list) => list.iter().map(|k| k.parse()).collect::<Result<Vec<_>>>()?,
            None => d.kinds,
        };
        let seed = take(&mut table, "seed")?.unwrap_or(d.seed);
        let fractions = take(&mut table, "fractions")?.unwrap_or(d.fractions);
        let seeds = take(&mut table, "seeds")?.unwrap_or(d.seeds);
        let synthetic = take(&mut table, "synthetic")?.unwrap_or_default();
        let pipeline: PipelineConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let field = msg.split('`').nth(1).unwrap_or("pipeline").to_string();
            Error::config(field, msg)
        })?;
        let cfg = RunConfig { dataset, kinds, seed, out, fractions, seeds, synthetic, pipeline };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::config("kinds", "at least one pipeline kind is required"));
        }
        self.synthetic.validate()?;
        self.pipeline.validate()
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| Error::config("dataset", "a dataset path is required"))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::config("out", "an output directory is required"))
    }
}

/// Command-line flag, then `MRICASCADE_SEED`, then the configured value.
pub fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}
