//! Run configuration: one TOML file with `[model]`, `[train]`, `[loss]`,
//! `[data]` and `[paths]` sections, plus dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stpl::data::MovingSpec;
use stpl::loss::LossConfig;
use stpl::model::ModelConfig;
use stpl::train::TrainConfig;
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_digits: usize,
    pub canvas: usize,
    pub digit_size: usize,
    pub seq_len: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub seed: u64,
    pub train_sequences: usize,
    pub test_sequences: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let m = MovingSpec::default();
        Self {
            num_digits: m.num_digits,
            canvas: m.canvas,
            digit_size: m.digit_size,
            seq_len: m.seq_len,
            speed_min: m.speed_min,
            speed_max: m.speed_max,
            seed: m.seed,
            train_sequences: 10_000,
            test_sequences: 10_000,
        }
    }
}

impl DataSection {
    pub fn moving_spec(&self) -> MovingSpec {
        MovingSpec {
            num_digits: self.num_digits,
            canvas: self.canvas,
            digit_size: self.digit_size,
            seq_len: self.seq_len,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Holds `train-images-idx3-ubyte` and `t10k-images-idx3-ubyte`.
    pub mnist_dir: PathBuf,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            mnist_dir: "data/mnist".into(),
            train_data: "data/train.stpl".into(),
            test_data: "data/test.stpl".into(),
            run_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataSection,
    pub paths: PathsSection,
}

/// Everything that shapes results; paths excluded.
#[derive(Serialize)]
struct Experiment<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    loss: &'a LossConfig,
    data: &'a DataSection,
}

impl RunConfig {
    /// Parse `file` (if any), apply `key=value` overrides in order, then
    /// `seed` and `out`.
    pub fn load(file: Option<&Path>, sets: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for s in sets {
            apply_override(&mut table, s)?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.data.seed = s;
        }
        if let Some(o) = out {
            cfg.paths.run_dir = o.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.data.moving_spec().validate()?;
        let need = self.model.frames_in + self.model.frames_out;
        if self.data.seq_len < need {
            return Err(CliError::Config(format!(
                "data.seq_len = {} is shorter than model.frames_in + model.frames_out = {need}",
                self.data.seq_len
            )));
        }
        if self.data.canvas % self.model.downsample_factor != 0 {
            return Err(CliError::Config(format!(
                "data.canvas = {} is not divisible by model.downsample_factor = {}",
                self.data.canvas, self.model.downsample_factor
            )));
        }
        if self.data.train_sequences < 2 || self.data.test_sequences == 0 {
            return Err(CliError::Config(
                "data.train_sequences must be at least 2 and data.test_sequences at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 over the result-shaping sections, hex encoded.
    pub fn experiment_hash(&self) -> String {
        let text = toml::to_string(&Experiment {
            model: &self.model,
            train: &self.train,
            loss: &self.loss,
            data: &self.data,
        })
        .expect("experiment serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Apply `section.key=value`. The value is read as a TOML literal, falling
/// back to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) || parts.len() < 2 {
        return Err(CliError::Config(format!("override key `{key}` must look like section.key")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_are_typed() {
        let sets = [
            "model.hidden_spatial=16".to_string(),
            "train.lr = 0.002".to_string(),
            "loss.ddr_enabled=false".to_string(),
            "model.ablation=no_sa".to_string(),
            "paths.run_dir=/tmp/x".to_string(),
        ];
        let c = RunConfig::load(None, &sets, Some(9), None).unwrap();
        assert_eq!(c.model.hidden_spatial, 16);
        assert_eq!(c.train.lr, 0.002);
        assert!(!c.loss.ddr_enabled);
        assert_eq!(c.model.ablation, stpl::model::Ablation::NoSa);
        assert_eq!(c.paths.run_dir, PathBuf::from("/tmp/x"));
        assert_eq!((c.train.seed, c.data.seed), (9, 9));
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        for bad in ["model.hiden_spatial=3", "nosection=1", "extra.key=1", "train.lr", "model.=3"] {
            let r = RunConfig::load(None, &[bad.to_string()], None, None);
            assert!(matches!(r, Err(CliError::Config(_))), "{bad}");
        }
        let r = RunConfig::load(None, &["train.epochs=0".to_string()], None, None);
        assert!(matches!(r, Err(CliError::Config(_))));
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.run_dir = "elsewhere".into();
        assert_eq!(a.experiment_hash(), b.experiment_hash());
        b.loss.ddr_enabled = false;
        assert_ne!(a.experiment_hash(), b.experiment_hash());
        assert_eq!(a.experiment_hash().len(), 64);
    }
}
