//! Run configuration: a sectioned TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use emotag_core::augment::BalanceConfig;
use emotag_core::netcore::{ModelConfig, Precision};
use emotag_core::trainer::TrainingConfig;
use emotag_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub weak: Option<PathBuf>,
    pub votes: Option<PathBuf>,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub balance: BalanceConfig,
    pub weak_cutoff: f32,
    pub alignment_threshold: f32,
    pub grid: Vec<f64>,
    pub ranked_labels: usize,
    /// Hex SHA-256 of the effective configuration.
    pub hash: String,
}

fn key_err(key: &str, what: &str) -> Error {
    Error::Config(format!("`{key}` {what}"))
}

struct Doc<'a> {
    root: &'a Table,
}

impl<'a> Doc<'a> {
    fn get(&self, key: &str) -> Option<&'a Value> {
        let (section, name) = key.split_once('.').expect("dotted key");
        self.root.get(section)?.as_table()?.get(name)
    }

    fn require(&self, key: &str) -> Result<&'a Value> {
        self.get(key).ok_or_else(|| key_err(key, "is missing"))
    }

    fn uint(&self, key: &str, default: Option<u64>) -> Result<u64> {
        match self.get(key) {
            None => default.ok_or_else(|| key_err(key, "is missing")),
            Some(v) => v
                .as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| key_err(key, "must be a non-negative integer")),
        }
    }

    fn float(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Float(f)) => Ok(*f),
            Some(Value::Integer(i)) => Ok(*i as f64),
            Some(_) => Err(key_err(key, "must be a number")),
        }
    }

    fn boolean(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.as_bool().ok_or_else(|| key_err(key, "must be true or false")),
        }
    }

    fn path(&self, key: &str, base: &Path) -> Result<Option<PathBuf>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => {
                let s = v.as_str().ok_or_else(|| key_err(key, "must be a string"))?;
                Ok(Some(base.join(s)))
            }
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub no_attention: bool,
    pub mixed_precision: bool,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub target: Option<usize>,
}

impl Overrides {
    fn apply(&self, root: &mut Table) {
        let mut set = |section: &str, key: &str, v: Value| {
            let t = root
                .entry(section.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            if let Some(t) = t.as_table_mut() {
                t.insert(key.to_string(), v);
            }
        };
        if let Some(s) = self.seed {
            set("run", "seed", Value::Integer(s as i64));
        }
        if let Some(d) = &self.output_dir {
            set("paths", "output_dir", Value::String(d.display().to_string()));
        }
        if self.no_attention {
            set("model", "use_attention", Value::Boolean(false));
        }
        if self.mixed_precision {
            set("training", "mixed_precision", Value::Boolean(true));
        }
        if let Some(e) = self.epochs {
            set("training", "max_epochs", Value::Integer(e as i64));
        }
        if let Some(b) = self.batch_size {
            set("training", "batch_size", Value::Integer(b as i64));
        }
        if let Some(t) = self.target {
            set("balance", "target", Value::Integer(t as i64));
        }
    }
}

const SECTIONS: [(&str, &[&str]); 6] = [
    ("run", &["seed"]),
    ("paths", &["output_dir", "train", "val", "test", "labels", "embeddings", "weak", "votes"]),
    (
        "model",
        &[
            "use_attention",
            "embed_dim",
            "conv_filters",
            "conv_kernel",
            "pool_size",
            "lstm_units",
            "dense_units",
            "dropout_rate",
        ],
    ),
    (
        "training",
        &[
            "learning_rate",
            "beta1",
            "beta2",
            "epsilon",
            "batch_size",
            "max_epochs",
            "patience",
            "mixed_precision",
            "loss_scale",
        ],
    ),
    (
        "balance",
        &["target", "max_duplication_factor", "weak_cutoff", "alignment_threshold"],
    ),
    ("thresholds", &["grid_step", "ranked_labels"]),
];

fn check_known_keys(root: &Table) -> Result<()> {
    for (section, value) in root {
        let Some((_, keys)) = SECTIONS.iter().find(|(s, _)| s == section) else {
            return Err(Error::Config(format!("unknown section `[{section}]`")));
        };
        let table = value
            .as_table()
            .ok_or_else(|| Error::Config(format!("`{section}` must be a section")))?;
        if let Some(k) = table.keys().find(|k| !keys.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{section}.{k}`")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides)
    }

    /// Relative paths in the file resolve against `base`.
    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let mut root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        overrides.apply(&mut root);
        check_known_keys(&root)?;
        let doc = Doc { root: &root };
        let seed = doc.uint("run.seed", None)?;
        let output_dir = doc
            .path("paths.output_dir", base)?
            .ok_or_else(|| key_err("paths.output_dir", "is missing"))?;
        doc.require("run.seed")?;

        let d = ModelConfig::default();
        let usize_or = |key: &str, default: usize| doc.uint(key, Some(default as u64)).map(|v| v as usize);
        let model = ModelConfig {
            use_attention: doc.boolean("model.use_attention", d.use_attention)?,
            embed_dim: usize_or("model.embed_dim", d.embed_dim)?,
            conv_filters: usize_or("model.conv_filters", d.conv_filters)?,
            conv_kernel: usize_or("model.conv_kernel", d.conv_kernel)?,
            pool_size: usize_or("model.pool_size", d.pool_size)?,
            lstm_units: usize_or("model.lstm_units", d.lstm_units)?,
            dense_units: usize_or("model.dense_units", d.dense_units)?,
            dropout_rate: doc.float("model.dropout_rate", d.dropout_rate)?,
            ..d
        };
        model.validate()?;

        let t = TrainingConfig::default();
        let training = TrainingConfig {
            lr: doc.float("training.learning_rate", t.lr)?,
            beta1: doc.float("training.beta1", t.beta1)?,
            beta2: doc.float("training.beta2", t.beta2)?,
            epsilon: doc.float("training.epsilon", t.epsilon)?,
            batch_size: usize_or("training.batch_size", t.batch_size)?,
            max_epochs: usize_or("training.max_epochs", t.max_epochs)?,
            patience: usize_or("training.patience", t.patience)?,
            precision: if doc.boolean("training.mixed_precision", false)? {
                Precision::Mixed
            } else {
                Precision::Full
            },
            loss_scale: doc.float("training.loss_scale", t.loss_scale)?,
            seed,
            checkpoint: None,
        };
        training.validate()?;

        let b = BalanceConfig::default();
        let balance = BalanceConfig {
            target: match doc.get("balance.target") {
                None => None,
                Some(_) => Some(doc.uint("balance.target", None)? as usize),
            },
            seed,
            max_duplication_factor: usize_or("balance.max_duplication_factor", b.max_duplication_factor)?,
        };

        let step = doc.float("thresholds.grid_step", 0.05)?;
        if !(step > 0.0 && step < 0.5) {
            return Err(key_err("thresholds.grid_step", "must be in (0, 0.5)"));
        }
        let steps = (1.0 / step).round() as usize;
        let grid: Vec<f64> = (1..steps).map(|k| k as f64 / steps as f64).collect();

        let canonical = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
        let hash = Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();

        Ok(RunConfig {
            seed,
            output_dir,
            train: doc.path("paths.train", base)?,
            val: doc.path("paths.val", base)?,
            test: doc.path("paths.test", base)?,
            labels: doc.path("paths.labels", base)?,
            embeddings: doc.path("paths.embeddings", base)?,
            weak: doc.path("paths.weak", base)?,
            votes: doc.path("paths.votes", base)?,
            model,
            training,
            balance,
            weak_cutoff: doc.float("balance.weak_cutoff", 0.5)? as f32,
            alignment_threshold: doc.float("balance.alignment_threshold", 0.7)? as f32,
            grid,
            ranked_labels: usize_or("thresholds.ranked_labels", 4)?,
            hash,
        })
    }

    /// The path configured under `key`, which must exist.
    pub fn input(&self, key: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        let p = value.clone().ok_or_else(|| key_err(key, "is missing"))?;
        if !p.exists() {
            return Err(Error::Data(format!("`{key}` points to missing file {}", p.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[run]\nseed = 7\n[paths]\noutput_dir = \"out\"\n";

    #[test]
    fn defaults_fill_optional_keys() {
        let c = RunConfig::parse(MINIMAL, Path::new("/base"), &Overrides::default()).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.output_dir, Path::new("/base/out"));
        assert!(c.model.use_attention);
        assert_eq!(c.training.batch_size, 256);
        assert_eq!(c.grid.len(), 19);
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn missing_key_is_named() {
        let err = RunConfig::parse("[paths]\noutput_dir = \"o\"\n", Path::new("."), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("run.seed"), "{err}");
        let err = RunConfig::parse("[run]\nseed = 1\n", Path::new("."), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("paths.output_dir"), "{err}");
    }

    #[test]
    fn flags_beat_file_and_change_hash() {
        let text = format!("{MINIMAL}[model]\nuse_attention = true\n");
        let plain = RunConfig::parse(&text, Path::new("."), &Overrides::default()).unwrap();
        let o = Overrides {
            no_attention: true,
            seed: Some(9),
            ..Default::default()
        };
        let c = RunConfig::parse(&text, Path::new("."), &o).unwrap();
        assert!(!c.model.use_attention);
        assert_eq!(c.seed, 9);
        assert_ne!(c.hash, plain.hash);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}[model]\nlstm = 3\n");
        let err = RunConfig::parse(&text, Path::new("."), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("model.lstm"));
    }
}
