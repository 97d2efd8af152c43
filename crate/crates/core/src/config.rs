//! Flat `key = value` run configuration shared by the file loader and the
//! command-line overrides.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{AttachHeadKind, Mode, ModelConfig};
use crate::train::{Schedule, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("missing required key {0}")]
    Missing(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// Bracketed Dyck trees; the vocabulary is fixed by `num_types`.
    Dyck,
    /// Any bracketed treebank; the vocabulary is built from training data.
    Trees,
}

impl FromStr for DataFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dyck" => Ok(DataFormat::Dyck),
            "trees" => Ok(DataFormat::Trees),
            _ => Err(format!("unknown data format {s:?}")),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Dyck => "dyck",
            DataFormat::Trees => "trees",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub data_format: DataFormat,
    pub num_types: usize,
    pub mode: Mode,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_mult: usize,
    /// 0 means longest training sequence.
    pub max_len: usize,
    pub table_depth: usize,
    /// `None` means every layer.
    pub pushdown_layers: Option<Vec<usize>>,
    pub attach_head: AttachHeadKind,
    pub init_std: f64,
    pub train: TrainConfig,
    pub run_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_data: None,
            val_data: None,
            data_format: DataFormat::Trees,
            num_types: 8,
            mode: Mode::Pushdown,
            layers: 6,
            heads: 4,
            d_model: 32,
            ff_mult: 2,
            max_len: 0,
            table_depth: 32,
            pushdown_layers: None,
            attach_head: AttachHeadKind::Mlp,
            init_std: 0.02,
            train: TrainConfig::default(),
            run_root: None,
        }
    }
}

/// Every accepted key, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "train_data",
    "val_data",
    "data_format",
    "num_types",
    "mode",
    "layers",
    "heads",
    "d_model",
    "ff_mult",
    "max_len",
    "table_depth",
    "pushdown_layers",
    "attach_head",
    "init_std",
    "batch_size",
    "steps",
    "warmup",
    "lr",
    "schedule",
    "lambda",
    "dropout",
    "eval_every",
    "patience",
    "clip",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "run_root",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "train_data" => self.train_data = opt_path(v),
            "val_data" => self.val_data = opt_path(v),
            "run_root" => self.run_root = opt_path(v),
            "data_format" => self.data_format = parse(key, v)?,
            "num_types" => self.num_types = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "ff_mult" => self.ff_mult = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "table_depth" => self.table_depth = parse(key, v)?,
            "pushdown_layers" => {
                self.pushdown_layers = if v == "all" {
                    None
                } else if v.is_empty() || v == "none" {
                    Some(Vec::new())
                } else {
                    Some(
                        v.split(',')
                            .map(|x| parse(key, x.trim()))
                            .collect::<Result<_, _>>()?,
                    )
                }
            }
            "attach_head" => self.attach_head = parse(key, v)?,
            "init_std" => self.init_std = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "warmup" => t.warmup = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "schedule" => t.schedule = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "dropout" => t.dropout = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "clip" => {
                t.clip = if v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        Some(match key {
            "train_data" => path(&self.train_data),
            "val_data" => path(&self.val_data),
            "run_root" => path(&self.run_root),
            "data_format" => self.data_format.to_string(),
            "num_types" => self.num_types.to_string(),
            "mode" => match self.mode {
                Mode::Pushdown => "pushdown",
                Mode::BaseMultitask => "base-multitask",
                Mode::BasePlain => "base-plain",
            }
            .into(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "d_model" => self.d_model.to_string(),
            "ff_mult" => self.ff_mult.to_string(),
            "max_len" => self.max_len.to_string(),
            "table_depth" => self.table_depth.to_string(),
            "pushdown_layers" => match &self.pushdown_layers {
                None => "all".into(),
                Some(v) if v.is_empty() => "none".into(),
                Some(v) => v
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            },
            "attach_head" => match self.attach_head {
                AttachHeadKind::Mlp => "mlp",
                AttachHeadKind::Bilinear => "bilinear",
            }
            .into(),
            "init_std" => self.init_std.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "steps" => t.steps.to_string(),
            "warmup" => t.warmup.to_string(),
            "lr" => t.lr.to_string(),
            "schedule" => match t.schedule {
                Schedule::Cosine => "cosine",
                Schedule::Constant => "constant",
            }
            .into(),
            "lambda" => t.lambda.to_string(),
            "dropout" => t.dropout.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "patience" => t.patience.to_string(),
            "clip" => t.clip.map_or("none".into(), |c| c.to_string()),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "seed" => t.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file's lines on top of `self`. Blank lines and
    /// `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `--key value` or `--key=value` pairs; dashes in keys may be
    /// written as underscores or hyphens.
    pub fn apply_flags(&mut self, args: &[String]) -> Result<(), ConfigError> {
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let body = a
                .strip_prefix("--")
                .ok_or_else(|| ConfigError::UnknownKey(a.clone()))?;
            let (k, v) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| ConfigError::BadValue {
                        key: body.into(),
                        value: String::new(),
                        reason: "missing value".into(),
                    })?;
                    (body.to_string(), v.clone())
                }
            };
            self.set(&k.replace('-', "_"), &v)?;
        }
        Ok(())
    }

    /// Canonical text: every key, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// FNV-1a over the canonical text, excluding `run_root`.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for line in self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("run_root"))
        {
            for b in line.bytes().chain(std::iter::once(b'\n')) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn model_config(&self, vocab_size: usize, max_len: usize) -> ModelConfig {
        let mut c = ModelConfig::pushdown(
            self.layers,
            self.heads,
            self.d_model,
            vocab_size,
            max_len,
            self.table_depth,
        );
        c.ff_mult = self.ff_mult;
        c.attach_head = self.attach_head;
        c.init_std = self.init_std;
        if let Some(l) = &self.pushdown_layers {
            c.pushdown_layers = l.clone();
        }
        c.with_mode(self.mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_every_key_is_settable() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\nsteps = 7\nlr=0.5  # trailing\nclip = none\npushdown_layers = 0,2\n",
        )
        .unwrap();
        assert_eq!((c.train.steps, c.train.lr, c.train.clip), (7, 0.5, None));
        assert_eq!(c.pushdown_layers, Some(vec![0, 2]));
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn unknown_and_malformed_input_is_rejected() {
        let mut c = RunConfig::default();
        assert_eq!(
            c.apply_text("stepz = 3"),
            Err(ConfigError::UnknownKey("stepz".into()))
        );
        assert_eq!(c.apply_text("steps 3"), Err(ConfigError::Syntax(1)));
        assert!(matches!(
            c.set("lr", "fast"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(c.apply_flags(&["--steps".into()]).is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::default();
        c.apply_text("steps = 7\nd_model = 16").unwrap();
        c.apply_flags(&["--steps".into(), "9".into(), "--d-model=8".into()])
            .unwrap();
        assert_eq!((c.train.steps, c.d_model), (9, 8));
    }

    #[test]
    fn hash_ignores_run_root_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run_root = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
