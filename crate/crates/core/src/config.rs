//! Flat key-value configuration files: one `key = value` per line, `#`
//! comments. Covers dataset, model, loss, and training knobs; unset model
//! geometry follows the dataset geometry.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::loss::{DaKind, DxKind, Pairing};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Default dataset directory for commands not given --data.
    pub data_dir: String,
    set_keys: BTreeSet<String>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            data_dir: "data".into(),
            set_keys: BTreeSet::new(),
        }
    }
}

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// "1-4" or "2,3" style layer subsets (1-based).
pub fn parse_layers(spec: &str) -> Result<Vec<usize>> {
    let parse_one = |s: &str| -> Result<usize> {
        s.trim()
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("bad layer {s:?}: {e}")))
    };
    let mut layers = Vec::new();
    if let Some((lo, hi)) = spec.split_once('-') {
        let (lo, hi) = (parse_one(lo)?, parse_one(hi)?);
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad layer range {spec:?}")));
        }
        layers.extend(lo..=hi);
    } else {
        for part in spec.split(',') {
            layers.push(parse_one(part)?);
        }
    }
    if layers.is_empty() || layers.contains(&0) {
        return Err(Error::Config(format!("bad layer subset {spec:?}")));
    }
    layers.sort_unstable();
    layers.dedup();
    Ok(layers)
}

pub fn format_layers(layers: &[usize]) -> String {
    let contiguous = layers.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous && layers.len() > 1 {
        format!("{}-{}", layers[0], layers.last().unwrap())
    } else {
        layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

impl AppConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset.classes" => self.dataset.classes = parse(key, value)?,
            "dataset.clips_per_class" => self.dataset.clips_per_class = parse(key, value)?,
            "dataset.val_clips_per_class" => {
                self.dataset.val_clips_per_class = parse(key, value)?
            }
            "dataset.frames" => self.dataset.frames = parse(key, value)?,
            "dataset.height" => self.dataset.height = parse(key, value)?,
            "dataset.width" => self.dataset.width = parse(key, value)?,
            "dataset.paired" => self.dataset.paired = parse_bool(key, value)?,
            "dataset.seed" => self.dataset.seed = parse(key, value)?,
            "model.frames" => self.train.model.frames = parse(key, value)?,
            "model.height" => self.train.model.height = parse(key, value)?,
            "model.width" => self.train.model.width = parse(key, value)?,
            "model.patch_k" => self.train.model.patch_k = parse(key, value)?,
            "model.patch_p" => self.train.model.patch_p = parse(key, value)?,
            "model.dim" => self.train.model.dim = parse(key, value)?,
            "model.layers" => self.train.model.layers = parse(key, value)?,
            "model.heads" => self.train.model.heads = parse(key, value)?,
            "model.classes_exo" => self.train.model.classes_exo = parse(key, value)?,
            "model.classes_ego" => self.train.model.classes_ego = parse(key, value)?,
            "model.dropout" => self.train.model.dropout = parse(key, value)?,
            "loss.alpha" => self.train.loss.alpha = parse(key, value)?,
            "loss.beta" => self.train.loss.beta = parse(key, value)?,
            "loss.lambda" => self.train.loss.lambda = parse(key, value)?,
            "loss.dx" => {
                self.train.loss.dx = match value {
                    "pixel" => DxKind::Pixel,
                    "embed" => DxKind::Embed,
                    other => {
                        return Err(Error::Config(format!(
                            "loss.dx: expected pixel|embed, got {other:?}"
                        )))
                    }
                }
            }
            "loss.da" => {
                self.train.loss.da = match value {
                    "l2" => DaKind::L2,
                    "symkl" => DaKind::SymKl,
                    "jsmix" => DaKind::JsMixture,
                    other => {
                        return Err(Error::Config(format!(
                            "loss.da: expected l2|symkl|jsmix, got {other:?}"
                        )))
                    }
                }
            }
            "loss.layers" => self.train.loss.layers = parse_layers(value)?,
            "loss.pairing" => {
                self.train.loss.pairing = match value {
                    "matched" => Pairing::Matched,
                    "all" => Pairing::All,
                    other => {
                        return Err(Error::Config(format!(
                            "loss.pairing: expected matched|all, got {other:?}"
                        )))
                    }
                }
            }
            "loss.epsilon" => self.train.loss.epsilon = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.base_lr" => self.train.base_lr = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.g_pretrain_epochs" => self.train.g_pretrain_epochs = parse(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "data.dir" => self.data_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        self.set_keys.insert(key.to_string());
        Ok(())
    }

    /// Model geometry and class counts follow the dataset unless the model
    /// keys were set explicitly.
    fn sync(&mut self) {
        if !self.set_keys.contains("model.frames") {
            self.train.model.frames = self.dataset.frames;
        }
        if !self.set_keys.contains("model.height") {
            self.train.model.height = self.dataset.height;
        }
        if !self.set_keys.contains("model.width") {
            self.train.model.width = self.dataset.width;
        }
        if !self.set_keys.contains("model.classes_exo") {
            self.train.model.classes_exo = self.dataset.classes;
        }
        if !self.set_keys.contains("model.classes_ego") {
            self.train.model.classes_ego = self.dataset.classes;
        }
        if !self.set_keys.contains("loss.layers") {
            self.train.loss.layers = (1..=self.train.model.layers).collect();
        }
    }

    pub fn from_kvs(kvs: &[(String, String)]) -> Result<AppConfig> {
        let mut cfg = AppConfig::default();
        for (k, v) in kvs {
            cfg.apply(k, v)?;
        }
        cfg.sync();
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<AppConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kvs(&parse_kv(&text)?)
    }

    /// Re-apply overrides (echoed into the effective config) and re-sync.
    pub fn apply_overrides(&mut self, kvs: &[(String, String)]) -> Result<()> {
        for (k, v) in kvs {
            self.apply(k, v)?;
        }
        self.sync();
        Ok(())
    }

    /// The complete effective configuration, sorted by key.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let d = &self.dataset;
        let m = &self.train.model;
        let l = &self.train.loss;
        let t = &self.train;
        let dx = match l.dx {
            DxKind::Pixel => "pixel",
            DxKind::Embed => "embed",
        };
        let da = match l.da {
            DaKind::L2 => "l2",
            DaKind::SymKl => "symkl",
            DaKind::JsMixture => "jsmix",
        };
        let pairing = match l.pairing {
            Pairing::Matched => "matched",
            Pairing::All => "all",
        };
        let mut kv: Vec<(String, String)> = vec![
            ("data.dir".into(), self.data_dir.clone()),
            ("dataset.classes".into(), d.classes.to_string()),
            ("dataset.clips_per_class".into(), d.clips_per_class.to_string()),
            (
                "dataset.val_clips_per_class".into(),
                d.val_clips_per_class.to_string(),
            ),
            ("dataset.frames".into(), d.frames.to_string()),
            ("dataset.height".into(), d.height.to_string()),
            ("dataset.width".into(), d.width.to_string()),
            ("dataset.paired".into(), d.paired.to_string()),
            ("dataset.seed".into(), d.seed.to_string()),
            ("model.frames".into(), m.frames.to_string()),
            ("model.height".into(), m.height.to_string()),
            ("model.width".into(), m.width.to_string()),
            ("model.patch_k".into(), m.patch_k.to_string()),
            ("model.patch_p".into(), m.patch_p.to_string()),
            ("model.dim".into(), m.dim.to_string()),
            ("model.layers".into(), m.layers.to_string()),
            ("model.heads".into(), m.heads.to_string()),
            ("model.classes_exo".into(), m.classes_exo.to_string()),
            ("model.classes_ego".into(), m.classes_ego.to_string()),
            ("model.dropout".into(), m.dropout.to_string()),
            ("loss.alpha".into(), l.alpha.to_string()),
            ("loss.beta".into(), l.beta.to_string()),
            ("loss.lambda".into(), l.lambda.to_string()),
            ("loss.dx".into(), dx.into()),
            ("loss.da".into(), da.into()),
            ("loss.layers".into(), format_layers(&l.layers)),
            ("loss.pairing".into(), pairing.into()),
            ("loss.epsilon".into(), l.epsilon.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.base_lr".into(), t.base_lr.to_string()),
            ("train.momentum".into(), t.momentum.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.seed".into(), t.seed.to_string()),
            ("train.g_pretrain_epochs".into(), t.g_pretrain_epochs.to_string()),
            ("train.checkpoint_every".into(), t.checkpoint_every.to_string()),
            ("train.augment".into(), t.augment.to_string()),
        ];
        kv.sort();
        kv
    }

    pub fn write_effective(&self, path: &Path) -> Result<()> {
        let mut text = String::from("# effective configuration\n");
        for (k, v) in self.to_kv() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
