//! Run configuration: a sectioned `key = value` text file, layered under
//! command-line overrides.
//!
//! Precedence, highest first: flags, the `SEED` environment variable (seed
//! only), the file, built-in defaults. Choosing `regimen = ulmfit` swaps in a
//! different set of defaults; explicit keys still win.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Language;
use crate::encoder::{BackboneConfig, BackboneKind, Casing, Pooling};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind};
use crate::train::{OptimizerConfig, ScheduleKind, TrainConfig};

pub const SEED_ENV: &str = "SEED";

/// Every accepted `(section, key)`.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "language"),
    ("data", "train"),
    ("data", "dev"),
    ("data", "test"),
    ("data", "header"),
    ("model", "backbone"),
    ("model", "head"),
    ("model", "layers"),
    ("model", "heads"),
    ("model", "d_model"),
    ("model", "ff_dim"),
    ("model", "dropout"),
    ("model", "pooling"),
    ("model", "dense_hidden"),
    ("model", "lstm_units"),
    ("model", "head_dropout"),
    ("model", "casing"),
    ("model", "strip_emoji"),
    ("model", "vocab"),
    ("model", "vocab_size"),
    ("model", "min_pair_freq"),
    ("model", "char_vocab_size"),
    ("model", "char_dim"),
    ("model", "max_chars"),
    ("model", "highway_layers"),
    ("train", "regimen"),
    ("train", "seed"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "max_len"),
    ("train", "lr"),
    ("train", "beta1"),
    ("train", "beta2"),
    ("train", "eps"),
    ("train", "weight_decay"),
    ("train", "schedule"),
    ("train", "stlr_cut_frac"),
    ("train", "stlr_ratio"),
    ("train", "stlr_floor"),
    ("train", "grad_clip"),
    ("train", "discriminative_factor"),
    ("train", "unfreeze_epochs_per_stage"),
    ("train", "dropout_scale"),
    ("train", "lm_epochs"),
    ("output", "dir"),
];

const PATH_KEYS: &[(&str, &str)] = &[
    ("data", "train"),
    ("data", "dev"),
    ("data", "test"),
    ("model", "vocab"),
    ("output", "dir"),
];

const REQUIRED: &[(&str, &str)] = &[("data", "language"), ("data", "train"), ("data", "dev"), ("output", "dir")];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regimen {
    /// Fine-tune backbone and head together at one learning rate.
    #[default]
    Bert,
    /// Recurrent LM pretraining, STLR, discriminative rates, gradual unfreezing.
    Ulmfit,
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regimen::Bert => "bert",
            Regimen::Ulmfit => "ulmfit",
        })
    }
}

impl FromStr for Regimen {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bert" => Ok(Regimen::Bert),
            "ulmfit" => Ok(Regimen::Ulmfit),
            other => Err(Error::Config(format!("unknown regimen `{other}`"))),
        }
    }
}

fn is_known(section: &str, key: &str) -> bool {
    KEYS.contains(&(section, key))
}

fn is_path(section: &str, key: &str) -> bool {
    PATH_KEYS.contains(&(section, key))
}

/// Raw `(section, key) → value` settings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<(String, String), String>,
}

impl Settings {
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    /// Sets a known key, replacing any earlier value.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) -> Result<()> {
        if !is_known(section, key) {
            return Err(unknown_key(section, key));
        }
        self.values.insert((section.to_string(), key.to_string()), value.into());
        Ok(())
    }

    /// Lays `other` over `self`.
    pub fn overlay(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.values.iter().map(|((s, k), v)| (s.as_str(), k.as_str(), v.as_str()))
    }

    /// Parses config text. Relative path values are resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut out = Settings::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse(format!("line {line_no}: unterminated section header")))?
                    .trim()
                    .to_ascii_lowercase();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                section = Some(name);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {line_no}: expected `key = value`, got `{line}`")))?;
            let key = key.trim().to_ascii_lowercase();
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {line_no}: key `{key}` appears before any [section]")))?;
            if !is_known(sec, &key) {
                return Err(Error::Config(format!("line {line_no}: {}", unknown_key(sec, &key))));
            }
            if out.get(sec, &key).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key `{key}` in [{sec}]")));
            }
            let value = match base {
                Some(b) if is_path(sec, &key) && !value.eq_ignore_ascii_case("none") && Path::new(value).is_relative() => {
                    b.join(value).to_string_lossy().into_owned()
                }
                _ => value.to_string(),
            };
            out.values.insert((sec.to_string(), key), value);
        }
        Ok(out)
    }

    /// Parses a `section.key=value` override.
    pub fn parse_override(spec: &str) -> Result<(String, String, String)> {
        let (lhs, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` must look like section.key=value")))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override `{spec}` must name section.key")))?;
        let (section, key) = (section.to_ascii_lowercase(), key.to_ascii_lowercase());
        if !is_known(&section, &key) {
            return Err(unknown_key(&section, &key));
        }
        Ok((section, key, value.trim().to_string()))
    }
}

fn unknown_key(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key `{key}` in [{section}]"))
}

/// Fully resolved configuration of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub language: Language,
    pub train_path: PathBuf,
    pub dev_path: PathBuf,
    pub test_path: Option<PathBuf>,
    pub header: bool,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub casing: Casing,
    pub strip_emoji: bool,
    pub vocab_path: Option<PathBuf>,
    pub vocab_size: usize,
    pub min_pair_freq: usize,
    pub char_vocab_size: usize,
    pub regimen: Regimen,
    pub lm_epochs: usize,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

struct Source<'a> {
    settings: &'a Settings,
}

impl Source<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.settings.get(section, key)
    }

    fn parse<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("[{section}] {key} = `{v}`: {e}"))),
        }
    }

    fn optional<T: FromStr>(&self, section: &str, key: &str, default: Option<T>) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) if v.eq_ignore_ascii_case("none") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("[{section}] {key} = `{v}`: {e}"))),
        }
    }

    fn flag(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.raw(section, key).map(str::to_ascii_lowercase).as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("[{section}] {key} = `{v}`: expected true or false"))),
        }
    }

    fn required(&self, section: &str, key: &str) -> Result<&str> {
        self.raw(section, key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}` in [{section}]")))
    }
}

fn parse_casing(s: &str) -> std::result::Result<Casing, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "uncased" => Ok(Casing::Uncased),
        "cased" => Ok(Casing::Cased),
        other => Err(format!("unknown casing `{other}`")),
    }
}

fn parse_pooling(s: &str) -> std::result::Result<Pooling, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "mean" => Ok(Pooling::Mean),
        "cls" => Ok(Pooling::Cls),
        other => Err(format!("unknown pooling `{other}`")),
    }
}

struct Wrap<T>(T);

impl FromStr for Wrap<Casing> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_casing(s).map(Wrap)
    }
}

impl FromStr for Wrap<Pooling> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_pooling(s).map(Wrap)
    }
}

impl RunConfig {
    /// Resolves settings into a validated configuration.
    pub fn from_settings(settings: &Settings) -> Result<Self> {
        for (s, k) in REQUIRED {
            if settings.get(s, k).is_none() {
                return Err(Error::Config(format!("missing required key `{k}` in [{s}]")));
            }
        }
        let src = Source { settings };
        let regimen: Regimen = src.parse("train", "regimen", Regimen::Bert)?;
        let ulmfit = regimen == Regimen::Ulmfit;

        let kind_default = if ulmfit {
            BackboneKind::Recurrent
        } else {
            BackboneKind::Transformer
        };
        let kind: BackboneKind = src.parse("model", "backbone", kind_default)?;
        let desk = BackboneConfig::desk(kind);
        let d_model = src.parse("model", "d_model", desk.d_model)?;
        let mut char_cnn = desk.char_cnn.clone();
        char_cnn.output_dim = d_model;
        char_cnn.char_dim = src.parse("model", "char_dim", char_cnn.char_dim)?;
        char_cnn.max_chars = src.parse("model", "max_chars", char_cnn.max_chars)?;
        char_cnn.highway_layers = src.parse("model", "highway_layers", char_cnn.highway_layers)?;
        let backbone = BackboneConfig {
            kind,
            layers: src.parse("model", "layers", desk.layers)?,
            heads: src.parse("model", "heads", desk.heads)?,
            d_model,
            ff_dim: src.parse("model", "ff_dim", desk.ff_dim)?,
            dropout: src.parse("model", "dropout", desk.dropout)?,
            pooling: src.parse::<Wrap<Pooling>>("model", "pooling", Wrap(desk.pooling))?.0,
            char_cnn,
        };
        let head_kind: HeadKind = src.parse("model", "head", HeadKind::Dense)?;
        let base_head = HeadConfig::new(head_kind);
        let head = HeadConfig {
            kind: head_kind,
            dense_hidden: src.optional("model", "dense_hidden", None)?,
            lstm_units: src.parse("model", "lstm_units", base_head.lstm_units)?,
            dropout: src.parse("model", "head_dropout", base_head.dropout)?,
            classes: base_head.classes,
        };

        let base_opt = if ulmfit {
            OptimizerConfig {
                lr: 1e-2,
                ..OptimizerConfig::ulmfit()
            }
        } else {
            OptimizerConfig::default()
        };
        let defaults = TrainConfig {
            optimizer: base_opt,
            schedule: if ulmfit { ScheduleKind::Stlr } else { ScheduleKind::Constant },
            discriminative_factor: ulmfit.then_some(2.6),
            unfreeze_epochs_per_stage: ulmfit.then_some(1),
            dropout_scale: if ulmfit { 0.5 } else { 1.0 },
            ..TrainConfig::default()
        };
        let train = TrainConfig {
            batch_size: src.parse("train", "batch_size", defaults.batch_size)?,
            max_len: src.parse("train", "max_len", defaults.max_len)?,
            epochs: src.parse("train", "epochs", defaults.epochs)?,
            seed: src.parse("train", "seed", defaults.seed)?,
            optimizer: OptimizerConfig {
                lr: src.parse("train", "lr", base_opt.lr)?,
                beta1: src.parse("train", "beta1", base_opt.beta1)?,
                beta2: src.parse("train", "beta2", base_opt.beta2)?,
                eps: src.parse("train", "eps", base_opt.eps)?,
                weight_decay: src.parse("train", "weight_decay", base_opt.weight_decay)?,
            },
            schedule: src.parse("train", "schedule", defaults.schedule)?,
            stlr_cut_frac: src.parse("train", "stlr_cut_frac", defaults.stlr_cut_frac)?,
            stlr_ratio: src.parse("train", "stlr_ratio", defaults.stlr_ratio)?,
            stlr_floor: src.parse("train", "stlr_floor", defaults.stlr_floor)?,
            grad_clip: src.optional("train", "grad_clip", defaults.grad_clip)?,
            discriminative_factor: src.optional("train", "discriminative_factor", defaults.discriminative_factor)?,
            unfreeze_epochs_per_stage: src.optional(
                "train",
                "unfreeze_epochs_per_stage",
                defaults.unfreeze_epochs_per_stage,
            )?,
            dropout_scale: src.parse("train", "dropout_scale", defaults.dropout_scale)?,
        };

        let cfg = RunConfig {
            language: src.parse("data", "language", Language::English)?,
            train_path: PathBuf::from(src.required("data", "train")?),
            dev_path: PathBuf::from(src.required("data", "dev")?),
            test_path: src.optional("data", "test", None)?,
            header: src.flag("data", "header", false)?,
            backbone,
            head,
            casing: src.parse::<Wrap<Casing>>("model", "casing", Wrap(Casing::Uncased))?.0,
            strip_emoji: src.flag("model", "strip_emoji", false)?,
            vocab_path: src.optional("model", "vocab", None)?,
            vocab_size: src.parse("model", "vocab_size", 8000)?,
            min_pair_freq: src.parse("model", "min_pair_freq", 2)?,
            char_vocab_size: src.parse("model", "char_vocab_size", 262)?,
            regimen,
            lm_epochs: src.parse("train", "lm_epochs", usize::from(ulmfit))?,
            train,
            output_dir: PathBuf::from(src.required("output", "dir")?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        if self.backbone.kind == BackboneKind::External {
            return Err(Error::Config(
                "external-embeddings backbones cannot be trained from text; use the library adapter".into(),
            ));
        }
        if self.vocab_size < crate::encoder::vocab::SPECIALS.len() + 1 {
            return Err(Error::Config("vocab_size too small".into()));
        }
        if self.lm_epochs > 0 && self.backbone.kind != BackboneKind::Recurrent {
            return Err(Error::Config("lm_epochs needs backbone = recurrent-lm".into()));
        }
        Ok(())
    }

    /// Referenced input files must exist before a run starts.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = [Some(&self.train_path), Some(&self.dev_path), self.test_path.as_ref(), self.vocab_path.as_ref()];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("input file `{}` does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Canonical text of one setting, for inspection and tests.
    pub fn setting(&self, section: &str, key: &str) -> Option<String> {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let path = |p: &Path| p.to_string_lossy().into_owned();
        let t = &self.train;
        let b = &self.backbone;
        Some(match (section, key) {
            ("data", "language") => self.language.to_string(),
            ("data", "train") => path(&self.train_path),
            ("data", "dev") => path(&self.dev_path),
            ("data", "test") => opt(self.test_path.as_deref().map(path)),
            ("data", "header") => self.header.to_string(),
            ("model", "backbone") => b.kind.as_str().to_string(),
            ("model", "head") => self.head.kind.to_string(),
            ("model", "layers") => b.layers.to_string(),
            ("model", "heads") => b.heads.to_string(),
            ("model", "d_model") => b.d_model.to_string(),
            ("model", "ff_dim") => b.ff_dim.to_string(),
            ("model", "dropout") => b.dropout.to_string(),
            ("model", "pooling") => match b.pooling {
                Pooling::Mean => "mean".into(),
                Pooling::Cls => "cls".into(),
            },
            ("model", "dense_hidden") => opt(self.head.dense_hidden.map(|v| v.to_string())),
            ("model", "lstm_units") => self.head.lstm_units.to_string(),
            ("model", "head_dropout") => self.head.dropout.to_string(),
            ("model", "casing") => match self.casing {
                Casing::Uncased => "uncased".into(),
                Casing::Cased => "cased".into(),
            },
            ("model", "strip_emoji") => self.strip_emoji.to_string(),
            ("model", "vocab") => opt(self.vocab_path.as_deref().map(path)),
            ("model", "vocab_size") => self.vocab_size.to_string(),
            ("model", "min_pair_freq") => self.min_pair_freq.to_string(),
            ("model", "char_vocab_size") => self.char_vocab_size.to_string(),
            ("model", "char_dim") => b.char_cnn.char_dim.to_string(),
            ("model", "max_chars") => b.char_cnn.max_chars.to_string(),
            ("model", "highway_layers") => b.char_cnn.highway_layers.to_string(),
            ("train", "regimen") => self.regimen.to_string(),
            ("train", "seed") => t.seed.to_string(),
            ("train", "epochs") => t.epochs.to_string(),
            ("train", "batch_size") => t.batch_size.to_string(),
            ("train", "max_len") => t.max_len.to_string(),
            ("train", "lr") => t.optimizer.lr.to_string(),
            ("train", "beta1") => t.optimizer.beta1.to_string(),
            ("train", "beta2") => t.optimizer.beta2.to_string(),
            ("train", "eps") => t.optimizer.eps.to_string(),
            ("train", "weight_decay") => t.optimizer.weight_decay.to_string(),
            ("train", "schedule") => t.schedule.to_string(),
            ("train", "stlr_cut_frac") => t.stlr_cut_frac.to_string(),
            ("train", "stlr_ratio") => t.stlr_ratio.to_string(),
            ("train", "stlr_floor") => t.stlr_floor.to_string(),
            ("train", "grad_clip") => opt(t.grad_clip.map(|v| v.to_string())),
            ("train", "discriminative_factor") => opt(t.discriminative_factor.map(|v| v.to_string())),
            ("train", "unfreeze_epochs_per_stage") => opt(t.unfreeze_epochs_per_stage.map(|v| v.to_string())),
            ("train", "dropout_scale") => t.dropout_scale.to_string(),
            ("train", "lm_epochs") => self.lm_epochs.to_string(),
            ("output", "dir") => path(&self.output_dir),
            _ => return None,
        })
    }
}

/// Reads a config file; relative paths inside it are taken relative to the
/// file's directory.
pub fn read_settings(path: impl AsRef<Path>) -> Result<Settings> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Settings::parse(&text, path.parent())
}

/// File settings, then `SEED` from `env_seed`, then `flags`.
pub fn layered(file: &Settings, env_seed: Option<&str>, flags: &Settings) -> Result<Settings> {
    let mut s = file.clone();
    if let Some(seed) = env_seed {
        s.set("train", "seed", seed.trim())?;
    }
    s.overlay(flags);
    Ok(s)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    RunConfig::from_settings(&read_settings(path)?)
}
