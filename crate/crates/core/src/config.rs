//! Experiment configuration: a TOML file plus dotted-key overrides.
//!
//! Every field has a default, so an empty file is a complete configuration.
//! Unknown keys are rejected with the list of valid ones, and type errors
//! name the offending key path.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentSpec, Strength};
use crate::error::{Error, Result};
use crate::signal::{load_any, synth_generate, FeatureDataset, Protocol};
use crate::ssl::{Method, SslMethodConfig, ADAMATCH_TAU_SEED, ADAMATCH_TAU_SEED_IV, FIXMATCH_TAU};
use crate::train::{AdamConfig, GridCell, Selection, TrainConfig};

pub const DEFAULT_M_VALUES: [usize; 6] = [1, 3, 5, 7, 10, 25];
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const OUT_DIR_ENV: &str = "SEMIMATCH_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synth,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Synthetic data: classes, samples per class, class separation, seed.
    pub k: usize,
    pub n_per_class: usize,
    pub sep: f64,
    pub seed: u64,
    /// Feature file (binary, or CSV by extension).
    pub path: Option<PathBuf>,
    pub protocol: Protocol,
    /// Number of frequency bands in a CSV feature row.
    pub bands: usize,
    /// Class count for CSV files; inferred from the labels when absent.
    pub num_classes: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Synth,
            k: 3,
            n_per_class: 1000,
            sep: 4.0,
            seed: 0,
            path: None,
            protocol: Protocol::Seed,
            bands: 5,
            num_classes: None,
        }
    }
}

impl DatasetSection {
    pub fn describe(&self) -> String {
        match self.kind {
            DatasetKind::Synth => format!(
                "synth(k={},n={},sep={},seed={})",
                self.k, self.n_per_class, self.sep, self.seed
            ),
            DatasetKind::File => format!(
                "file({},{})",
                self.path.as_deref().unwrap_or(Path::new("?")).display(),
                self.protocol
            ),
        }
    }

    pub fn load(&self) -> Result<FeatureDataset> {
        match self.kind {
            DatasetKind::Synth => synth_generate(self.k, self.n_per_class, self.sep, self.seed),
            DatasetKind::File => {
                let path = self
                    .path
                    .as_deref()
                    .ok_or_else(|| config_err("dataset.path", "required for kind = \"file\""))?;
                load_any(path, self.bands, self.num_classes)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub selection: Selection,
    pub max_steps_per_epoch: Option<usize>,
    pub allow_empty_labeled: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSection {
            epochs: 30,
            batch_size: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            selection: Selection::BestValidation,
            max_steps_per_epoch: None,
            allow_empty_labeled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslSection {
    pub temperature: f64,
    pub alpha: f64,
    /// Threshold applied to both FixMatch and AdaMatch when set.
    pub tau: Option<f64>,
    pub fixmatch_tau: f64,
    /// AdaMatch threshold; defaults to the protocol's value when absent.
    pub adamatch_tau: Option<f64>,
    pub ema_decay: f64,
    pub te_alpha: f64,
    pub unsup_weight_max: f64,
    pub warmup_epochs: usize,
    pub noise_mean: f64,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub mixmatch_aug_labeled: bool,
    pub mixmatch_logit_mse: bool,
    pub fixmatch_weak_sup_aug: bool,
    pub adamatch_running_dist: bool,
    pub adamatch_dist_momentum: f64,
}

impl Default for SslSection {
    fn default() -> Self {
        let base = SslMethodConfig::defaults(Method::MixMatch, Protocol::Seed);
        SslSection {
            temperature: base.temperature,
            alpha: base.alpha,
            tau: None,
            fixmatch_tau: FIXMATCH_TAU,
            adamatch_tau: None,
            ema_decay: base.ema_decay,
            te_alpha: base.te_alpha,
            unsup_weight_max: base.unsup_weight_max,
            warmup_epochs: base.warmup_epochs,
            noise_mean: base.weak.mu,
            weak_sigma: base.weak.sigma,
            strong_sigma: base.strong.sigma,
            mixmatch_aug_labeled: base.mixmatch_aug_labeled,
            mixmatch_logit_mse: base.mixmatch_logit_mse,
            fixmatch_weak_sup_aug: base.fixmatch_weak_sup_aug,
            adamatch_running_dist: base.adamatch_running_dist,
            adamatch_dist_momentum: base.adamatch_dist_momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    pub m_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub ssl: SslSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("results"),
            methods: Method::ALL.to_vec(),
            m_values: DEFAULT_M_VALUES.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            jobs: 1,
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            ssl: SslSection::default(),
        }
    }
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(config_err("methods", "at least one method is required"));
        }
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return Err(config_err(
                "m_values",
                "need at least one value, all positive",
            ));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.jobs == 0 {
            return Err(config_err("jobs", "must be >= 1"));
        }
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synth => {
                if d.protocol != Protocol::Seed {
                    return Err(config_err(
                        "dataset.protocol",
                        "synthetic data has 15 sessions; use protocol = \"seed\"",
                    ));
                }
            }
            DatasetKind::File => match &d.path {
                None => return Err(config_err("dataset.path", "required for kind = \"file\"")),
                Some(p) if !p.is_file() => {
                    return Err(config_err(
                        "dataset.path",
                        format!("{} does not exist", p.display()),
                    ))
                }
                Some(_) => {}
            },
        }
        for &m in &self.methods {
            self.train_config(GridCell {
                method: m,
                m: 1,
                seed: 0,
            })?
            .validate()?;
        }
        Ok(())
    }

    pub fn protocol(&self) -> Protocol {
        self.dataset.protocol
    }

    /// Fully resolved objective settings for `method`.
    pub fn method_config(&self, method: Method) -> Result<SslMethodConfig> {
        let s = &self.ssl;
        let protocol = self.protocol();
        let mut cfg = SslMethodConfig::defaults(method, protocol);
        cfg.temperature = s.temperature;
        cfg.alpha = s.alpha;
        cfg.tau = match method {
            Method::FixMatch => s.tau.unwrap_or(s.fixmatch_tau),
            Method::AdaMatch => s.tau.or(s.adamatch_tau).unwrap_or(match protocol {
                Protocol::Seed => ADAMATCH_TAU_SEED,
                Protocol::SeedIv => ADAMATCH_TAU_SEED_IV,
            }),
            _ => s.tau.unwrap_or(cfg.tau),
        };
        cfg.ema_decay = s.ema_decay;
        cfg.te_alpha = s.te_alpha;
        cfg.unsup_weight_max = s.unsup_weight_max;
        cfg.warmup_epochs = s.warmup_epochs;
        cfg.weak = AugmentSpec::new(s.noise_mean, s.weak_sigma, Strength::Weak)?;
        cfg.strong = AugmentSpec::new(s.noise_mean, s.strong_sigma, Strength::Strong)?;
        cfg.mixmatch_aug_labeled = s.mixmatch_aug_labeled;
        cfg.mixmatch_logit_mse = s.mixmatch_logit_mse;
        cfg.fixmatch_weak_sup_aug = s.fixmatch_weak_sup_aug;
        cfg.adamatch_running_dist = s.adamatch_running_dist;
        cfg.adamatch_dist_momentum = s.adamatch_dist_momentum;
        Ok(cfg)
    }

    pub fn train_config(&self, cell: GridCell) -> Result<TrainConfig> {
        let t = &self.train;
        let mut cfg = TrainConfig::new(self.method_config(cell.method)?, cell.m, cell.seed);
        cfg.epochs = t.epochs;
        cfg.batch_size = t.batch_size;
        cfg.adam = AdamConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
        };
        cfg.selection = t.selection;
        cfg.max_steps_per_epoch = t.max_steps_per_epoch;
        cfg.allow_empty_labeled = t.allow_empty_labeled;
        Ok(cfg)
    }

    pub fn cells(&self) -> Vec<GridCell> {
        GridCell::product(&self.methods, &self.m_values, &self.seeds)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("<serialize>", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("<parse>", e.to_string()))?;
        from_table(table)
    }
}

fn from_table(table: toml::Table) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        config_err(
            if path.is_empty() { "." } else { &path },
            e.into_inner().to_string(),
        )
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

/// Where an explicitly set key came from; keys not listed are defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub key: String,
    pub source: Source,
    pub value: String,
    /// Value this entry replaced, when an earlier source also set the key.
    pub replaced: Option<(Source, String)>,
}

/// A dotted-key override such as `train.epochs = 5`.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
    pub source: Source,
}

impl Override {
    pub fn new(key: impl Into<String>, value: impl Into<toml::Value>, source: Source) -> Self {
        Override {
            key: key.into(),
            value: value.into(),
            source,
        }
    }

    /// Parses `key=value`, reading the value as a TOML literal and falling
    /// back to a bare string.
    pub fn parse(assignment: &str, source: Source) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(assignment, "expected key=value"))?;
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Override::new(key.trim(), value, source))
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| config_err(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads the optional file, applies overrides in order (later wins) and
/// resolves defaults. Each explicit setting is logged with its source.
pub fn load_config(
    file: Option<&Path>,
    overrides: &[Override],
) -> Result<(ExperimentConfig, Vec<Provenance>)> {
    let mut table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| config_err(&p.display().to_string(), e.to_string()))?
        }
        None => toml::Table::new(),
    };
    let mut provenance: Vec<Provenance> = Vec::new();
    let mut file_keys = Vec::new();
    flatten("", &table, &mut file_keys);
    for (key, v) in file_keys {
        provenance.push(Provenance {
            key,
            source: Source::File,
            value: v.to_string(),
            replaced: None,
        });
    }
    for o in overrides {
        set_dotted(&mut table, &o.key, o.value.clone())?;
        let previous = provenance.iter().position(|p| p.key == o.key);
        let replaced = previous.map(|i| {
            let p = provenance.remove(i);
            (p.source, p.value)
        });
        provenance.push(Provenance {
            key: o.key.clone(),
            source: o.source,
            value: o.value.to_string(),
            replaced,
        });
    }
    let cfg = from_table(table)?;
    for p in &provenance {
        match &p.replaced {
            Some((src, old)) => log::info!(
                "config {} = {} ({}, overrides {} value {})",
                p.key,
                p.value,
                p.source,
                src,
                old
            ),
            None => log::info!("config {} = {} ({})", p.key, p.value, p.source),
        }
    }
    Ok((cfg, provenance))
}
