//! Run configuration: a TOML document with dotted sections.
//!
//! Values are resolved in layers: built-in defaults, then the config file,
//! then a named preset, then `key=value` overrides from the command line.
//! Every key is checked against the known schema so mistakes are reported
//! with their full dotted path.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{load_cifar, toy_dataset, CifarOptions, CifarVariant, Dataset, ToySpec};
use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::search::SearchConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Toy,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR binary files.
    pub path: Option<PathBuf>,
    pub toy: ToySpec,
    pub records_per_file: Option<usize>,
    /// Expected SHA-256 per file name.
    pub checksums: Option<BTreeMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Per-sample budgets in MFLOPS for the budgeted-accuracy table.
    pub budgets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig {
                source: DataSource::Cifar10,
                path: None,
                toy: ToySpec::default(),
                records_per_file: None,
                checksums: None,
            },
            network: NetworkConfig {
                layers: 5,
                scales: 1,
                init_channels: 16,
                nodes: 4,
                classifier_layers: vec![5],
                reduction_layers: NetworkConfig::default_reductions(5),
                num_classes: 10,
                in_channels: 3,
                input_size: 32,
            },
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig {
                batch_size: 128,
                budgets: Vec::new(),
            },
        }
    }
}

/// Keys that may be absent from the defaults.
const OPTIONAL_KEYS: &[&str] = &[
    "data.path",
    "data.records_per_file",
    "data.checksums",
    "search.exit_weights",
    "search.weights.grad_clip",
    "train.exit_weights",
    "train.weights.grad_clip",
];

/// Keys whose value is a free-form map.
const MAP_KEYS: &[&str] = &["data.checksums"];

const BASELINE_SEARCH: &str = r#"
[network]
layers = 5
scales = 1
init_channels = 16
nodes = 4
classifier_layers = [5]
reduction_layers = [2, 4]

[search]
early_exits = false
"#;

const PAPER_SOTA: &str = r#"
[network]
layers = 7
scales = 3
init_channels = 16
nodes = 2
classifier_layers = [2, 3, 4, 5, 6, 7]
reduction_layers = [3, 5]

[search]
early_exits = true
"#;

const TOY: &str = r#"
[data]
source = "toy"

[data.toy]
classes = 2
size = 8
channels = 3
samples = 1000

[network]
layers = 3
scales = 2
init_channels = 8
nodes = 2
classifier_layers = [2, 3]
reduction_layers = [3]
num_classes = 2
in_channels = 3
input_size = 8

[search]
epochs = 10
batch_size = 32

[search.augment]
crop_padding = 1
flip = true
cutout = 4

[train]
epochs = 10
batch_size = 32

[train.augment]
crop_padding = 1
flip = true
cutout = 4

[eval]
batch_size = 200
"#;

/// Names of the built-in presets.
pub const PRESETS: &[&str] = &["baseline-search", "paper-sota", "toy"];

pub fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "baseline-search" => Ok(BASELINE_SEARCH),
        "paper-sota" => Ok(PAPER_SOTA),
        "toy" => Ok(TOY),
        other => Err(Error::Config {
            field: "preset".into(),
            msg: format!("unknown preset `{other}`; choose one of {}", PRESETS.join(", ")),
        }),
    }
}

fn cfg_err(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| cfg_err(origin, e.to_string().trim().to_string()))
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a date",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Rejects unknown keys and values whose type differs from the default's.
fn check_keys(given: &Table, schema: &Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if MAP_KEYS.contains(&path.as_str()) {
            continue;
        }
        match schema.get(k) {
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => return Err(cfg_err(path, "unknown key")),
            Some(Value::Table(s)) => match v {
                Value::Table(t) => check_keys(t, s, &path)?,
                other => return Err(cfg_err(path, format!("expected a table, got {}", kind(other)))),
            },
            Some(d) => {
                let ok = matches!(
                    (d, v),
                    (Value::String(_), Value::String(_))
                        | (Value::Integer(_), Value::Integer(_))
                        | (Value::Float(_), Value::Float(_) | Value::Integer(_))
                        | (Value::Boolean(_), Value::Boolean(_))
                        | (Value::Array(_), Value::Array(_))
                );
                if !ok {
                    return Err(cfg_err(path, format!("expected {}, got {}", kind(d), kind(v))));
                }
            }
        }
    }
    Ok(())
}

/// Parses one `dotted.key=value` override. Values are read as TOML and fall
/// back to a bare string.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| cfg_err(raw, "overrides must look like `section.key=value`"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(cfg_err(raw, "empty key in override"));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.split('.').map(String::from).collect(), parsed))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(cfg_err(path[..=i].join("."), "is not a section")),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Where the configuration comes from, lowest precedence first.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub file: Option<String>,
    pub preset: Option<String>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(src: &ConfigSources) -> Result<RunConfig> {
        let defaults = Table::try_from(RunConfig::default()).map_err(|e| cfg_err("defaults", e.to_string()))?;
        let mut merged = defaults.clone();
        let mut layers = Vec::new();
        if let Some(text) = &src.file {
            layers.push(parse_table(text, "config file")?);
        }
        if let Some(name) = &src.preset {
            layers.push(parse_table(preset_text(name)?, "preset")?);
        }
        let mut cli = Table::new();
        for raw in &src.overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut cli, &path, value)?;
        }
        if let Some(seed) = src.seed {
            cli.insert("seed".into(), Value::Integer(seed as i64));
        }
        layers.push(cli);
        for layer in layers {
            check_keys(&layer, &defaults, "")?;
            merge(&mut merged, layer);
        }
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| cfg_err("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        RunConfig::resolve(&ConfigSources {
            file: Some(text.to_string()),
            ..Default::default()
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.network;
        n.validate()?;
        self.search.validate(n)?;
        self.train.validate(n)?;
        if self.eval.batch_size == 0 {
            return Err(cfg_err("eval.batch_size", "must be positive"));
        }
        if let Some(b) = self.eval.budgets.iter().find(|b| b.is_nan() || **b < 0.0) {
            return Err(cfg_err("eval.budgets", format!("budgets must be non-negative, got {b}")));
        }
        let (classes, channels, size) = match self.data.source {
            DataSource::Toy => {
                let t = &self.data.toy;
                if t.classes < 2 || t.size == 0 || t.channels == 0 || t.samples < 2 * t.classes {
                    return Err(cfg_err("data.toy", "needs at least 2 classes, 2 samples per class and a positive size"));
                }
                if !(t.test_fraction > 0.0 && t.test_fraction < 1.0) {
                    return Err(cfg_err("data.toy.test_fraction", "must lie in (0, 1)"));
                }
                (t.classes, t.channels, t.size)
            }
            DataSource::Cifar10 => (10, 3, 32),
            DataSource::Cifar100 => (100, 3, 32),
        };
        for (field, want, got) in [
            ("network.num_classes", classes, n.num_classes),
            ("network.in_channels", channels, n.in_channels),
            ("network.input_size", size, n.input_size),
        ] {
            if want != got {
                return Err(cfg_err(field, format!("the dataset provides {want}, config says {got}")));
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let variant = match d.source {
            DataSource::Toy => return Ok(toy_dataset(&d.toy)),
            DataSource::Cifar10 => CifarVariant::Cifar10,
            DataSource::Cifar100 => CifarVariant::Cifar100,
        };
        let path = d
            .path
            .as_ref()
            .ok_or_else(|| cfg_err("data.path", "a CIFAR source needs the directory of binary files"))?;
        load_cifar(
            path,
            variant,
            &CifarOptions {
                records_per_file: d.records_per_file,
                checksums: d.checksums.clone(),
            },
        )
    }
}
