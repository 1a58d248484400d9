//! Versioned binary container for models and optimizer state.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Normalization;
use crate::engine::MetricRow;
use crate::error::{Error, Result};
use crate::search::{SearchModel, SearchState};
use crate::search_space::{AlphaSnapshot, Genotype};
use crate::tensor::optim::{Adam, Sgd};
use crate::tensor::Tensor;
use crate::train::{TrainState, TrainedModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SCALENAS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Search,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub genotype: Option<Genotype>,
    pub norm: Normalization,
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub sgd_slots: usize,
    pub adam_t: u64,
    pub adam_slots: usize,
    pub metrics: Vec<MetricRow>,
    pub history: Vec<AlphaSnapshot>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

fn format_err(origin: &str, msg: impl Into<String>) -> Error {
    Error::Format {
        path: origin.to_string(),
        msg: msg.into(),
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

struct Packer {
    entries: Vec<TensorEntry>,
    tensors: Vec<Tensor<f32>>,
}

impl Packer {
    fn new() -> Self {
        Packer {
            entries: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: &Tensor<f32>) {
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
        });
        self.tensors.push(t.clone());
    }

    fn weights(&mut self, store: &crate::nn::ParamStore<f32>) {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            self.push(format!("param/{name}"), t);
        }
        for (name, s) in store.stats_names().iter().zip(store.stats()) {
            let c = s.mean.len();
            self.push(format!("mean/{name}"), &Tensor::from_fn(&[c], |i| s.mean[i]));
            self.push(format!("var/{name}"), &Tensor::from_fn(&[c], |i| s.var[i]));
        }
    }

    fn sgd(&mut self, opt: &Sgd<f32>) -> usize {
        for (i, b) in opt.buffers().iter().enumerate() {
            if let Some(b) = b {
                self.push(format!("sgd/{i}"), b);
            }
        }
        opt.buffers().len()
    }
}

impl Checkpoint {
    fn lookup(&self) -> HashMap<&str, &Tensor<f32>> {
        self.header
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .zip(&self.tensors)
            .collect()
    }

    fn load_weights(&self, store: &mut crate::nn::ParamStore<f32>) -> Result<()> {
        let map = self.lookup();
        store.load_named(|n| map.get(format!("param/{n}").as_str()).map(|t| (*t).clone()))?;
        let names = store.stats_names().to_vec();
        for (name, slot) in names.iter().zip(store.stats_mut()) {
            let width = slot.mean.len();
            let get = |prefix: &str| {
                map.get(format!("{prefix}/{name}").as_str())
                    .filter(|t| t.len() == width)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::State(format!("checkpoint lacks running statistics `{name}`")))
            };
            slot.mean = get("mean")?;
            slot.var = get("var")?;
        }
        Ok(())
    }

    fn load_sgd(&self, opt: &mut Sgd<f32>) {
        let map = self.lookup();
        let buffers = (0..self.header.sgd_slots)
            .map(|i| map.get(format!("sgd/{i}").as_str()).map(|t| (*t).clone()))
            .collect();
        opt.set_buffers(buffers);
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::State(format!(
                "expected a {kind:?} checkpoint, found a {:?} checkpoint",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn from_search(
        config: &RunConfig,
        norm: &Normalization,
        model: &SearchModel<f32>,
        state: &SearchState<f32>,
    ) -> Checkpoint {
        let mut p = Packer::new();
        p.weights(&model.params);
        for (i, a) in model.alphas.tensors().iter().enumerate() {
            p.push(format!("alpha/{i}"), a);
        }
        let sgd_slots = p.sgd(&state.weight_opt);
        let (m, v) = state.alpha_opt.moments();
        for (i, (m, v)) in m.iter().zip(v).enumerate() {
            p.push(format!("adam_m/{i}"), m);
            p.push(format!("adam_v/{i}"), v);
        }
        Checkpoint {
            header: CheckpointHeader {
                kind: CheckpointKind::Search,
                config: config.clone(),
                genotype: None,
                norm: norm.clone(),
                seed: config.seed,
                epoch: state.epoch,
                step: state.step,
                sgd_slots,
                adam_t: state.alpha_opt.t,
                adam_slots: m.len(),
                metrics: state.metrics.clone(),
                history: state.history.clone(),
                tensors: p.entries,
            },
            tensors: p.tensors,
        }
    }

    pub fn to_search(&self) -> Result<(SearchModel<f32>, SearchState<f32>)> {
        self.expect_kind(CheckpointKind::Search)?;
        let h = &self.header;
        let cfg = &h.config.search;
        let mut model = SearchModel::new(&cfg.network_for(&h.config.network), h.seed)?;
        self.load_weights(&mut model.params)?;
        let map = self.lookup();
        for (i, slot) in model.alphas.tensors_mut().iter_mut().enumerate() {
            let t = map
                .get(format!("alpha/{i}").as_str())
                .filter(|t| t.shape() == slot.shape())
                .ok_or_else(|| Error::State(format!("checkpoint lacks alpha vector {i}")))?;
            *slot = (*t).clone();
        }
        let mut state = SearchState::new(cfg);
        state.epoch = h.epoch;
        state.step = h.step;
        self.load_sgd(&mut state.weight_opt);
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        for i in 0..h.adam_slots {
            let get = |p: &str| {
                map.get(format!("{p}/{i}").as_str())
                    .map(|t| (*t).clone())
                    .ok_or_else(|| Error::State(format!("checkpoint lacks Adam moment {p}/{i}")))
            };
            ms.push(get("adam_m")?);
            vs.push(get("adam_v")?);
        }
        state.alpha_opt = Adam::new(cfg.alphas);
        state.alpha_opt.set_moments(h.adam_t, ms, vs);
        state.metrics = h.metrics.clone();
        state.history = h.history.clone();
        Ok((model, state))
    }

    pub fn from_train(config: &RunConfig, model: &TrainedModel<f32>, state: &TrainState<f32>) -> Checkpoint {
        let mut p = Packer::new();
        p.weights(&model.params);
        let sgd_slots = p.sgd(&state.opt);
        Checkpoint {
            header: CheckpointHeader {
                kind: CheckpointKind::Train,
                config: config.clone(),
                genotype: Some(model.genotype().clone()),
                norm: model.norm.clone(),
                seed: config.seed,
                epoch: state.epoch,
                step: state.step,
                sgd_slots,
                adam_t: 0,
                adam_slots: 0,
                metrics: state.metrics.clone(),
                history: Vec::new(),
                tensors: p.entries,
            },
            tensors: p.tensors,
        }
    }

    pub fn to_train(&self) -> Result<(TrainedModel<f32>, TrainState<f32>)> {
        self.expect_kind(CheckpointKind::Train)?;
        let h = &self.header;
        let genotype = h
            .genotype
            .as_ref()
            .ok_or_else(|| Error::State("train checkpoint carries no genotype".into()))?;
        let mut model = TrainedModel::new(&h.config.network, genotype, h.norm.clone(), h.seed)?;
        self.load_weights(&mut model.params)?;
        let mut state = TrainState::new(&h.config.train);
        state.epoch = h.epoch;
        state.step = h.step;
        self.load_sgd(&mut state.opt);
        state.metrics = h.metrics.clone();
        Ok((model, state))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let floats: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(format_err(origin, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                artifact: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| format_err(origin, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| format_err(origin, format!("bad header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| format_err(origin, format!("truncated data for `{}`", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data)?);
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(format_err(origin, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}
