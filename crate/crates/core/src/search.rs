//! Bilevel architecture search: alternating first-order updates of the
//! architecture weights (on validation batches) and network weights (on
//! training batches).

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, make_splits, AugmentPolicy, Dataset, Split};
use crate::engine::{
    arch_step, batches, equal_weights, evaluate_exits, score_rows, weight_step, EpochMeter, ExitModel, MetricRow,
    StepStats,
};
use crate::error::{Error, Result};
use crate::net::{Network, NetworkConfig};
use crate::nn::{Builder, ForwardCtx, ParamStore};
use crate::rng::{derive_seed, stream, Purpose};
use crate::search_space::{derive_genotype, AlphaSnapshot, AlphaTable, BoundAlphas, CellSpec, Genotype};
use crate::tensor::optim::{cosine_lr, Adam, AdamConfig, Sgd, SgdConfig};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the training images held out for architecture updates.
    pub val_split: f64,
    pub weights: SgdConfig,
    pub alphas: AdamConfig,
    pub augment: AugmentPolicy,
    /// Per-exit loss weights; equal weights when absent.
    pub exit_weights: Option<Vec<f64>>,
    /// When false only the deepest classifier is attached during search.
    pub early_exits: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 64,
            val_split: 0.5,
            weights: SgdConfig::default(),
            alphas: AdamConfig::default(),
            augment: AugmentPolicy {
                cutout: 16,
                ..AugmentPolicy::default()
            },
            exit_weights: None,
            early_exits: true,
        }
    }
}

pub(crate) fn cfg_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

/// Checks per-exit loss weights: one per exit, non-negative, not all zero.
pub fn resolve_exit_weights(field: &str, given: Option<&[f64]>, exits: usize) -> Result<Vec<f64>> {
    let Some(w) = given else {
        return Ok(equal_weights(exits));
    };
    if w.len() != exits {
        return Err(cfg_err(field, format!("{} weights for {exits} exits", w.len())));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(cfg_err(field, "weights must be finite and non-negative"));
    }
    if !w.iter().any(|v| *v > 0.0) {
        return Err(cfg_err(field, "at least one weight must be positive"));
    }
    Ok(w.to_vec())
}

impl SearchConfig {
    /// The network actually searched: intermediate exits are dropped when
    /// early exits are disabled.
    pub fn network_for(&self, net: &NetworkConfig) -> NetworkConfig {
        let mut n = net.clone();
        if !self.early_exits {
            n.classifier_layers = vec![n.layers];
        }
        n
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return Err(cfg_err("search.val_split", format!("must lie in (0, 1), got {}", self.val_split)));
        }
        if self.batch_size < 2 {
            return Err(cfg_err("search.batch_size", "must be at least 2"));
        }
        if self.weights.lr < 0.0 || self.alphas.lr < 0.0 {
            return Err(cfg_err("search.weights.lr", "learning rates must be non-negative"));
        }
        let n = self.network_for(net);
        n.validate()?;
        resolve_exit_weights("search.exit_weights", self.exit_weights.as_deref(), n.num_exits())?;
        Ok(())
    }
}

/// A relaxed network, its weights and its architecture parameters.
#[derive(Clone, Debug)]
pub struct SearchModel<T> {
    pub net: Network,
    pub params: ParamStore<T>,
    pub alphas: AlphaTable<T>,
}

impl<T: Real> SearchModel<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = stream(seed, Purpose::Init, 0);
        let net = Network::relaxed(config, &mut Builder::new(&mut params, &mut rng))?;
        Ok(SearchModel {
            net,
            params,
            alphas: AlphaTable::new(CellSpec::new(config.nodes)),
        })
    }
}

impl<T: Real> ExitModel<T> for SearchModel<T> {
    fn weights(&self) -> &ParamStore<T> {
        &self.params
    }

    fn weights_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn arch(&self) -> &[Tensor<T>] {
        self.alphas.tensors()
    }

    fn arch_mut(&mut self) -> &mut [Tensor<T>] {
        self.alphas.tensors_mut()
    }

    fn num_exits(&self) -> usize {
        self.net.num_exits()
    }

    fn logits(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, arch: &[Var]) -> Result<Vec<Var>> {
        let e = self.alphas.spec().num_edges();
        if arch.len() != 2 * e {
            return Err(crate::error::arg_err(format!("expected {} alpha vectors, got {}", 2 * e, arch.len())));
        }
        let bound = BoundAlphas {
            normal: arch[..e].to_vec(),
            reduction: arch[e..].to_vec(),
        };
        Ok(self.net.forward(ctx, x, Some(&bound))?.logits)
    }
}

/// Optimizer state and logs; together with the model this is everything a
/// resumed search needs.
#[derive(Clone, Debug)]
pub struct SearchState<T> {
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub weight_opt: Sgd<T>,
    pub alpha_opt: Adam<T>,
    pub metrics: Vec<MetricRow>,
    pub history: Vec<AlphaSnapshot>,
}

impl<T: Real> SearchState<T> {
    pub fn new(cfg: &SearchConfig) -> Self {
        SearchState {
            epoch: 0,
            step: 0,
            weight_opt: Sgd::new(cfg.weights.momentum, cfg.weights.weight_decay),
            alpha_opt: Adam::new(cfg.alphas),
            metrics: Vec::new(),
            history: Vec::new(),
        }
    }
}

/// Architecture step on `val`, then weight step on `train`.
#[allow(clippy::too_many_arguments)]
pub fn bilevel_step<T: Real, M: ExitModel<T>>(
    model: &mut M,
    weight_opt: &mut Sgd<T>,
    alpha_opt: &mut Adam<T>,
    train: &crate::data::Batch<T>,
    val: &crate::data::Batch<T>,
    exit_weights: &[f64],
    weights: &SgdConfig,
    lr: f64,
    step: u64,
) -> Result<(StepStats, StepStats)> {
    let a = arch_step(model, alpha_opt, val, exit_weights, step)?;
    let w = weight_step(model, weight_opt, train, exit_weights, lr, weights.grad_clip, step)?;
    Ok((a, w))
}

pub struct SearchOutcome<T> {
    pub model: SearchModel<T>,
    pub state: SearchState<T>,
    pub genotype: Genotype,
}

/// Runs the remaining epochs of a search. `resume` continues from a saved
/// model and state; `on_epoch` sees both after every completed epoch.
pub fn run_search<T: Real>(
    data: &Dataset,
    net: &NetworkConfig,
    cfg: &SearchConfig,
    seed: u64,
    resume: Option<(SearchModel<T>, SearchState<T>)>,
    mut on_epoch: impl FnMut(&SearchModel<T>, &SearchState<T>) -> Result<()>,
) -> Result<SearchOutcome<T>> {
    cfg.validate(net)?;
    let net_cfg = cfg.network_for(net);
    let exit_weights = resolve_exit_weights("search.exit_weights", cfg.exit_weights.as_deref(), net_cfg.num_exits())?;
    let (mut model, mut state) = match resume {
        Some(pair) => pair,
        None => (SearchModel::new(&net_cfg, seed)?, SearchState::new(cfg)),
    };
    let (train_idx, val_idx) = make_splits(&data.train.labels, cfg.val_split, derive_seed(seed, Purpose::Split))?;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = stream(seed, Purpose::SearchEpoch, epoch as u64);
        let lr = cosine_lr(cfg.weights.lr, cfg.weights.lr_min, epoch, cfg.epochs);
        let mut tr = train_idx.clone();
        let mut va = val_idx.clone();
        rand::seq::SliceRandom::shuffle(tr.as_mut_slice(), &mut rng);
        rand::seq::SliceRandom::shuffle(va.as_mut_slice(), &mut rng);
        let mut meter = EpochMeter::default();
        for (tb, vb) in batches(&tr, cfg.batch_size).into_iter().zip(batches(&va, cfg.batch_size)) {
            let train = make_batch(&data.train, tb, &data.norm, Some((&cfg.augment, &mut rng)), Split::Train)?;
            let val = make_batch(&data.train, vb, &data.norm, Some((&cfg.augment, &mut rng)), Split::Val)?;
            let (_, w) = bilevel_step(
                &mut model,
                &mut state.weight_opt,
                &mut state.alpha_opt,
                &train,
                &val,
                &exit_weights,
                &cfg.weights,
                lr,
                state.step,
            )?;
            meter.add(&w);
            state.step += 1;
        }
        state.metrics.extend(meter.rows(epoch, Split::Train));
        let scores = evaluate_exits(&model, &data.train, &val_idx, &data.norm, cfg.batch_size)?;
        state.metrics.extend(score_rows(epoch, Split::Val, &scores));
        state.history.push(model.alphas.snapshot(epoch));
        state.epoch += 1;
        log::info!(
            "search epoch {}/{}: final-exit val accuracy {:.4}",
            state.epoch,
            cfg.epochs,
            scores.last().map_or(0.0, |s| s.accuracy)
        );
        on_epoch(&model, &state)?;
    }
    let genotype = derive_genotype(&model.alphas);
    Ok(SearchOutcome { model, state, genotype })
}
