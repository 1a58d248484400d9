//! Final training of a discrete network, anytime evaluation and
//! budget-constrained prediction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, AugmentPolicy, Dataset, ImageSet, Normalization, Split};
use crate::engine::{
    argmax, batches, count_correct, evaluate_exits, score_rows, weight_step, EpochMeter, ExitModel, MetricRow,
};
use crate::error::{arg_err, Error, Result};
use crate::flops::{count_flops, ExitCost};
use crate::net::{Network, NetworkConfig};
use crate::nn::{Builder, ForwardCtx, ParamStore};
use crate::rng::{stream, Purpose};
use crate::search::{cfg_err, resolve_exit_weights};
use crate::search_space::Genotype;
use crate::tensor::optim::{cosine_lr, Sgd, SgdConfig};
use crate::tensor::{Graph, NormMode, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: SgdConfig,
    pub augment: AugmentPolicy,
    pub exit_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 96,
            batch_size: 64,
            weights: SgdConfig::default(),
            augment: AugmentPolicy {
                cutout: 16,
                ..AugmentPolicy::default()
            },
            exit_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if self.batch_size < 2 {
            return Err(cfg_err("train.batch_size", "must be at least 2"));
        }
        if self.weights.lr < 0.0 {
            return Err(cfg_err("train.weights.lr", "must be non-negative"));
        }
        resolve_exit_weights("train.exit_weights", self.exit_weights.as_deref(), net.num_exits())?;
        Ok(())
    }
}

/// A discrete network with its weights and the input normalization it was
/// trained with.
#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub net: Network,
    pub params: ParamStore<T>,
    pub norm: Normalization,
}

impl<T: Real> TrainedModel<T> {
    pub fn new(config: &NetworkConfig, genotype: &Genotype, norm: Normalization, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = stream(seed, Purpose::Init, 0);
        let net = Network::discrete(config, genotype, &mut Builder::new(&mut params, &mut rng))?;
        Ok(TrainedModel { net, params, norm })
    }

    pub fn genotype(&self) -> &Genotype {
        self.net.genotype().expect("trained models are discrete")
    }

    pub fn costs(&self) -> Result<Vec<ExitCost>> {
        count_flops(&self.net, &self.params)
    }

    /// A separate model containing only what exit `exit` needs, with
    /// parameters copied by name.
    pub fn truncate(&self, exit: usize) -> Result<TrainedModel<T>> {
        let cfg = self.net.config();
        let layer = *cfg
            .classifier_layers
            .get(exit)
            .ok_or_else(|| arg_err(format!("exit {exit} does not exist")))?;
        let short = NetworkConfig {
            layers: layer,
            classifier_layers: cfg.classifier_layers[..=exit].to_vec(),
            reduction_layers: cfg.reduction_layers.iter().copied().filter(|&r| r <= layer).collect(),
            ..cfg.clone()
        };
        let mut model = TrainedModel::new(&short, self.genotype(), self.norm.clone(), 0)?;
        model.params.copy_from(&self.params)?;
        Ok(model)
    }
}

impl<T: Real> ExitModel<T> for TrainedModel<T> {
    fn weights(&self) -> &ParamStore<T> {
        &self.params
    }

    fn weights_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn arch(&self) -> &[Tensor<T>] {
        &[]
    }

    fn arch_mut(&mut self) -> &mut [Tensor<T>] {
        &mut []
    }

    fn num_exits(&self) -> usize {
        self.net.num_exits()
    }

    fn logits(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, _arch: &[Var]) -> Result<Vec<Var>> {
        Ok(self.net.forward(ctx, x, None)?.logits)
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub opt: Sgd<T>,
    pub metrics: Vec<MetricRow>,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            opt: Sgd::new(cfg.weights.momentum, cfg.weights.weight_decay),
            metrics: Vec::new(),
        }
    }
}

/// Trains every weight of the discrete network on the full training set with
/// the cumulative exit loss, logging per-exit train and test scores each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_final<T: Real>(
    genotype: &Genotype,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    seed: u64,
    resume: Option<(TrainedModel<T>, TrainState<T>)>,
    mut on_epoch: impl FnMut(&TrainedModel<T>, &TrainState<T>) -> Result<()>,
) -> Result<(TrainedModel<T>, TrainState<T>)> {
    cfg.validate(net)?;
    let exit_weights = resolve_exit_weights("train.exit_weights", cfg.exit_weights.as_deref(), net.num_exits())?;
    let (mut model, mut state) = match resume {
        Some(pair) => pair,
        None => (
            TrainedModel::new(net, genotype, data.norm.clone(), seed)?,
            TrainState::new(cfg),
        ),
    };
    let all: Vec<usize> = (0..data.train.len()).collect();
    let test: Vec<usize> = (0..data.test.len()).collect();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = stream(seed, Purpose::TrainEpoch, epoch as u64);
        let lr = cosine_lr(cfg.weights.lr, cfg.weights.lr_min, epoch, cfg.epochs);
        let mut order = all.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut meter = EpochMeter::default();
        for chunk in batches(&order, cfg.batch_size) {
            let batch = make_batch(&data.train, chunk, &model.norm, Some((&cfg.augment, &mut rng)), Split::Train)?;
            let s = weight_step(&mut model, &mut state.opt, &batch, &exit_weights, lr, cfg.weights.grad_clip, state.step)?;
            meter.add(&s);
            state.step += 1;
        }
        state.metrics.extend(meter.rows(epoch, Split::Train));
        if !test.is_empty() {
            let scores = evaluate_exits(&model, &data.test, &test, &model.norm, cfg.batch_size)?;
            state.metrics.extend(score_rows(epoch, Split::Test, &scores));
            log::info!(
                "train epoch {}/{}: final-exit test accuracy {:.4}",
                epoch + 1,
                cfg.epochs,
                scores.last().map_or(0.0, |s| s.accuracy)
            );
        }
        state.epoch += 1;
        on_epoch(&model, &state)?;
    }
    Ok((model, state))
}

/// One point of the accuracy/cost trade-off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub exit_index: usize,
    pub mflops: f64,
    pub params: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnytimeCurve {
    pub points: Vec<CurvePoint>,
}

impl AnytimeCurve {
    pub const HEADER: &'static str = "exit_index,mflops,params,accuracy";

    /// Cost strictly increasing, parameters non-decreasing, accuracies in [0, 1].
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[1].mflops <= w[0].mflops {
                return Err(Error::Invariant(format!("MFLOPS not strictly increasing at exit {}", w[1].exit_index)));
            }
            if w[1].params < w[0].params {
                return Err(Error::Invariant(format!("parameter count decreases at exit {}", w[1].exit_index)));
            }
        }
        if let Some(p) = self.points.iter().find(|p| !(0.0..=1.0).contains(&p.accuracy)) {
            return Err(Error::Invariant(format!("accuracy {} at exit {} outside [0, 1]", p.accuracy, p.exit_index)));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for p in &self.points {
            let _ = writeln!(s, "{},{:.6},{},{:.6}", p.exit_index, p.mflops, p.params, p.accuracy);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Validation(format!("curve file must start with `{}`", Self::HEADER)));
        }
        let bad = |line: &str| Error::Validation(format!("malformed curve line `{line}`"));
        let points = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(line));
                }
                Ok(CurvePoint {
                    exit_index: f[0].parse().map_err(|_| bad(line))?,
                    mflops: f[1].parse().map_err(|_| bad(line))?,
                    params: f[2].parse().map_err(|_| bad(line))?,
                    accuracy: f[3].parse().map_err(|_| bad(line))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnytimeCurve { points })
    }
}

/// Accuracy of every exit from a single forward pass per batch, paired with
/// the cumulative cost of reaching that exit.
pub fn evaluate_anytime<T: Real>(model: &TrainedModel<T>, set: &ImageSet, batch_size: usize) -> Result<AnytimeCurve> {
    if set.is_empty() {
        return Err(arg_err("cannot evaluate on an empty dataset"));
    }
    let costs = model.costs()?;
    let mut correct = vec![0usize; costs.len()];
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch::<T>(set, chunk, &model.norm, None, Split::Test)?;
        let mut g = Graph::new();
        let params = model.params.bind(&mut g, false);
        let x = g.constant(batch.images);
        let mut ctx = ForwardCtx::new(&mut g, &params, model.params.stats(), NormMode::Eval);
        let out = model.net.forward(&mut ctx, x, None)?;
        for (k, &z) in out.logits.iter().enumerate() {
            correct[k] += count_correct(g.value(z), &batch.labels);
        }
    }
    let points = costs
        .iter()
        .zip(&correct)
        .map(|(c, &n)| CurvePoint {
            exit_index: c.exit_index,
            mflops: c.mflops,
            params: c.params,
            accuracy: n as f64 / set.len() as f64,
        })
        .collect();
    Ok(AnytimeCurve { points })
}

/// A per-sample compute budget in MFLOPS (millions of multiply-accumulates).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub mflops: f64,
}

impl Budget {
    pub fn new(mflops: f64) -> Result<Self> {
        if mflops.is_nan() || mflops < 0.0 {
            return Err(arg_err(format!("budget must be a non-negative number, got {mflops}")));
        }
        Ok(Budget { mflops })
    }
}

/// The deepest exit whose cumulative cost fits the budget, or the first exit
/// flagged as over budget when none does.
pub fn select_exit(costs: &[ExitCost], budget: Budget) -> (usize, bool) {
    match costs.iter().rposition(|c| c.mflops <= budget.mflops) {
        Some(e) => (e, false),
        None => (0, true),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetedPrediction {
    pub predictions: Vec<usize>,
    pub exit_used: usize,
    pub over_budget: bool,
}

/// Classifies a batch `[N, C, H, W]` of already-normalized images, computing
/// nothing beyond the selected exit.
pub fn budgeted_predict<T: Real>(
    model: &TrainedModel<T>,
    costs: &[ExitCost],
    x: &Tensor<T>,
    budget: Budget,
) -> Result<BudgetedPrediction> {
    let (exit, over) = select_exit(costs, budget);
    let mut g = Graph::new();
    let params = model.params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let mut ctx = ForwardCtx::new(&mut g, &params, model.params.stats(), NormMode::Eval);
    let out = model.net.forward_until(&mut ctx, xv, None, exit)?;
    let logits = g.value(out.logits[exit]);
    let classes = logits.shape()[1];
    Ok(BudgetedPrediction {
        predictions: logits.data().chunks(classes).map(argmax).collect(),
        exit_used: exit,
        over_budget: over,
    })
}

/// Accuracy of budgeted prediction over a whole set for each budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget_mflops: f64,
    pub exit_index: usize,
    pub over_budget: bool,
    pub accuracy: f64,
}

impl BudgetRow {
    pub const HEADER: &'static str = "budget_mflops,exit_index,over_budget,accuracy";

    pub fn to_csv(&self) -> String {
        format!(
            "{:.6},{},{},{:.6}",
            self.budget_mflops, self.exit_index, self.over_budget, self.accuracy
        )
    }
}

pub fn budget_table<T: Real>(
    model: &TrainedModel<T>,
    set: &ImageSet,
    budgets: &[Budget],
    batch_size: usize,
) -> Result<Vec<BudgetRow>> {
    if set.is_empty() {
        return Err(arg_err("cannot evaluate on an empty dataset"));
    }
    let costs = model.costs()?;
    let indices: Vec<usize> = (0..set.len()).collect();
    budgets
        .iter()
        .map(|&b| {
            let mut correct = 0;
            let mut used = (0, false);
            for chunk in indices.chunks(batch_size.max(1)) {
                let batch = make_batch::<T>(set, chunk, &model.norm, None, Split::Test)?;
                let p = budgeted_predict(model, &costs, &batch.images, b)?;
                used = (p.exit_used, p.over_budget);
                correct += p.predictions.iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
            }
            Ok(BudgetRow {
                budget_mflops: b.mflops,
                exit_index: used.0,
                over_budget: used.1,
                accuracy: correct as f64 / set.len() as f64,
            })
        })
        .collect()
}
