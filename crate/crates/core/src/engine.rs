//! Pieces shared by search and final training: the multi-exit model
//! interface, the weighted cumulative loss, single optimization steps and
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Batch, ImageSet, Normalization, Split};
use crate::error::{arg_err, Error, Result};
use crate::nn::{ForwardCtx, ParamStore};
use crate::tensor::optim::{clip_grad_norm, Adam, Sgd};
use crate::tensor::{real, Graph, NormMode, Real, Tensor, Var};

/// A network with one or more exits, trainable weights and (possibly empty)
/// architecture parameters.
pub trait ExitModel<T: Real> {
    fn weights(&self) -> &ParamStore<T>;
    fn weights_mut(&mut self) -> &mut ParamStore<T>;
    fn arch(&self) -> &[Tensor<T>];
    fn arch_mut(&mut self) -> &mut [Tensor<T>];
    fn num_exits(&self) -> usize;
    /// Logits of every exit, shallow to deep.
    fn logits(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, arch: &[Var]) -> Result<Vec<Var>>;
}

/// Exit weights summing to one.
pub fn equal_weights(exits: usize) -> Vec<f64> {
    vec![1.0 / exits as f64; exits]
}

/// `Σ_k w_k · CE(logits_k, targets)` with CE averaged over the batch. Also
/// returns the per-exit cross-entropy nodes.
pub fn weighted_exit_loss<T: Real>(
    g: &mut Graph<T>,
    logits: &[Var],
    targets: &[usize],
    w: &[f64],
) -> Result<(Var, Vec<Var>)> {
    if logits.len() != w.len() || logits.is_empty() {
        return Err(arg_err(format!("{} exits but {} exit weights", logits.len(), w.len())));
    }
    let mut per_exit = Vec::with_capacity(logits.len());
    let mut total: Option<Var> = None;
    for (&z, &wk) in logits.iter().zip(w) {
        let ce = g.softmax_cross_entropy(z, targets)?;
        per_exit.push(ce);
        let term = g.scale(ce, real(wk))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok((total.expect("at least one exit"), per_exit))
}

pub fn cumulative_loss<T: Real>(g: &mut Graph<T>, logits: &[Var], targets: &[usize], w: &[f64]) -> Result<Var> {
    weighted_exit_loss(g, logits, targets, w).map(|(l, _)| l)
}

/// Number of rows whose arg-max (lowest index on ties) equals the label.
pub fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Loss and per-exit statistics of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub exit_losses: Vec<f64>,
    pub exit_correct: Vec<usize>,
    pub samples: usize,
}

fn check_finite(per_exit: &[f64], step: u64) -> Result<()> {
    match per_exit.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::NonFinite {
            exit_index: k,
            step,
            value: per_exit[k],
        }),
        None => Ok(()),
    }
}

fn expect_split<T>(batch: &Batch<T>, want: Split, what: &str) -> Result<()> {
    if batch.split != want {
        return Err(Error::Invariant(format!(
            "{what} must use {} data, got a {} batch",
            want.as_str(),
            batch.split.as_str()
        )));
    }
    Ok(())
}

struct Pass<T> {
    grads: Vec<Option<Tensor<T>>>,
    stats: StepStats,
    updates: Vec<crate::nn::StatUpdate<T>>,
}

/// Forward and backward with either the weights or the architecture
/// parameters as the differentiated set; the other set is recorded as constants.
fn pass<T: Real, M: ExitModel<T>>(model: &M, batch: &Batch<T>, w: &[f64], wrt_arch: bool, step: u64) -> Result<Pass<T>> {
    let mut g = Graph::new();
    let params = model.weights().bind(&mut g, !wrt_arch);
    let arch: Vec<Var> = model.arch().iter().map(|t| g.leaf(t.clone(), wrt_arch)).collect();
    let x = g.constant(batch.images.clone());
    let mut ctx = ForwardCtx::new(&mut g, &params, model.weights().stats(), NormMode::Train);
    let logits = model.logits(&mut ctx, x, &arch)?;
    let updates = std::mem::take(&mut ctx.updates);
    let (loss, per_exit) = weighted_exit_loss(&mut g, &logits, &batch.labels, w)?;
    let exit_losses: Vec<f64> = per_exit.iter().map(|&v| to_f64(g.value(v).data()[0])).collect();
    check_finite(&exit_losses, step)?;
    let total = to_f64(g.value(loss).data()[0]);
    if !total.is_finite() {
        return Err(Error::NonFinite {
            exit_index: exit_losses.len() - 1,
            step,
            value: total,
        });
    }
    let exit_correct = logits.iter().map(|&z| count_correct(g.value(z), &batch.labels)).collect();
    let mut grads_all = g.backward(loss)?;
    let targets = if wrt_arch { &arch } else { &params };
    let grads = targets.iter().map(|&v| grads_all.take(v)).collect();
    Ok(Pass {
        grads,
        stats: StepStats {
            loss: total,
            exit_losses,
            exit_correct,
            samples: batch.labels.len(),
        },
        updates,
    })
}

/// One SGD step on the weights from a training batch; architecture
/// parameters are held fixed. Running norm statistics are updated.
pub fn weight_step<T: Real, M: ExitModel<T>>(
    model: &mut M,
    opt: &mut Sgd<T>,
    batch: &Batch<T>,
    w: &[f64],
    lr: f64,
    grad_clip: Option<f64>,
    step: u64,
) -> Result<StepStats> {
    expect_split(batch, Split::Train, "weight updates")?;
    let Pass {
        mut grads,
        stats,
        updates,
    } = pass(model, batch, w, false, step)?;
    if let Some(max) = grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    opt.step(model.weights_mut().tensors_mut(), &grads, lr)?;
    model.weights_mut().apply_stat_updates(updates);
    Ok(stats)
}

/// One Adam step on the architecture parameters from a validation batch,
/// treating the weights as constants (first-order). Batch statistics seen
/// here are discarded.
pub fn arch_step<T: Real, M: ExitModel<T>>(
    model: &mut M,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
    w: &[f64],
    step: u64,
) -> Result<StepStats> {
    expect_split(batch, Split::Val, "architecture updates")?;
    let Pass { grads, stats, .. } = pass(model, batch, w, true, step)?;
    opt.step(model.arch_mut(), &grads)?;
    Ok(stats)
}

/// Mean loss and accuracy of one exit over a set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitScore {
    pub loss: f64,
    pub accuracy: f64,
}

/// Inference-mode evaluation of every exit, without augmentation.
pub fn evaluate_exits<T: Real, M: ExitModel<T>>(
    model: &M,
    set: &ImageSet,
    indices: &[usize],
    norm: &Normalization,
    batch_size: usize,
) -> Result<Vec<ExitScore>> {
    if indices.is_empty() {
        return Err(arg_err("cannot evaluate on an empty set"));
    }
    let exits = model.num_exits();
    let mut loss_sum = vec![0.0; exits];
    let mut correct = vec![0usize; exits];
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch: Batch<T> = make_batch(set, chunk, norm, None, Split::Test)?;
        let mut g = Graph::new();
        let params = model.weights().bind(&mut g, false);
        let arch: Vec<Var> = model.arch().iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(batch.images.clone());
        let mut ctx = ForwardCtx::new(&mut g, &params, model.weights().stats(), NormMode::Eval);
        let logits = model.logits(&mut ctx, x, &arch)?;
        for (k, &z) in logits.iter().enumerate() {
            let ce = g.softmax_cross_entropy(z, &batch.labels)?;
            loss_sum[k] += to_f64(g.value(ce).data()[0]) * chunk.len() as f64;
            correct[k] += count_correct(g.value(z), &batch.labels);
        }
    }
    let n = indices.len() as f64;
    Ok(loss_sum
        .iter()
        .zip(&correct)
        .map(|(&l, &c)| ExitScore {
            loss: l / n,
            accuracy: c as f64 / n,
        })
        .collect())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub exit_index: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl MetricRow {
    pub const HEADER: &'static str = "epoch,exit_index,split,loss,accuracy";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6}",
            self.epoch,
            self.exit_index,
            self.split.as_str(),
            self.loss,
            self.accuracy
        )
    }
}

/// Accumulates step statistics into per-exit epoch averages.
#[derive(Clone, Debug, Default)]
pub struct EpochMeter {
    loss: Vec<f64>,
    correct: Vec<usize>,
    samples: usize,
}

impl EpochMeter {
    pub fn add(&mut self, s: &StepStats) {
        if self.loss.is_empty() {
            self.loss = vec![0.0; s.exit_losses.len()];
            self.correct = vec![0; s.exit_losses.len()];
        }
        for (k, l) in s.exit_losses.iter().enumerate() {
            self.loss[k] += l * s.samples as f64;
            self.correct[k] += s.exit_correct[k];
        }
        self.samples += s.samples;
    }

    pub fn rows(&self, epoch: usize, split: Split) -> Vec<MetricRow> {
        let n = self.samples.max(1) as f64;
        self.loss
            .iter()
            .zip(&self.correct)
            .enumerate()
            .map(|(k, (&l, &c))| MetricRow {
                epoch,
                exit_index: k,
                split,
                loss: l / n,
                accuracy: c as f64 / n,
            })
            .collect()
    }
}

pub fn score_rows(epoch: usize, split: Split, scores: &[ExitScore]) -> Vec<MetricRow> {
    scores
        .iter()
        .enumerate()
        .map(|(k, s)| MetricRow {
            epoch,
            exit_index: k,
            split,
            loss: s.loss,
            accuracy: s.accuracy,
        })
        .collect()
}

/// Splits shuffled indices into batches, folding a trailing single sample
/// into the previous batch so every batch has at least two samples.
pub fn batches(indices: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let bs = batch_size.max(2);
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < indices.len() {
        let end = (start + bs).min(indices.len());
        if indices.len() - end == 1 {
            out.push(&indices[start..]);
            break;
        }
        out.push(&indices[start..end]);
        start = end;
    }
    out
}
