//! Parameter storage and the small set of layers everything else is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::flops;
use crate::tensor::{ConvGeom, Graph, NormMode, PoolGeom, PoolKind, Real, RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// Named trainable tensors plus the running statistics of every norm layer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    stats_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            stats_names: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_stats(&mut self, name: String, channels: usize) -> StatsId {
        self.stats_names.push(name);
        self.stats.push(RunningStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn stats_names(&self) -> &[String] {
        &self.stats_names
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn count_of(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.tensors[id.0].len()).sum()
    }

    /// Records every parameter on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Folds batch statistics gathered during a train-mode forward pass.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            self.stats[u.id.0].update(&u.mean, &u.var);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            stats_names: self.stats_names.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
                    var: s.var.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
                })
                .collect(),
        }
    }

    /// Replaces values by name. Every stored name must be present with a
    /// matching shape.
    pub fn load_named(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name).ok_or_else(|| Error::State(format!("missing parameter `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(shape_err(format!(
                    "parameter `{name}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

impl<T: Real> ParamStore<T> {
    /// Copies every parameter and running statistic of `self` from the
    /// entries of `other` with the same name.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &Tensor<T>> =
            other.names.iter().map(String::as_str).zip(&other.tensors).collect();
        self.load_named(|n| by_name.get(n).map(|t| (*t).clone()))?;
        let stats: std::collections::HashMap<&str, &RunningStats<T>> =
            other.stats_names.iter().map(String::as_str).zip(&other.stats).collect();
        for (name, slot) in self.stats_names.iter().zip(self.stats.iter_mut()) {
            let s = stats
                .get(name.as_str())
                .ok_or_else(|| Error::State(format!("missing running statistics `{name}`")))?;
            if s.mean.len() != slot.mean.len() {
                return Err(shape_err(format!("running statistics `{name}` have the wrong width")));
            }
            *slot = (*s).clone();
        }
        Ok(())
    }
}

/// Batch statistics recorded by a train-mode norm layer.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub id: StatsId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Everything a layer needs while recording its forward pass.
pub struct ForwardCtx<'a, T> {
    pub g: &'a mut Graph<T>,
    pub params: &'a [Var],
    pub stats: &'a [RunningStats<T>],
    pub mode: NormMode,
    pub updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn new(
        g: &'a mut Graph<T>,
        params: &'a [Var],
        stats: &'a [RunningStats<T>],
        mode: NormMode,
    ) -> Self {
        ForwardCtx {
            g,
            params,
            stats,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

/// Allocates and initializes parameters in a deterministic order.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    scope: Vec<String>,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            scope: Vec::new(),
        }
    }

    pub fn push(&mut self, part: impl Into<String>) {
        self.scope.push(part.into());
    }

    pub fn pop(&mut self) {
        self.scope.pop();
    }

    fn qualified(&self, leaf: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// Convolution with He-uniform weights, `bound = sqrt(6 / fan_in)`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, geom: ConvGeom) -> ConvUnit {
        let fan_in = (cin / geom.groups) * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::uniform(&[cout, cin / geom.groups, kernel, kernel], bound, self.rng);
        let weight = self.store.add(self.qualified(name), w);
        ConvUnit {
            weight,
            cin,
            cout,
            kernel,
            geom,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize, affine: bool) -> NormUnit {
        let (gamma, beta) = if affine {
            let g = self.store.add(self.qualified(&format!("{name}.gamma")), Tensor::ones(&[channels]));
            let b = self.store.add(self.qualified(&format!("{name}.beta")), Tensor::zeros(&[channels]));
            (Some(g), Some(b))
        } else {
            (None, None)
        };
        let stats = self.store.add_stats(self.qualified(name), channels);
        NormUnit {
            gamma,
            beta,
            stats,
            channels,
        }
    }

    /// Dense layer with weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn dense(&mut self, name: &str, features: usize, classes: usize) -> DenseUnit {
        let bound = 1.0 / (features as f64).sqrt();
        let w = Tensor::uniform(&[features, classes], bound, self.rng);
        let b = Tensor::from_fn(&[classes], |_| T::from_f64_lossy(self.rng.gen_range(-bound..bound)));
        let weight = self.store.add(self.qualified(&format!("{name}.weight")), w);
        let bias = self.store.add(self.qualified(&format!("{name}.bias")), b);
        DenseUnit {
            weight,
            bias,
            features,
            classes,
        }
    }
}

/// Channels, height and width of one sample's feature map.
pub type Chw = [usize; 3];

#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
}

impl ConvUnit {
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.g.conv2d(x, w, self.geom)
    }

    pub fn cost(&self, [c, h, w]: Chw) -> Result<(u64, Chw)> {
        if c != self.cin {
            return Err(shape_err(format!("conv expects {} channels, got {c}", self.cin)));
        }
        let g = self.geom;
        let oh = crate::tensor::out_extent(h, self.kernel, g.stride, g.padding, g.dilation)?;
        let ow = crate::tensor::out_extent(w, self.kernel, g.stride, g.padding, g.dilation)?;
        let macs = flops::conv_macs(self.kernel, self.cin, self.cout, oh, ow, g.groups);
        Ok((macs, [self.cout, oh, ow]))
    }
}

#[derive(Clone, Debug)]
pub struct NormUnit {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub stats: StatsId,
    pub channels: usize,
}

impl NormUnit {
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let gamma = self.gamma.map(|p| ctx.param(p));
        let beta = self.beta.map(|p| ctx.param(p));
        let running = &ctx.stats[self.stats.0];
        let (y, batch) = ctx.g.batch_norm(x, gamma, beta, ctx.mode, running)?;
        if let Some((mean, var)) = batch {
            ctx.updates.push(StatUpdate {
                id: self.stats,
                mean,
                var,
            });
        }
        Ok(y)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        self.gamma.into_iter().chain(self.beta)
    }
}

#[derive(Clone, Debug)]
pub struct DenseUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub features: usize,
    pub classes: usize,
}

impl DenseUnit {
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.g.dense(x, w, Some(b))
    }
}

/// One stage of a sequential block.
#[derive(Clone, Debug)]
pub enum Step {
    Relu,
    Conv(ConvUnit),
    Norm(NormUnit),
    Pool(PoolKind, PoolGeom),
}

/// A straight chain of steps.
#[derive(Clone, Debug, Default)]
pub struct Seq {
    pub steps: Vec<Step>,
}

impl Seq {
    pub fn new(steps: Vec<Step>) -> Self {
        Seq { steps }
    }

    /// The ReLU → conv → norm block used for every projection.
    pub fn relu_conv_norm<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        affine: bool,
    ) -> Seq {
        b.push(name);
        let conv = b.conv("conv", cin, cout, kernel, geom);
        let norm = b.norm("norm", cout, affine);
        b.pop();
        Seq::new(vec![Step::Relu, Step::Conv(conv), Step::Norm(norm)])
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, mut x: Var) -> Result<Var> {
        for step in &self.steps {
            x = match step {
                Step::Relu => ctx.g.relu(x)?,
                Step::Conv(c) => c.forward(ctx, x)?,
                Step::Norm(n) => n.forward(ctx, x)?,
                Step::Pool(kind, geom) => ctx.g.pool2d(x, *kind, *geom)?,
            };
        }
        Ok(x)
    }

    /// Closed-form multiply-accumulate count for one sample.
    pub fn cost(&self, mut shape: Chw) -> Result<(u64, Chw)> {
        let mut total = 0u64;
        for step in &self.steps {
            let (m, s) = match step {
                Step::Relu => (flops::elementwise(shape), shape),
                Step::Conv(c) => c.cost(shape)?,
                Step::Norm(_) => (flops::elementwise(shape), shape),
                Step::Pool(_, geom) => flops::pool(shape, *geom)?,
            };
            total += m;
            shape = s;
        }
        Ok((total, shape))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for step in &self.steps {
            match step {
                Step::Conv(c) => out.push(c.weight),
                Step::Norm(n) => out.extend(n.params()),
                _ => {}
            }
        }
        out
    }
}
