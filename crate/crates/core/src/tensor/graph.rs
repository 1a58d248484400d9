//! The gradient tape.
//!
//! Every primitive appends a node holding its value and enough saved state to
//! compute a vector-Jacobian product. Nodes only reference earlier nodes, so
//! walking the node list backwards is a reverse topological order.

use super::kernels::{self, ConvGeom, PoolGeom, PoolKind};
use super::{real, Real, RunningStats, Tensor};
use crate::error::{arg_err, shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a normalization layer uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        geom: PoolGeom,
        aux: Vec<usize>,
    },
    Norm {
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
        slots: Vec<usize>,
    },
    Softmax(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Shape-level description of one recorded primitive, used for cost
/// accounting and inspection.
#[derive(Clone, Debug, PartialEq)]
pub enum OpRecord {
    Leaf { shape: Vec<usize>, requires_grad: bool },
    Conv2d { input: Vec<usize>, weight: Vec<usize>, output: Vec<usize>, geom: ConvGeom },
    Pool { kind: PoolKind, geom: PoolGeom, input: Vec<usize>, output: Vec<usize> },
    Norm { input: Vec<usize>, train: bool },
    Dense { input: Vec<usize>, weight: Vec<usize> },
    SoftmaxCe { logits: Vec<usize> },
    Relu { shape: Vec<usize> },
    Add { shape: Vec<usize> },
    Mul { shape: Vec<usize> },
    Scale { shape: Vec<usize> },
    Sum { input: Vec<usize> },
    WeightedSum { terms: usize, shape: Vec<usize> },
    Softmax { len: usize },
    Concat { output: Vec<usize> },
    GlobalAvgPool { input: Vec<usize> },
    Crop { input: Vec<usize>, output: Vec<usize> },
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Reverse-mode tape. One graph records one forward pass and can be
/// differentiated exactly once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_owned(&self, vars: &[Var]) -> Result<()> {
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(Error::State(format!("{v:?} does not belong to this graph"))),
            None => Ok(()),
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        self.check_owned(&[input, weight])?;
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (out, shape) = kernels::conv2d_forward(x.data(), x.shape(), w.data(), w.shape(), geom)?;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, geom }, &[input, weight]))
    }

    pub fn pool2d(&mut self, input: Var, kind: PoolKind, geom: PoolGeom) -> Result<Var> {
        self.check_owned(&[input])?;
        let x = &self.nodes[input.0].value;
        let (out, shape, aux) = kernels::pool2d_forward(x.data(), x.shape(), kind, geom)?;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Pool { input, kind, geom, aux }, &[input]))
    }

    /// Per-channel normalization over every axis except axis 1.
    ///
    /// In train mode the batch statistics are used and returned as
    /// `(mean, unbiased variance)` so the caller can fold them into its
    /// running statistics. Missing `gamma`/`beta` act as frozen 1 and 0.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: NormMode,
        running: &RunningStats<T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        self.check_owned(&[input])?;
        let x = &self.nodes[input.0].value;
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err(format!("normalization needs a channel axis, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = n * inner;
        if count == 0 {
            return Err(arg_err("normalization over an empty batch"));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                self.check_owned(&[p])?;
                if self.nodes[p.0].value.shape() != [c] {
                    return Err(shape_err(format!(
                        "{name} has shape {:?}, expected [{c}]",
                        self.nodes[p.0].value.shape()
                    )));
                }
            }
        }
        if running.mean.len() != c {
            return Err(shape_err(format!(
                "running statistics track {} channels, input has {c}",
                running.mean.len()
            )));
        }
        let xd = x.data();
        let eps: T = real(NORM_EPS);
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let cnt = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        s = s + xd[base..base + inner].iter().copied().sum::<T>();
                    }
                    let m = s / cnt;
                    let mut q = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for &v in &xd[base..base + inner] {
                            q = q + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / cnt;
                }
                (mean, var)
            }
            NormMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gdat = gamma.map(|g| self.nodes[g.0].value.data().to_vec());
        let bdat = beta.map(|b| self.nodes[b.0].value.data().to_vec());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                let g = gdat.as_ref().map_or(T::one(), |g| g[ch]);
                let bt = bdat.as_ref().map_or(T::zero(), |b| b[ch]);
                for i in base..base + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * g + bt;
                }
            }
        }
        let batch_stats = (mode == NormMode::Train).then(|| {
            let unbiased = if count > 1 {
                let f: T = real(count as f64 / (count - 1) as f64);
                var.iter().map(|&v| v * f).collect()
            } else {
                var.clone()
            };
            (mean, unbiased)
        });
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![input];
        inputs.extend(gamma);
        inputs.extend(beta);
        let var = self.push(
            value,
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == NormMode::Train,
            },
            &inputs,
        );
        Ok((var, batch_stats))
    }

    /// Normalization that folds batch statistics into `running` in train mode.
    pub fn affine_norm(
        &mut self,
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: NormMode,
        running: &mut RunningStats<T>,
    ) -> Result<Var> {
        let (out, stats) = self.batch_norm(input, gamma, beta, mode, running)?;
        if let Some((mean, var)) = stats {
            running.update(&mean, &var);
        }
        Ok(out)
    }

    /// `input [N,F] · weight [F,C] + bias [C]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check_owned(&[input, weight])?;
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (n, f) = match x.shape() {
            &[n, f] => (n, f),
            s => return Err(arg_err(format!("dense input must be [N, F], got {s:?}"))),
        };
        let c = match w.shape() {
            &[wf, c] if wf == f => c,
            s => return Err(arg_err(format!("dense weight {s:?} does not accept {f} features"))),
        };
        if let Some(b) = bias {
            self.check_owned(&[b])?;
            if self.nodes[b.0].value.shape() != [c] {
                return Err(arg_err(format!(
                    "dense bias {:?} does not match {c} outputs",
                    self.nodes[b.0].value.shape()
                )));
            }
        }
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &mut out[r * c..(r + 1) * c];
            if let Some(b) = bias {
                row.copy_from_slice(self.nodes[b.0].value.data());
            }
            for k in 0..f {
                let xv = xd[r * f + k];
                for (o, &wv) in row.iter_mut().zip(&wd[k * c..(k + 1) * c]) {
                    *o = *o + xv * wv;
                }
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Dense { input, weight, bias }, &inputs))
    }

    /// Batch mean of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_owned(&[logits])?;
        let z = &self.nodes[logits.0].value;
        let (n, c) = match z.shape() {
            &[n, c] => (n, c),
            s => return Err(shape_err(format!("logits must be [N, C], got {s:?}"))),
        };
        if targets.len() != n {
            return Err(arg_err(format!("{} targets for a batch of {n}", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(arg_err(format!("target class {t} outside [0, {c})")));
        }
        let zd = z.data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &zd[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - m).exp();
                s = s + *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / s;
            }
            loss = loss + (s.ln() + m - row[targets[r]]);
        }
        let loss = loss / T::from_usize(n).unwrap();
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check_owned(&[input])?;
        let value = self.nodes[input.0].value.map(|v| v.max(T::zero()));
        Ok(self.push(value, Op::Relu(input), &[input]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check_owned(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!("{what} of mismatched shapes {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.check_owned(&[input])?;
        let value = self.nodes[input.0].value.map(|v| v * factor);
        Ok(self.push(value, Op::Scale(input, factor), &[input]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check_owned(&[input])?;
        let value = Tensor::scalar(self.nodes[input.0].value.sum());
        Ok(self.push(value, Op::Sum(input), &[input]))
    }

    /// `Σ_i weights[slots[i]] · inputs[i]` for a rank-1 `weights`.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var, slots: &[usize]) -> Result<Var> {
        self.check_owned(inputs)?;
        self.check_owned(&[weights])?;
        if inputs.is_empty() || inputs.len() != slots.len() {
            return Err(arg_err("weighted_sum needs one slot per input and at least one input"));
        }
        let wlen = self.nodes[weights.0].value.len();
        if let Some(&s) = slots.iter().find(|&&s| s >= wlen) {
            return Err(arg_err(format!("slot {s} outside weight vector of length {wlen}")));
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &v in &inputs[1..] {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::Invariant(format!(
                    "weighted_sum inputs drift in shape: {:?} vs {shape:?}",
                    self.shape(v)
                )));
            }
        }
        let w = self.nodes[weights.0].value.data();
        let mut out = vec![T::zero(); shape.iter().product()];
        for (&v, &s) in inputs.iter().zip(slots) {
            let k = w[s];
            for (o, &x) in out.iter_mut().zip(self.nodes[v.0].value.data()) {
                *o = *o + k * x;
            }
        }
        let value = Tensor::new(shape, out)?;
        let mut deps = inputs.to_vec();
        deps.push(weights);
        Ok(self.push(
            value,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
                slots: slots.to_vec(),
            },
            &deps,
        ))
    }

    /// Softmax of a rank-1 tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.check_owned(&[input])?;
        let x = &self.nodes[input.0].value;
        if x.shape().len() != 1 {
            return Err(shape_err(format!("softmax expects a vector, got {:?}", x.shape())));
        }
        let value = Tensor::new(x.shape().to_vec(), softmax_slice(x.data()))?;
        Ok(self.push(value, Op::Softmax(input), &[input]))
    }

    /// Concatenation of NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.check_owned(inputs)?;
        let first = match inputs.first() {
            Some(&v) => self.nodes[v.0].value.nchw()?,
            None => return Err(arg_err("concat of zero tensors")),
        };
        let [n, _, h, w] = first;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vn, vc, vh, vw] = self.nodes[v.0].value.nchw()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(format!(
                    "concat of {:?} with [{n}, _, {h}, {w}]",
                    self.shape(v)
                )));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                let d = self.nodes[v.0].value.data();
                out.extend_from_slice(&d[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), inputs))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check_owned(&[input])?;
        let [n, c, h, w] = self.nodes[input.0].value.nchw()?;
        let plane = h * w;
        let inv: T = real(1.0 / plane as f64);
        let d = self.nodes[input.0].value.data();
        let out = (0..n * c)
            .map(|p| d[p * plane..(p + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    /// Spatial window `[top, top+height) x [left, left+width)` of an NCHW tensor.
    pub fn crop(&mut self, input: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        self.check_owned(&[input])?;
        let [n, c, h, w] = self.nodes[input.0].value.nchw()?;
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(shape_err(format!(
                "crop {height}x{width} at ({top}, {left}) outside {h}x{w}"
            )));
        }
        let d = self.nodes[input.0].value.data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for plane in 0..n * c {
            for y in top..top + height {
                let row = plane * h * w + y * w;
                out.extend_from_slice(&d[row + left..row + left + width]);
            }
        }
        let value = Tensor::new(vec![n, c, height, width], out)?;
        Ok(self.push(value, Op::Crop { input, top, left }, &[input]))
    }

    /// Shape-level trace of every recorded primitive, in execution order.
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .map(|node| {
                let out = node.value.shape().to_vec();
                let sh = |v: &Var| self.nodes[v.0].value.shape().to_vec();
                match &node.op {
                    Op::Leaf => OpRecord::Leaf {
                        shape: out,
                        requires_grad: node.requires_grad,
                    },
                    Op::Conv2d { input, weight, geom } => OpRecord::Conv2d {
                        input: sh(input),
                        weight: sh(weight),
                        output: out,
                        geom: *geom,
                    },
                    Op::Pool { input, kind, geom, .. } => OpRecord::Pool {
                        kind: *kind,
                        geom: *geom,
                        input: sh(input),
                        output: out,
                    },
                    Op::Norm { input, train, .. } => OpRecord::Norm {
                        input: sh(input),
                        train: *train,
                    },
                    Op::Dense { input, weight, .. } => OpRecord::Dense {
                        input: sh(input),
                        weight: sh(weight),
                    },
                    Op::SoftmaxCe { logits, .. } => OpRecord::SoftmaxCe { logits: sh(logits) },
                    Op::Relu(_) => OpRecord::Relu { shape: out },
                    Op::Add(..) => OpRecord::Add { shape: out },
                    Op::Mul(..) => OpRecord::Mul { shape: out },
                    Op::Scale(..) => OpRecord::Scale { shape: out },
                    Op::Sum(v) => OpRecord::Sum { input: sh(v) },
                    Op::WeightedSum { inputs, .. } => OpRecord::WeightedSum {
                        terms: inputs.len(),
                        shape: out,
                    },
                    Op::Softmax(_) => OpRecord::Softmax { len: node.value.len() },
                    Op::Concat(_) => OpRecord::Concat { output: out },
                    Op::GlobalAvgPool(v) => OpRecord::GlobalAvgPool { input: sh(v) },
                    Op::Crop { input, .. } => OpRecord::Crop {
                        input: sh(input),
                        output: out,
                    },
                }
            })
            .collect()
    }

    /// Reverse sweep from a scalar loss. Gradients of leaves used more than
    /// once are summed. A graph can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        self.check_owned(&[loss])?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape().to_vec(), g)).transpose(),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Vec<T>| accumulate(grads, v, delta);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (gi, gw) = kernels::conv2d_backward(
                    x.data(),
                    x.shape(),
                    w.data(),
                    w.shape(),
                    *geom,
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                )?;
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gw) = gw {
                    acc(*weight, gw);
                }
            }
            Op::Pool { input, kind, geom, aux } => {
                let gi = kernels::pool2d_backward(self.shape(*input), *kind, *geom, aux, g)?;
                acc(*input, gi);
            }
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*input);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gam = gamma.map(|v| self.nodes[v.0].value.data());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for j in base..base + inner {
                            dgamma[ch] = dgamma[ch] + g[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + g[j];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut gi = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * inner).unwrap();
                    for ch in 0..c {
                        let scale = gam.map_or(T::one(), |gm| gm[ch]) * inv_std[ch];
                        // dxhat = g * gamma; sums of dxhat and dxhat*xhat are
                        // gamma-scaled dbeta and dgamma.
                        let (sum_d, sum_dx) = (dbeta[ch], dgamma[ch]);
                        for b in 0..n {
                            let base = (b * c + ch) * inner;
                            for j in base..base + inner {
                                gi[j] = if *train {
                                    scale * (g[j] - (sum_d + xhat[j] * sum_dx) / m)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    acc(*input, gi);
                }
                if let Some(gm) = gamma {
                    if self.wants(*gm) {
                        acc(*gm, dgamma);
                    }
                }
                if let Some(bt) = beta {
                    if self.wants(*bt) {
                        acc(*bt, dbeta);
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let c = w.shape()[1];
                if self.wants(*input) {
                    let mut gi = vec![T::zero(); n * f];
                    for r in 0..n {
                        for k in 0..f {
                            let wrow = &w.data()[k * c..(k + 1) * c];
                            gi[r * f + k] = wrow.iter().zip(&g[r * c..(r + 1) * c]).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    acc(*input, gi);
                }
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); f * c];
                    for r in 0..n {
                        for k in 0..f {
                            let xv = x.data()[r * f + k];
                            for (o, &gv) in gw[k * c..(k + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                                *o = *o + xv * gv;
                            }
                        }
                    }
                    acc(*weight, gw);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); c];
                        for r in 0..n {
                            for (o, &gv) in gb.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                                *o = *o + gv;
                            }
                        }
                        acc(*b, gb);
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / T::from_usize(n).unwrap();
                let mut gi: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gi[r * c + t] = gi[r * c + t] - scale;
                }
                acc(*logits, gi);
            }
            Op::Relu(input) => {
                let x = self.nodes[input.0].value.data();
                let gi = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*input, gi);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.wants(*a) {
                    acc(*a, y.iter().zip(g).map(|(&q, &gv)| q * gv).collect());
                }
                if self.wants(*b) {
                    acc(*b, x.iter().zip(g).map(|(&p, &gv)| p * gv).collect());
                }
            }
            Op::Scale(input, k) => acc(*input, g.iter().map(|&v| v * *k).collect()),
            Op::Sum(input) => acc(*input, vec![g[0]; self.nodes[input.0].value.len()]),
            Op::WeightedSum { inputs, weights, slots } => {
                let w = self.nodes[weights.0].value.data();
                let mut gw = vec![T::zero(); w.len()];
                for (&v, &s) in inputs.iter().zip(slots) {
                    if self.wants(*weights) {
                        let x = self.nodes[v.0].value.data();
                        gw[s] = gw[s] + x.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    if self.wants(v) {
                        acc(v, g.iter().map(|&gv| gv * w[s]).collect());
                    }
                }
                if self.wants(*weights) {
                    acc(*weights, gw);
                }
            }
            Op::Softmax(input) => {
                let p = node.value.data();
                let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
                acc(*input, p.iter().zip(g).map(|(&pv, &gv)| pv * (gv - dot)).collect());
            }
            Op::Concat(inputs) => {
                let [n, total, h, w] = node.value.nchw()?;
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let mut gi = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            gi.extend_from_slice(&g[start..start + c * plane]);
                        }
                        acc(v, gi);
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(input) => {
                let [_, _, h, w] = self.nodes[input.0].value.nchw()?;
                let plane = h * w;
                let inv: T = real(1.0 / plane as f64);
                let gi = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                acc(*input, gi);
            }
            Op::Crop { input, top, left } => {
                let [n, c, h, w] = self.nodes[input.0].value.nchw()?;
                let [_, _, oh, ow] = node.value.nchw()?;
                let mut gi = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..oh {
                        let dst = plane * h * w + (y + top) * w + left;
                        let src = (plane * oh + y) * ow;
                        gi[dst..dst + ow].copy_from_slice(&g[src..src + ow]);
                    }
                }
                acc(*input, gi);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Max-shifted softmax of a slice.
pub fn softmax_slice<T: Real>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
