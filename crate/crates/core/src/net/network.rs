use super::config::NetworkConfig;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::flops;
use crate::nn::{Builder, Chw, DenseUnit, ForwardCtx, ParamId, Seq, Step};
use crate::search_space::{BoundAlphas, CellKind, CellSpec, DiscreteCell, Genotype, RelaxedCell};
use crate::tensor::{ConvGeom, Real, Var};

/// Relaxed networks carry a mixed op on every cell edge; discrete ones follow a genotype.
#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Relaxed,
    Discrete(Genotype),
}

#[derive(Clone, Debug)]
enum Cell {
    Relaxed(RelaxedCell),
    Discrete(DiscreteCell),
}

#[derive(Clone, Debug)]
struct ScaleBlock {
    horizontal: Seq,
    diagonal: Option<Seq>,
    fusion: Option<Seq>,
    cell: Cell,
}

#[derive(Clone, Debug)]
struct Layer {
    kind: CellKind,
    scales: Vec<ScaleBlock>,
}

#[derive(Clone, Debug)]
struct Head {
    layer: usize,
    body: Seq,
    dense: DenseUnit,
}

/// Logits per exit (shallow to deep) and the feature grid `[layer-1][scale]`
/// of every layer that was computed.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub logits: Vec<Var>,
    pub grid: Vec<Vec<Var>>,
}

/// Per-sample multiply-accumulates of each network component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentCosts {
    pub stem: u64,
    /// Indexed by layer - 2.
    pub layers: Vec<u64>,
    pub heads: Vec<u64>,
}

/// A multi-scale cell network. Holds structure and parameter handles only;
/// values live in a [`crate::nn::ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    arch: Arch,
    stem: Vec<Seq>,
    layers: Vec<Layer>,
    heads: Vec<Head>,
}

impl Network {
    pub fn relaxed<T: Real>(config: &NetworkConfig, b: &mut Builder<'_, T>) -> Result<Self> {
        Self::build(config, Arch::Relaxed, b)
    }

    pub fn discrete<T: Real>(config: &NetworkConfig, genotype: &Genotype, b: &mut Builder<'_, T>) -> Result<Self> {
        genotype.validate()?;
        if genotype.nodes() != config.nodes {
            return Err(Error::Validation(format!(
                "genotype has {} nodes per cell, network expects {}",
                genotype.nodes(),
                config.nodes
            )));
        }
        Self::build(config, Arch::Discrete(genotype.clone()), b)
    }

    fn build<T: Real>(config: &NetworkConfig, arch: Arch, b: &mut Builder<'_, T>) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let affine = !matches!(arch, Arch::Relaxed);
        let c = cfg.init_channels;

        let mut stem = Vec::with_capacity(cfg.scales);
        b.push("stem");
        for s in 0..cfg.scales {
            b.push(format!("s{s}"));
            let seq = if s == 0 {
                let conv = b.conv("conv", cfg.in_channels, c, 3, ConvGeom::plain(1, 1));
                let norm = b.norm("norm", c, affine);
                Seq::new(vec![Step::Conv(conv), Step::Norm(norm)])
            } else {
                Seq::relu_conv_norm(b, "vertical", c << (s - 1), c << s, 3, ConvGeom::plain(2, 1), affine)
            };
            b.pop();
            stem.push(seq);
        }
        b.pop();

        let shapes = cfg.grid_shapes();
        let mut layers = Vec::new();
        let mut heads = Vec::new();
        for layer in 2..=cfg.layers {
            let kind = if cfg.is_reduction(layer) {
                CellKind::Reduction
            } else {
                CellKind::Normal
            };
            let prev = &shapes[layer - 2];
            b.push(format!("layer{layer}"));
            let mut scales = Vec::with_capacity(cfg.scales);
            for s in 0..cfg.scales {
                let w = cfg.cell_width(layer, s);
                b.push(format!("s{s}"));
                let horizontal = Seq::relu_conv_norm(b, "horizontal", prev[s][0], w, 1, ConvGeom::plain(1, 0), affine);
                let (diagonal, fusion) = if s > 0 {
                    let d = Seq::relu_conv_norm(b, "diagonal", prev[s - 1][0], w, 3, ConvGeom::plain(2, 1), affine);
                    let f = Seq::relu_conv_norm(b, "fusion", 2 * w, w, 1, ConvGeom::plain(1, 0), affine);
                    (Some(d), Some(f))
                } else {
                    (None, None)
                };
                b.push("cell");
                let cell = match &arch {
                    Arch::Relaxed => Cell::Relaxed(RelaxedCell::build(b, CellSpec::new(cfg.nodes), kind, w)),
                    Arch::Discrete(g) => Cell::Discrete(DiscreteCell::build(b, g.genes(kind), kind, w)),
                };
                b.pop();
                b.pop();
                scales.push(ScaleBlock {
                    horizontal,
                    diagonal,
                    fusion,
                    cell,
                });
            }
            b.pop();
            layers.push(Layer { kind, scales });

            if cfg.classifier_layers.contains(&layer) {
                let [ch, side, _] = shapes[layer - 1][cfg.scales - 1];
                b.push(format!("head{}", heads.len()));
                let mut steps = Vec::new();
                let blocks: &[usize] = if side >= 4 { &[2, 2] } else { &[1] };
                for (i, &stride) in blocks.iter().enumerate() {
                    steps.push(Step::Conv(b.conv(&format!("conv{i}"), ch, ch, 3, ConvGeom::plain(stride, 1))));
                    steps.push(Step::Norm(b.norm(&format!("norm{i}"), ch, affine)));
                    steps.push(Step::Relu);
                }
                let dense = b.dense("classifier", ch, cfg.num_classes);
                b.pop();
                heads.push(Head {
                    layer,
                    body: Seq::new(steps),
                    dense,
                });
            }
        }

        Ok(Network {
            config: cfg.clone(),
            arch,
            stem,
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn is_relaxed(&self) -> bool {
        matches!(self.arch, Arch::Relaxed)
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        match &self.arch {
            Arch::Discrete(g) => Some(g),
            Arch::Relaxed => None,
        }
    }

    pub fn num_exits(&self) -> usize {
        self.heads.len()
    }

    pub fn exit_layers(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.layer).collect()
    }

    /// Whether any diagonal or vertical projection exists (false for S = 1).
    pub fn has_cross_scale_paths(&self) -> bool {
        self.stem.len() > 1 || self.layers.iter().any(|l| l.scales.iter().any(|b| b.diagonal.is_some()))
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, alphas: Option<&BoundAlphas>) -> Result<NetOutput> {
        self.forward_until(ctx, x, alphas, self.heads.len() - 1)
    }

    /// Runs only as far as exit `last_exit` (0-based), computing the logits of
    /// every exit up to and including it.
    pub fn forward_until<T: Real>(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        x: Var,
        alphas: Option<&BoundAlphas>,
        last_exit: usize,
    ) -> Result<NetOutput> {
        let cfg = &self.config;
        let Some(stop) = self.heads.get(last_exit).map(|h| h.layer) else {
            return Err(arg_err(format!("exit {last_exit} does not exist; the network has {}", self.heads.len())));
        };
        if self.is_relaxed() && alphas.is_none() {
            return Err(arg_err("a relaxed network needs architecture weights"));
        }
        let shape = ctx.g.shape(x).to_vec();
        let expected = [cfg.in_channels, cfg.input_size, cfg.input_size];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(shape_err(format!("network expects [N, {}, {}, {}] input, got {shape:?}", expected[0], expected[1], expected[2])));
        }

        let mut current = Vec::with_capacity(cfg.scales);
        let mut h = x;
        for seq in &self.stem {
            h = seq.forward(ctx, h)?;
            current.push(h);
        }
        let mut grid = vec![current.clone()];
        let mut logits = Vec::new();
        let mut heads = self.heads.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            let index = i + 2;
            if index > stop {
                break;
            }
            let prev = current;
            current = Vec::with_capacity(cfg.scales);
            for (s, block) in layer.scales.iter().enumerate() {
                let horiz = block.horizontal.forward(ctx, prev[s])?;
                let input = match (&block.diagonal, &block.fusion) {
                    (Some(d), Some(f)) => {
                        let diag = d.forward(ctx, prev[s - 1])?;
                        let cat = ctx.g.concat_channels(&[diag, horiz])?;
                        f.forward(ctx, cat)?
                    }
                    _ => horiz,
                };
                let out = match &block.cell {
                    Cell::Relaxed(c) => {
                        let a = alphas.expect("checked above").of(layer.kind);
                        c.forward(ctx, input, input, a)?
                    }
                    Cell::Discrete(c) => c.forward(ctx, input, input)?,
                };
                current.push(out);
            }
            self.check_pyramid(ctx, index, &current)?;
            grid.push(current.clone());
            while let Some(head) = heads.next_if(|h| h.layer == index) {
                let coarse = current[cfg.scales - 1];
                let z = head.body.forward(ctx, coarse)?;
                let pooled = ctx.g.global_avg_pool(z)?;
                logits.push(head.dense.forward(ctx, pooled)?);
            }
        }
        Ok(NetOutput { logits, grid })
    }

    fn check_pyramid<T: Real>(&self, ctx: &ForwardCtx<'_, T>, layer: usize, maps: &[Var]) -> Result<()> {
        for s in 1..maps.len() {
            let (fine, coarse) = (ctx.g.shape(maps[s - 1]), ctx.g.shape(maps[s]));
            if fine[2] != 2 * coarse[2] || fine[3] != 2 * coarse[3] {
                return Err(Error::Invariant(format!(
                    "layer {layer}: scale {s} is {}x{} but scale {} is {}x{}",
                    coarse[2],
                    coarse[3],
                    s - 1,
                    fine[2],
                    fine[3]
                )));
            }
        }
        Ok(())
    }

    /// A discrete network that reuses this relaxed network's parameters for
    /// the operations the genotype keeps.
    pub fn discretize(&self, genotype: &Genotype) -> Result<Network> {
        genotype.validate()?;
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let scales = layer
                    .scales
                    .iter()
                    .map(|block| {
                        let Cell::Relaxed(rc) = &block.cell else {
                            return Err(arg_err("only relaxed networks can be discretized"));
                        };
                        Ok(ScaleBlock {
                            cell: Cell::Discrete(rc.discretize(genotype.genes(layer.kind))?),
                            ..block.clone()
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Layer {
                    kind: layer.kind,
                    scales,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            config: self.config.clone(),
            arch: Arch::Discrete(genotype.clone()),
            stem: self.stem.clone(),
            layers,
            heads: self.heads.clone(),
        })
    }

    pub fn stem_params(&self) -> Vec<ParamId> {
        self.stem.iter().flat_map(Seq::params).collect()
    }

    /// Parameters of cells and projections of `layer` (2..=L).
    pub fn layer_params(&self, layer: usize) -> Vec<ParamId> {
        let mut out = Vec::new();
        for block in &self.layers[layer - 2].scales {
            out.extend(block.horizontal.params());
            for seq in block.diagonal.iter().chain(&block.fusion) {
                out.extend(seq.params());
            }
            match &block.cell {
                Cell::Relaxed(c) => out.extend(c.params()),
                Cell::Discrete(c) => out.extend(c.params()),
            }
        }
        out
    }

    pub fn head_params(&self, exit: usize) -> Vec<ParamId> {
        let h = &self.heads[exit];
        let mut out = h.body.params();
        out.extend([h.dense.weight, h.dense.bias]);
        out
    }

    /// Every parameter reachable from the forward pass.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.stem_params();
        for layer in 2..=self.config.layers {
            out.extend(self.layer_params(layer));
        }
        for e in 0..self.heads.len() {
            out.extend(self.head_params(e));
        }
        out
    }

    /// Closed-form per-sample cost of the stem, each layer and each head.
    /// Only defined for discrete networks.
    pub fn component_costs(&self) -> Result<ComponentCosts> {
        if self.is_relaxed() {
            return Err(arg_err("FLOPs are only defined for discrete networks"));
        }
        let cfg = &self.config;
        let mut shape: Chw = [cfg.in_channels, cfg.input_size, cfg.input_size];
        let mut stem = 0;
        let mut current = Vec::new();
        for seq in &self.stem {
            let (m, s) = seq.cost(shape)?;
            stem += m;
            shape = s;
            current.push(s);
        }
        let mut layers = Vec::new();
        let mut heads = Vec::new();
        let mut head_iter = self.heads.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = current;
            current = Vec::new();
            let mut total = 0;
            for (s, block) in layer.scales.iter().enumerate() {
                let (mh, sh) = block.horizontal.cost(prev[s])?;
                total += mh;
                let input = match (&block.diagonal, &block.fusion) {
                    (Some(d), Some(f)) => {
                        let (md, sd) = d.cost(prev[s - 1])?;
                        let (mf, sf) = f.cost([sd[0] + sh[0], sh[1], sh[2]])?;
                        total += md + mf;
                        sf
                    }
                    _ => sh,
                };
                let Cell::Discrete(cell) = &block.cell else { unreachable!("checked relaxed above") };
                let (mc, out) = cell.cost(input)?;
                total += mc;
                current.push(out);
            }
            layers.push(total);
            while let Some(head) = head_iter.next_if(|h| h.layer == i + 2) {
                let coarse = current[cfg.scales - 1];
                let (mb, sb) = head.body.cost(coarse)?;
                let gap = flops::elementwise(sb);
                heads.push(mb + gap + flops::dense_macs(head.dense.features, head.dense.classes));
            }
        }
        Ok(ComponentCosts { stem, layers, heads })
    }
}
