//! Oracles and fixtures shared by the integration tests. Everything here is
//! written independently of the library code it checks.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalenas::engine::{cumulative_loss, equal_weights};
use scalenas::data::CifarVariant;
use scalenas::flops::{count_flops, ExitCost};
use scalenas::net::{Network, NetworkConfig};
use scalenas::nn::{Builder, ForwardCtx, ParamStore};
use scalenas::search::SearchModel;
use scalenas::search_space::{BoundAlphas, CandidateOp, Gene, Genotype, MixedOp, NodeGenes};
use scalenas::tensor::{ConvGeom, Graph, NormMode, OpRecord, PoolGeom, PoolKind, RunningStats, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Relative error with a small absolute floor so that gradients which are
/// zero up to rounding compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

/// Max relative error between backprop and central differences over every
/// element of every input.
pub fn grad_check(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).data()[0]
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += eps;
            let up = eval(&probe);
            probe[i].data_mut()[j] -= 2.0 * eps;
            let down = eval(&probe);
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * eps)));
        }
    }
    worst
}

/// Reduces any tensor to a scalar through a fixed random projection.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let r = randn(g.shape(y), &mut rng(seed));
    let c = g.constant(r);
    let m = g.mul(y, c).unwrap();
    g.sum(m).unwrap()
}

/// One case per differentiable primitive: name, inputs, scalar loss.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, LossFn)> {
    let mut r = rng(11);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, LossFn)> = Vec::new();
    let conv = |name, cin, cout, k, geom: ConvGeom, r: &mut ChaCha8Rng| {
        let x = randn(&[2, cin, 5, 5], r);
        let w = randn(&[cout, cin / geom.groups, k, k], r);
        let f: LossFn = Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], geom).unwrap();
            project(g, y, 1)
        });
        (name, vec![x, w], f)
    };
    cases.push(conv("conv2d", 3, 4, 3, ConvGeom::new(1, 1, 1, 1), &mut r));
    cases.push(conv("conv2d strided", 2, 3, 3, ConvGeom::new(2, 1, 1, 1), &mut r));
    cases.push(conv("conv2d dilated", 2, 2, 3, ConvGeom::new(1, 2, 2, 1), &mut r));
    cases.push(conv("conv2d depthwise", 4, 4, 3, ConvGeom::new(1, 1, 1, 4), &mut r));
    cases.push(conv("conv2d pointwise", 3, 2, 1, ConvGeom::new(1, 0, 1, 1), &mut r));
    for (name, kind, stride) in [
        ("max pool", PoolKind::Max, 1),
        ("max pool strided", PoolKind::Max, 2),
        ("avg pool", PoolKind::Avg, 1),
        ("avg pool strided", PoolKind::Avg, 2),
    ] {
        let geom = PoolGeom {
            kernel: 3,
            stride,
            padding: 1,
        };
        let f: LossFn = Box::new(move |g, v| {
            let y = g.pool2d(v[0], kind, geom).unwrap();
            project(g, y, 2)
        });
        cases.push((name, vec![randn(&[2, 2, 4, 4], &mut r)], f));
    }
    let bn: LossFn = Box::new(|g, v| {
        let stats = RunningStats::new(3);
        let (y, _) = g.batch_norm(v[0], Some(v[1]), Some(v[2]), NormMode::Train, &stats).unwrap();
        project(g, y, 3)
    });
    cases.push(("batch norm", vec![randn(&[2, 3, 3, 3], &mut r), randn(&[3], &mut r), randn(&[3], &mut r)], bn));
    let bn_eval: LossFn = Box::new(|g, v| {
        let stats = RunningStats {
            mean: vec![0.1, -0.2],
            var: vec![0.5, 2.0],
        };
        let (y, _) = g.batch_norm(v[0], Some(v[1]), None, NormMode::Eval, &stats).unwrap();
        project(g, y, 4)
    });
    cases.push(("batch norm eval", vec![randn(&[2, 2, 2, 2], &mut r), randn(&[2], &mut r)], bn_eval));
    let dense: LossFn = Box::new(|g, v| {
        let y = g.dense(v[0], v[1], Some(v[2])).unwrap();
        project(g, y, 5)
    });
    cases.push(("dense", vec![randn(&[3, 4], &mut r), randn(&[4, 2], &mut r), randn(&[2], &mut r)], dense));
    let ce: LossFn = Box::new(|g, v| g.softmax_cross_entropy(v[0], &[2, 0, 1]).unwrap());
    cases.push(("softmax cross-entropy", vec![randn(&[3, 4], &mut r)], ce));
    let relu: LossFn = Box::new(|g, v| {
        let y = g.relu(v[0]).unwrap();
        project(g, y, 6)
    });
    cases.push(("relu", vec![randn(&[2, 7], &mut r)], relu));
    let add: LossFn = Box::new(|g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 7)
    });
    cases.push(("add", vec![randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)], add));
    let mul: LossFn = Box::new(|g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 8)
    });
    cases.push(("mul", vec![randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)], mul));
    let scale: LossFn = Box::new(|g, v| {
        let y = g.scale(v[0], -1.7).unwrap();
        project(g, y, 9)
    });
    cases.push(("scale", vec![randn(&[5], &mut r)], scale));
    let sum: LossFn = Box::new(|g, v| {
        let sq = g.mul(v[0], v[0]).unwrap();
        g.sum(sq).unwrap()
    });
    cases.push(("sum", vec![randn(&[2, 2], &mut r)], sum));
    let wsum: LossFn = Box::new(|g, v| {
        let y = g.weighted_sum(&[v[0], v[1], v[2]], v[3], &[0, 2, 3]).unwrap();
        project(g, y, 10)
    });
    cases.push((
        "weighted sum",
        vec![
            randn(&[1, 2, 2, 2], &mut r),
            randn(&[1, 2, 2, 2], &mut r),
            randn(&[1, 2, 2, 2], &mut r),
            randn(&[4], &mut r),
        ],
        wsum,
    ));
    let softmax: LossFn = Box::new(|g, v| {
        let y = g.softmax(v[0]).unwrap();
        project(g, y, 11)
    });
    cases.push(("softmax", vec![randn(&[8], &mut r)], softmax));
    let concat: LossFn = Box::new(|g, v| {
        let y = g.concat_channels(&[v[0], v[1]]).unwrap();
        project(g, y, 12)
    });
    cases.push(("concat", vec![randn(&[2, 1, 2, 3], &mut r), randn(&[2, 2, 2, 3], &mut r)], concat));
    let gap: LossFn = Box::new(|g, v| {
        let y = g.global_avg_pool(v[0]).unwrap();
        project(g, y, 13)
    });
    cases.push(("global average pool", vec![randn(&[2, 3, 3, 2], &mut r)], gap));
    let crop: LossFn = Box::new(|g, v| {
        let y = g.crop(v[0], 1, 1, 3, 2).unwrap();
        project(g, y, 14)
    });
    cases.push(("crop", vec![randn(&[2, 2, 4, 4], &mut r)], crop));
    cases
}

/// Max relative error of cumulative-loss gradients over every weight and
/// every alpha of a relaxed network.
pub fn network_grad_error(cfg: &NetworkConfig, seed: u64) -> (f64, usize) {
    let mut model = SearchModel::<f64>::new(cfg, seed).unwrap();
    let mut r = rng(seed + 100);
    for a in model.alphas.tensors_mut() {
        *a = randn(a.shape(), &mut r);
    }
    let n = 2;
    let x = randn(&[n, cfg.in_channels, cfg.input_size, cfg.input_size], &mut r);
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    let w = equal_weights(cfg.num_exits());

    let weights = model.params.tensors().to_vec();
    let alphas = model.alphas.tensors().to_vec();
    let count = weights.len();
    let mut inputs = weights;
    inputs.extend(alphas);
    let checked: usize = inputs.iter().map(Tensor::len).sum();
    let err = grad_check(&inputs, &|g, v| {
        let (params, arch) = v.split_at(count);
        let mut ctx = ForwardCtx::new(g, params, model.params.stats(), NormMode::Train);
        let e = arch.len() / 2;
        let bound = BoundAlphas {
            normal: arch[..e].to_vec(),
            reduction: arch[e..].to_vec(),
        };
        let xv = ctx.g.constant(x.clone());
        let out = model.net.forward(&mut ctx, xv, Some(&bound)).unwrap();
        cumulative_loss(g, &out.logits, &labels, &w).unwrap()
    });
    (err, checked)
}

/// Brute-force multiply-accumulate count of a recorded inference pass, one
/// unit per innermost loop iteration. Assumes a batch of one.
pub fn loop_nest_macs(records: &[OpRecord]) -> u64 {
    let mut total = 0u64;
    for rec in records {
        match rec {
            OpRecord::Leaf { .. } | OpRecord::Concat { .. } | OpRecord::Crop { .. } => {}
            OpRecord::Conv2d { weight, output, .. } => {
                assert_eq!(output[0], 1);
                let (cout, cin_per_group, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
                for _o in 0..cout {
                    for _y in 0..output[2] {
                        for _x in 0..output[3] {
                            for _c in 0..cin_per_group {
                                for _i in 0..kh {
                                    for _j in 0..kw {
                                        total += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            OpRecord::Pool { geom, output, .. } => {
                let out: usize = output.iter().product();
                for _ in 0..out {
                    for _ in 0..geom.kernel * geom.kernel {
                        total += 1;
                    }
                }
            }
            OpRecord::Norm { input, .. } => total += input.iter().product::<usize>() as u64,
            OpRecord::Relu { shape } | OpRecord::Add { shape } => total += shape.iter().product::<usize>() as u64,
            OpRecord::GlobalAvgPool { input } => total += input.iter().product::<usize>() as u64,
            OpRecord::Dense { weight, .. } => {
                for _ in 0..weight[0] {
                    for _ in 0..weight[1] {
                        total += 1;
                    }
                }
            }
            other => panic!("unexpected primitive in discrete inference: {other:?}"),
        }
    }
    total
}

pub fn random_genotype(nodes: usize, r: &mut ChaCha8Rng) -> Genotype {
    let ops = &CandidateOp::ALL[..CandidateOp::COUNT - 1];
    let mut cell = || -> Vec<NodeGenes> {
        (0..nodes)
            .map(|j| {
                let mut sources: Vec<usize> = (0..j + 2).collect();
                sources.shuffle(r);
                let (a, b) = (sources[0].min(sources[1]), sources[0].max(sources[1]));
                [
                    Gene {
                        source: a,
                        op: *ops.choose(r).unwrap(),
                    },
                    Gene {
                        source: b,
                        op: *ops.choose(r).unwrap(),
                    },
                ]
            })
            .collect()
    };
    let normal = cell();
    let reduction = cell();
    Genotype::new(normal, reduction).unwrap()
}

/// A random increasing subset of `2..=layers` with at most `max` members.
pub fn random_layers(layers: usize, max: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (2..=layers).collect();
    all.shuffle(r);
    let k = r.gen_range(0..=max.min(all.len()));
    let mut pick = all[..k].to_vec();
    pick.sort_unstable();
    pick
}

/// A small valid configuration with random depth, scales and placements.
pub fn random_config(r: &mut ChaCha8Rng, layers: usize, scales: usize) -> NetworkConfig {
    let reduction_layers = random_layers(layers, 2, r);
    let mut classifier_layers = random_layers(layers - 1, layers, r);
    classifier_layers.push(layers);
    let levels = scales - 1 + reduction_layers.len();
    let input_size = (1 << levels) * [2, 4][r.gen_range(0..2)];
    NetworkConfig {
        layers,
        scales,
        init_channels: [2, 4][r.gen_range(0..2)],
        nodes: r.gen_range(1..=2),
        classifier_layers,
        reduction_layers,
        num_classes: r.gen_range(2..=4),
        in_channels: 3,
        input_size,
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Exhaustive search over every pair of distinct inputs and every pair of
/// non-zero ops: the chosen pair has the largest (stronger, weaker) edge
/// weights in lexicographic order; the first one enumerated wins ties.
pub fn derive_oracle(weights: &[Vec<f64>], nodes: usize) -> Vec<NodeGenes> {
    let zero = CandidateOp::COUNT - 1;
    let mut offset = 0;
    let mut out = Vec::new();
    for j in 0..nodes {
        let inputs = j + 2;
        let mut best: Option<((f64, f64), NodeGenes)> = None;
        for a in 0..inputs {
            for b in a + 1..inputs {
                for oa in 0..CandidateOp::COUNT {
                    for ob in 0..CandidateOp::COUNT {
                        if oa == zero || ob == zero {
                            continue;
                        }
                        let (wa, wb) = (weights[offset + a][oa], weights[offset + b][ob]);
                        let key = (wa.max(wb), wa.min(wb));
                        let better = match &best {
                            None => true,
                            Some((k, _)) => key.0 > k.0 || (key.0 == k.0 && key.1 > k.1),
                        };
                        if better {
                            let genes = [
                                Gene {
                                    source: a,
                                    op: CandidateOp::ALL[oa],
                                },
                                Gene {
                                    source: b,
                                    op: CandidateOp::ALL[ob],
                                },
                            ];
                            best = Some((key, genes));
                        }
                    }
                }
            }
        }
        out.push(best.unwrap().1);
        offset += inputs;
    }
    out
}

pub struct MixedCase {
    pub op: MixedOp,
    pub store: ParamStore<f64>,
    pub x: Tensor<f64>,
}

pub fn mixed_case(seed: u64, channels: usize, side: usize, stride: usize, batch: usize) -> MixedCase {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let op = MixedOp::build(&mut Builder::new(&mut store, &mut r), channels, stride);
    let x = randn(&[batch, channels, side, side], &mut r);
    MixedCase { op, store, x }
}

/// Mixed-op output for the given edge alphas.
pub fn mixed_output(c: &MixedCase, alpha: &[f64]) -> Tensor<f64> {
    let mut g = Graph::new();
    let params = c.store.bind(&mut g, false);
    let mut ctx = ForwardCtx::new(&mut g, &params, c.store.stats(), NormMode::Train);
    let x = ctx.g.constant(c.x.clone());
    let a = ctx.g.constant(Tensor::new(vec![alpha.len()], alpha.to_vec()).unwrap());
    let y = c.op.forward(&mut ctx, x, a).unwrap();
    g.value(y).clone()
}

/// Output of candidate `k` alone.
pub fn single_output(c: &MixedCase, k: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let params = c.store.bind(&mut g, false);
    let mut ctx = ForwardCtx::new(&mut g, &params, c.store.stats(), NormMode::Train);
    let x = ctx.g.constant(c.x.clone());
    let y = c.op.ops[k].forward(&mut ctx, x).unwrap();
    g.value(y).clone()
}

fn reductions_through(cfg: &NetworkConfig, layer: usize) -> usize {
    cfg.reduction_layers.iter().filter(|&&r| r <= layer).count()
}

/// Expected `[C, H, W]` of scale `s` after `layer` (1 is the stem).
pub fn pyramid_analytic(cfg: &NetworkConfig, layer: usize, s: usize) -> [usize; 3] {
    let r = reductions_through(cfg, layer);
    let side = cfg.input_size / (1 << (s + r));
    let c = if layer == 1 {
        cfg.init_channels * (1 << s)
    } else {
        cfg.nodes * cfg.init_channels * (1 << (s + r))
    };
    [c, side, side]
}

fn run_grid(net: &Network, store: &ParamStore<f32>, alphas: Option<&[Tensor<f32>]>, x: &Tensor<f32>, last: Option<usize>) -> (Vec<Vec<Vec<usize>>>, Vec<Tensor<f32>>) {
    let mut g = Graph::new();
    let params = store.bind(&mut g, false);
    let bound = alphas.map(|a| {
        let vars: Vec<_> = a.iter().map(|t| g.constant(t.clone())).collect();
        let e = vars.len() / 2;
        BoundAlphas {
            normal: vars[..e].to_vec(),
            reduction: vars[e..].to_vec(),
        }
    });
    let mut ctx = ForwardCtx::new(&mut g, &params, store.stats(), NormMode::Eval);
    let xv = ctx.g.constant(x.clone());
    let out = match last {
        Some(k) => net.forward_until(&mut ctx, xv, bound.as_ref(), k),
        None => net.forward(&mut ctx, xv, bound.as_ref()),
    }
    .unwrap();
    let shapes = out.grid.iter().map(|l| l.iter().map(|&v| g.shape(v).to_vec()).collect()).collect();
    let logits = out.logits.iter().map(|&v| g.value(v).clone()).collect();
    (shapes, logits)
}

/// Asserts every grid extent against the analytic pyramid and that each
/// early-exit prefix pass reproduces the full pass bitwise.
pub fn check_pyramid(net: &Network, store: &ParamStore<f32>, alphas: Option<&[Tensor<f32>]>, seed: u64) {
    let cfg = net.config().clone();
    let batch = 2;
    let x = randn(&[batch, cfg.in_channels, cfg.input_size, cfg.input_size], &mut rng(seed)).cast::<f32>();
    let (grid, full) = run_grid(net, store, alphas, &x, None);
    assert_eq!(grid.len(), cfg.layers);
    for (l, scales) in grid.iter().enumerate() {
        assert_eq!(scales.len(), cfg.scales);
        for (s, shape) in scales.iter().enumerate() {
            let [c, h, w] = pyramid_analytic(&cfg, l + 1, s);
            assert_eq!(shape, &vec![batch, c, h, w], "layer {} scale {s} of {cfg:?}", l + 1);
        }
    }
    assert_eq!(full.len(), cfg.classifier_layers.len());
    for k in 0..full.len() {
        let (_, prefix) = run_grid(net, store, alphas, &x, Some(k));
        assert_eq!(prefix.len(), k + 1);
        for (a, b) in prefix.iter().zip(&full) {
            let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            assert!(same, "exit {k} differs from the full pass");
        }
    }
}

/// Loop-nest MACs of running the network to each exit.
pub fn flops_oracle(net: &Network, store: &ParamStore<f32>) -> Vec<u64> {
    let cfg = net.config();
    let x = randn(&[1, cfg.in_channels, cfg.input_size, cfg.input_size], &mut rng(0)).cast::<f32>();
    (0..cfg.classifier_layers.len())
        .map(|k| {
            let mut g = Graph::new();
            let params = store.bind(&mut g, false);
            let mut ctx = ForwardCtx::new(&mut g, &params, store.stats(), NormMode::Eval);
            let xv = ctx.g.constant(x.clone());
            net.forward_until(&mut ctx, xv, None, k).unwrap();
            loop_nest_macs(&g.records())
        })
        .collect()
}

pub fn build_discrete(cfg: &NetworkConfig, genotype: &Genotype) -> (Network, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let net = Network::discrete(cfg, genotype, &mut Builder::new(&mut store, &mut rng(1))).unwrap();
    (net, store)
}

/// Asserts closed-form counting equals the loop nest and returns the costs.
pub fn assert_flops_equivalent(cfg: &NetworkConfig, genotype: &Genotype) -> Vec<ExitCost> {
    let (net, store) = build_discrete(cfg, genotype);
    let costs = count_flops(&net, &store).unwrap();
    let brute = flops_oracle(&net, &store);
    assert_eq!(costs.iter().map(|c| c.macs).collect::<Vec<_>>(), brute, "{cfg:?} {genotype:?}");
    assert!(costs.windows(2).all(|w| w[1].mflops > w[0].mflops));
    assert!(costs.windows(2).all(|w| w[1].params >= w[0].params));
    assert_eq!(costs.last().unwrap().params, store.count());
    costs
}

/// Raw records with random labels and pixels, laid out by hand.
pub fn synthetic_records(variant: CifarVariant, n: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for _ in 0..n {
        match variant {
            CifarVariant::Cifar10 => out.push(r.gen_range(0..10)),
            CifarVariant::Cifar100 => {
                out.push(r.gen_range(0..20));
                out.push(r.gen_range(0..100));
            }
        }
        out.extend((0..3072).map(|_| r.gen::<u8>()));
    }
    out
}
