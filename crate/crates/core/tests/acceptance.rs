//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit status if any fails.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use scalenas::config::{ConfigSources, RunConfig};
use scalenas::data::{decode_records, encode_records, load_cifar, make_splits, CifarOptions, CifarVariant};
use scalenas::checkpoint::Checkpoint;
use scalenas::net::{Network, NetworkConfig};
use scalenas::nn::{Builder, ParamStore};
use scalenas::run::{cmd_eval, cmd_search, cmd_train, ALPHAS_FILE, CHECKPOINT_FILE, CURVE_FILE, GENOTYPE_FILE, METRICS_FILE};
use scalenas::search::{run_search, SearchModel};
use scalenas::search_space::{derive_genotype, AlphaTable, CandidateOp, CellKind, CellSpec};
use scalenas::train::{budgeted_predict, evaluate_anytime, select_exit, train_final, Budget, TrainConfig};
use scalenas::Error;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn preset(name: &str, overrides: &[&str]) -> RunConfig {
    RunConfig::resolve(&ConfigSources {
        preset: Some(name.into()),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    })
    .unwrap()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (name, inputs, f) in primitive_cases() {
        let err = grad_check(&inputs, &*f);
        ensure!(err < 1e-3, "{name}: relative error {err:e}");
        worst = worst.max(err);
    }
    let cfg = NetworkConfig {
        layers: 2,
        scales: 2,
        init_channels: 2,
        nodes: 1,
        classifier_layers: vec![2],
        reduction_layers: vec![2],
        num_classes: 3,
        in_channels: 2,
        input_size: 8,
    };
    let (err, n) = network_grad_error(&cfg, 4);
    ensure!(err < 1e-3, "network: relative error {err:e} over {n} values");
    worst = worst.max(err);
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!("max rel err {worst:.2e}, {n} network values, {:.1}s", took.as_secs_f64()))
}

fn mixed_op_suite() -> Outcome {
    let mut r = rng(101);
    let instances = 150;
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let seed = r.gen();
        let (c, side, stride, n) = (r.gen_range(2..=3), [2, 4][r.gen_range(0..2)], r.gen_range(1..=2), r.gen_range(1..=2));
        let mut table = AlphaTable::<f64>::new(CellSpec::new(r.gen_range(1..=4)));
        let scale = r.gen_range(0.01..20.0);
        for t in table.tensors_mut() {
            *t = randn(t.shape(), &mut r).map(|v| v * scale);
        }
        for kind in [CellKind::Normal, CellKind::Reduction] {
            for w in table.weights(kind) {
                let dev = (w.iter().sum::<f64>() - 1.0).abs();
                ensure!(dev < 1e-6, "instance {i}: weights sum off by {dev:e}");
            }
        }
        let case = mixed_case(seed, c, side, stride, n);
        let alpha = randn(&[CandidateOp::COUNT], &mut r).into_vec();
        let shift = r.gen_range(-50.0..50.0);
        let moved: Vec<f64> = alpha.iter().map(|a| a + shift).collect();
        let diff = mixed_output(&case, &alpha).max_abs_diff(&mixed_output(&case, &moved));
        ensure!(diff < 1e-6, "instance {i}: translation changed output by {diff:e}");
        let k = i % CandidateOp::COUNT;
        let mut hot = vec![0.0; CandidateOp::COUNT];
        hot[k] = 60.0;
        let diff_hot = mixed_output(&case, &hot).max_abs_diff(&single_output(&case, k));
        ensure!(diff_hot < 1e-6, "instance {i}: one-hot {} differs by {diff_hot:e}", CandidateOp::ALL[k]);
        worst = worst.max(diff).max(diff_hot);
    }
    Ok(format!("{instances} instances, max deviation {worst:.2e}"))
}

fn derivation_suite() -> Outcome {
    let weights = |t: &AlphaTable<f64>, kind| t.edges(kind).iter().map(|e| softmax(e.data())).collect::<Vec<_>>();
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let scale = [1e-3, 0.1, 1.0, 5.0][r.gen_range(0..4)];
        let mut t = AlphaTable::<f64>::new(CellSpec::new(2));
        for a in t.tensors_mut() {
            *a = randn(a.shape(), &mut r).map(|v| v * scale);
        }
        let g = derive_genotype(&t);
        for kind in [CellKind::Normal, CellKind::Reduction] {
            ensure!(g.genes(kind) == derive_oracle(&weights(&t, kind), 2).as_slice(), "table {seed}: oracle mismatch");
            ensure!(g.genes(kind).iter().flatten().all(|x| x.op != CandidateOp::Zero), "table {seed}: zero op selected");
        }
        let mut moved = t.clone();
        for a in moved.tensors_mut() {
            let s = r.gen_range(-10.0..10.0);
            *a = a.map(|v| v + s);
        }
        ensure!(derive_genotype(&moved) == g, "table {seed}: translation changed the genotype");
    }
    Ok("1000 tables match the exhaustive oracle".into())
}

fn pyramid_suite() -> Outcome {
    let mut r = rng(121);
    let mut nets = 0;
    for layers in [3, 5, 7] {
        for scales in 1..=3 {
            let mut cfg = random_config(&mut r, layers, scales);
            cfg.init_channels = 2;
            cfg.nodes = 1;
            let seed = (layers * 10 + scales) as u64;
            let mut model = SearchModel::<f32>::new(&cfg, seed).map_err(|e| e.to_string())?;
            for a in model.alphas.tensors_mut() {
                *a = randn(a.shape(), &mut r).cast();
            }
            check_pyramid(&model.net, &model.params, Some(model.alphas.tensors()), seed);
            let cfg = random_config(&mut r, layers, scales);
            let genotype = random_genotype(cfg.nodes, &mut r);
            let mut store = ParamStore::<f32>::new();
            let net = Network::discrete(&cfg, &genotype, &mut Builder::new(&mut store, &mut rng(seed)))
                .map_err(|e| e.to_string())?;
            check_pyramid(&net, &store, None, seed);
            nets += 2;
        }
    }
    Ok(format!("{nets} networks, extents and bitwise prefixes hold"))
}

fn flops_suite() -> Outcome {
    let mut r = rng(131);
    for _ in 0..50 {
        let layers = r.gen_range(2..=4);
        let scales = r.gen_range(1..=3);
        let cfg = random_config(&mut r, layers, scales);
        assert_flops_equivalent(&cfg, &random_genotype(cfg.nodes, &mut r));
    }
    assert_flops_equivalent(&preset("baseline-search", &[]).network, &random_genotype(4, &mut r));
    let sota = preset("paper-sota", &[]).network;
    let costs = assert_flops_equivalent(&sota, &random_genotype(sota.nodes, &mut r));
    let share = costs[0].mflops / costs.last().unwrap().mflops;
    ensure!(share < 0.25, "paper-sota first exit is {:.1}% of the total", share * 100.0);

    let cfg = preset("toy", &["data.toy.samples=200"]);
    let data = cfg.load_dataset().map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 1,
        ..cfg.train.clone()
    };
    let (model, _) = train_final::<f32>(&random_genotype(2, &mut r), &cfg.network, &tc, &data, 1, None, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    let curve = evaluate_anytime(&model, &data.test, 64).map_err(|e| e.to_string())?;
    ensure!(
        curve.points.windows(2).all(|w| w[1].mflops > w[0].mflops),
        "anytime curve MFLOPS not strictly increasing"
    );
    Ok(format!(
        "52 configs exact; paper-sota first exit {:.2} of {:.2} MFLOPS = {:.1}% (reference ≈12%)",
        costs[0].mflops,
        costs.last().unwrap().mflops,
        share * 100.0
    ))
}

fn final_accuracy(cfg: &RunConfig, genotype: &scalenas::search_space::Genotype, out: &Path) -> Result<f64, Error> {
    let model = cmd_train(cfg, genotype, out)?;
    let data = cfg.load_dataset()?;
    let curve = evaluate_anytime(&model, &data.test, cfg.eval.batch_size)?;
    Ok(curve.points.last().unwrap().accuracy)
}

fn desk_scale() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut searched = Vec::new();
    let mut random = Vec::new();
    let mut first_run = Duration::ZERO;
    for seed in 0..3u64 {
        let cfg = preset("toy", &[]);
        let cfg = RunConfig { seed, ..cfg };
        let start = Instant::now();
        let genotype = cmd_search(&cfg, &dir.path().join(format!("search{seed}"))).map_err(|e| e.to_string())?;
        let acc = final_accuracy(&cfg, &genotype, &dir.path().join(format!("train{seed}"))).map_err(|e| e.to_string())?;
        if seed == 0 {
            first_run = start.elapsed();
        }
        let baseline = random_genotype(cfg.network.nodes, &mut rng(1000 + seed));
        let racc = final_accuracy(&cfg, &baseline, &dir.path().join(format!("random{seed}"))).map_err(|e| e.to_string())?;
        println!("    seed {seed}: searched {acc:.3}, random {racc:.3}");
        searched.push(acc);
        random.push(racc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (s, r) = (mean(&searched), mean(&random));
    ensure!(first_run < Duration::from_secs(600), "search + train took {first_run:?}");
    ensure!(searched[0] >= 0.75, "final-exit accuracy {:.3} < 0.75", searched[0]);
    ensure!(s >= r, "searched mean {s:.3} < random mean {r:.3}");
    Ok(format!(
        "search+train {:.0}s, final-exit acc {:.3}, searched mean {s:.3} vs random mean {r:.3}",
        first_run.as_secs_f64(),
        searched[0]
    ))
}

fn anytime_contract() -> Outcome {
    let cfg = preset("toy", &["data.toy.samples=300"]);
    let data = cfg.load_dataset().map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 2,
        ..cfg.train.clone()
    };
    let (model, _) = train_final::<f32>(&random_genotype(2, &mut rng(141)), &cfg.network, &tc, &data, 3, None, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    let curve = evaluate_anytime(&model, &data.test, 64).map_err(|e| e.to_string())?;
    for (k, point) in curve.points.iter().enumerate() {
        let short = model.truncate(k).map_err(|e| e.to_string())?;
        let alone = evaluate_anytime(&short, &data.test, 64).map_err(|e| e.to_string())?;
        let last = alone.points.last().unwrap();
        ensure!(last.accuracy == point.accuracy, "exit {k}: {} vs truncated {}", point.accuracy, last.accuracy);
    }
    let costs = model.costs().map_err(|e| e.to_string())?;
    let images = scalenas::data::make_batch::<f32>(&data.test, &[0, 1, 2], &model.norm, None, scalenas::data::Split::Test)
        .map_err(|e| e.to_string())?
        .images;
    let mut prev = 0;
    let total = costs.last().unwrap().mflops;
    for i in 0..=100 {
        let b = Budget::new(total * 1.5 * i as f64 / 100.0).map_err(|e| e.to_string())?;
        let (exit, _) = select_exit(&costs, b);
        let p = budgeted_predict(&model, &costs, &images, b).map_err(|e| e.to_string())?;
        ensure!(exit >= prev && p.exit_used == exit, "budget selection not monotone at step {i}");
        prev = exit;
    }
    Ok(format!("{} exits equal their truncated models, 101 budgets monotone", curve.points.len()))
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for name in names {
        let (x, y) = (fs::read(a.join(name)), fs::read(b.join(name)));
        ensure!(matches!((&x, &y), (Ok(x), Ok(y)) if x == y), "{name} differs between {a:?} and {b:?}");
    }
    Ok(())
}

fn reproducibility() -> Outcome {
    let cfg = preset("toy", &["data.toy.samples=240", "search.epochs=3", "train.epochs=3", "eval.budgets=[0.1, 10.0]"]);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    let e = |r: Error| r.to_string();
    for run in ["a", "b"] {
        let g = cmd_search(&cfg, &p.join(run).join("search")).map_err(e)?;
        cmd_train(&cfg, &g, &p.join(run).join("train")).map_err(e)?;
        cmd_eval(&p.join(run).join("train").join(CHECKPOINT_FILE), None, &p.join(run).join("eval")).map_err(e)?;
    }
    same_files(&p.join("a/search"), &p.join("b/search"), &[GENOTYPE_FILE, METRICS_FILE, ALPHAS_FILE, CHECKPOINT_FILE])?;
    same_files(&p.join("a/train"), &p.join("b/train"), &[METRICS_FILE, CHECKPOINT_FILE])?;
    same_files(&p.join("a/eval"), &p.join("b/eval"), &[CURVE_FILE, "budgets.csv"])?;

    let split = p.join("resumed");
    let data = cfg.load_dataset().map_err(e)?;
    let stopped = run_search::<f32>(&data, &cfg.network, &cfg.search, cfg.seed, None, |model, state| {
        Checkpoint::from_search(&cfg, &data.norm, model, state).save(&split.join(CHECKPOINT_FILE))?;
        if state.epoch == 1 {
            return Err(Error::State("interrupted".into()));
        }
        Ok(())
    });
    ensure!(stopped.is_err(), "interruption did not stop the search");
    let g = cmd_search(&cfg, &split).map_err(e)?;
    same_files(&p.join("a/search"), &split, &[GENOTYPE_FILE, METRICS_FILE, ALPHAS_FILE, CHECKPOINT_FILE])?;

    let split_train = p.join("resumed-train");
    let stopped = train_final::<f32>(&g, &cfg.network, &cfg.train, &data, cfg.seed, None, |model, state| {
        Checkpoint::from_train(&cfg, model, state).save(&split_train.join(CHECKPOINT_FILE))?;
        if state.epoch == 2 {
            return Err(Error::State("interrupted".into()));
        }
        Ok(())
    });
    ensure!(stopped.is_err(), "interruption did not stop training");
    cmd_train(&cfg, &g, &split_train).map_err(e)?;
    same_files(&p.join("a/train"), &split_train, &[METRICS_FILE, CHECKPOINT_FILE])?;
    Ok("two runs bitwise identical; resumed search and training match".into())
}

fn data_layer() -> Outcome {
    for (variant, seed) in [(CifarVariant::Cifar10, 1), (CifarVariant::Cifar100, 2)] {
        let bytes = synthetic_records(variant, 9, seed);
        let set = decode_records(&bytes, variant, "mem").map_err(|e| e.to_string())?;
        ensure!(encode_records(&set, variant).map_err(|e| e.to_string())? == bytes, "{variant:?} round trip differs");
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(dir.path().join("train.bin"), synthetic_records(CifarVariant::Cifar100, 4, 3)).map_err(|e| e.to_string())?;
    let mut short = synthetic_records(CifarVariant::Cifar100, 4, 4);
    short.truncate(short.len() - 100);
    fs::write(dir.path().join("test.bin"), short).map_err(|e| e.to_string())?;
    let opts = CifarOptions {
        records_per_file: Some(4),
        checksums: None,
    };
    let loaded = load_cifar(dir.path(), CifarVariant::Cifar100, &opts);
    ensure!(matches!(loaded, Err(Error::Format { .. })), "truncated file accepted");

    let mut r = rng(151);
    for trial in 0..200 {
        let classes = r.gen_range(2..=10);
        let labels: Vec<usize> = (0..r.gen_range(10..400)).map(|_| r.gen_range(0..classes)).collect();
        let f = r.gen_range(0.05..0.95);
        let (_, val) = make_splits(&labels, f, trial).map_err(|e| e.to_string())?;
        for c in 0..classes {
            let n = labels.iter().filter(|&&l| l == c).count() as f64;
            let v = val.iter().filter(|&&i| labels[i] == c).count() as f64;
            ensure!((v - n * f).abs() <= 1.0, "trial {trial}: class {c} gets {v} of {n} at {f}");
        }
    }
    Ok("round trips identical, truncation rejected, 200 splits within ±1".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient fidelity", gradient_fidelity),
        ("2 mixed-op weights", mixed_op_suite),
        ("3 genotype derivation", derivation_suite),
        ("4 shape pyramid", pyramid_suite),
        ("5 flops oracle", flops_suite),
        ("6 desk-scale end-to-end", desk_scale),
        ("7 anytime contract", anytime_contract),
        ("8 reproducibility", reproducibility),
        ("9 data layer", data_layer),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
