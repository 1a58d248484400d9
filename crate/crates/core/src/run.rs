//! The four top-level commands, writing their artifacts into an output
//! directory. An interrupted search or training run resumes from its
//! checkpoint; a directory with a manifest is never written again.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::{write_atomic, Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::data::{Normalization, FileDigest};
use crate::engine::MetricRow;
use crate::error::{Error, Result};
use crate::flops::ExitCost;
use crate::manifest::{guard_out_dir, RunManifest};
use crate::search::run_search;
use crate::search_space::Genotype;
use crate::train::{budget_table, evaluate_anytime, train_final, AnytimeCurve, Budget, BudgetRow, TrainedModel};

pub const CONFIG_FILE: &str = "config.toml";
pub const GENOTYPE_FILE: &str = "genotype.json";
pub const ALPHAS_FILE: &str = "alphas.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVE_FILE: &str = "curve.csv";
pub const BUDGETS_FILE: &str = "budgets.csv";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(MetricRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn budgets_csv(rows: &[BudgetRow]) -> String {
    let mut s = String::from(BudgetRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_atomic(&dir.join(name), text.as_bytes())
}

/// Loads the checkpoint in `out` when one exists, insisting that it was
/// written by the same configuration.
fn resume_point(out: &Path, cfg: &RunConfig, kind: CheckpointKind) -> Result<Option<Checkpoint>> {
    let path = out.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(&path)?;
    if ck.header.kind != kind || ck.header.config != *cfg {
        return Err(Error::State(format!(
            "{} holds a checkpoint from a different run; use a fresh --out-dir",
            out.display()
        )));
    }
    log::info!("resuming from epoch {}", ck.header.epoch);
    Ok(Some(ck))
}

pub fn read_genotype(path: &Path) -> Result<Genotype> {
    Genotype::from_json(&fs::read_to_string(path)?)
}

/// Searches for a genotype and writes it with the alpha history, metrics,
/// final checkpoint and manifest.
pub fn cmd_search(cfg: &RunConfig, out: &Path) -> Result<Genotype> {
    cfg.validate()?;
    guard_out_dir(out)?;
    let data = cfg.load_dataset()?;
    let resume = match resume_point(out, cfg, CheckpointKind::Search)? {
        Some(ck) => Some(ck.to_search()?),
        None => None,
    };
    write(out, CONFIG_FILE, &cfg.to_toml())?;
    let outcome = run_search::<f32>(&data, &cfg.network, &cfg.search, cfg.seed, resume, |model, state| {
        write(out, METRICS_FILE, &metrics_csv(&state.metrics))?;
        write(out, ALPHAS_FILE, &serde_json::to_string_pretty(&state.history)?)?;
        Checkpoint::from_search(cfg, &data.norm, model, state).save(&out.join(CHECKPOINT_FILE))
    })?;
    let st = &outcome.state;
    write(out, METRICS_FILE, &metrics_csv(&st.metrics))?;
    write(out, ALPHAS_FILE, &serde_json::to_string_pretty(&st.history)?)?;
    Checkpoint::from_search(cfg, &data.norm, &outcome.model, st).save(&out.join(CHECKPOINT_FILE))?;
    write(out, GENOTYPE_FILE, &outcome.genotype.to_json())?;
    RunManifest::build(
        "search",
        cfg,
        data.provenance.clone(),
        out,
        &[CONFIG_FILE, GENOTYPE_FILE, ALPHAS_FILE, METRICS_FILE, CHECKPOINT_FILE],
    )?
    .save(out)?;
    Ok(outcome.genotype)
}

/// Trains the discrete network described by `genotype` and writes the final
/// checkpoint, metrics and manifest.
pub fn cmd_train(cfg: &RunConfig, genotype: &Genotype, out: &Path) -> Result<TrainedModel<f32>> {
    cfg.validate()?;
    if genotype.nodes() != cfg.network.nodes {
        return Err(Error::Config {
            field: "network.nodes".into(),
            msg: format!("the genotype has {} nodes per cell, config says {}", genotype.nodes(), cfg.network.nodes),
        });
    }
    guard_out_dir(out)?;
    let data = cfg.load_dataset()?;
    let resume = match resume_point(out, cfg, CheckpointKind::Train)? {
        Some(ck) => Some(ck.to_train()?),
        None => None,
    };
    write(out, CONFIG_FILE, &cfg.to_toml())?;
    write(out, GENOTYPE_FILE, &genotype.to_json())?;
    let (model, state) = train_final::<f32>(genotype, &cfg.network, &cfg.train, &data, cfg.seed, resume, |model, state| {
        write(out, METRICS_FILE, &metrics_csv(&state.metrics))?;
        Checkpoint::from_train(cfg, model, state).save(&out.join(CHECKPOINT_FILE))
    })?;
    write(out, METRICS_FILE, &metrics_csv(&state.metrics))?;
    Checkpoint::from_train(cfg, &model, &state).save(&out.join(CHECKPOINT_FILE))?;
    let mut inputs = data.provenance.clone();
    inputs.push(FileDigest::of_bytes("genotype", genotype.to_json().as_bytes()));
    RunManifest::build("train", cfg, inputs, out, &[CONFIG_FILE, GENOTYPE_FILE, METRICS_FILE, CHECKPOINT_FILE])?.save(out)?;
    Ok(model)
}

/// Loads a trained checkpoint. When `cfg` is given its network must match
/// the one the checkpoint was trained with; its data and eval sections win.
pub fn load_trained(path: &Path, cfg: Option<&RunConfig>) -> Result<(TrainedModel<f32>, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    if ck.header.kind != CheckpointKind::Train {
        return Err(Error::Validation(format!(
            "{} is a search checkpoint; train a discrete network from its genotype first",
            path.display()
        )));
    }
    let run = match cfg {
        Some(c) if c.network != ck.header.config.network => {
            return Err(Error::Config {
                field: "network".into(),
                msg: format!("{} was trained with a different network configuration", path.display()),
            })
        }
        Some(c) => c.clone(),
        None => ck.header.config.clone(),
    };
    Ok((ck.to_train()?.0, run))
}

/// Writes the anytime curve on the test split and, when budgets are
/// configured, the budgeted-accuracy table.
pub fn cmd_eval(checkpoint: &Path, cfg: Option<&RunConfig>, out: &Path) -> Result<(AnytimeCurve, Vec<BudgetRow>)> {
    let (model, run) = load_trained(checkpoint, cfg)?;
    run.validate()?;
    let budgets = run
        .eval
        .budgets
        .iter()
        .map(|&b| Budget::new(b))
        .collect::<Result<Vec<_>>>()?;
    guard_out_dir(out)?;
    let data = run.load_dataset()?;
    let curve = evaluate_anytime(&model, &data.test, run.eval.batch_size)?;
    curve.validate()?;
    write(out, CURVE_FILE, &curve.to_csv())?;
    let mut outputs = vec![CURVE_FILE];
    let rows = if budgets.is_empty() {
        Vec::new()
    } else {
        let rows = budget_table(&model, &data.test, &budgets, run.eval.batch_size)?;
        write(out, BUDGETS_FILE, &budgets_csv(&rows))?;
        outputs.push(BUDGETS_FILE);
        rows
    };
    let mut inputs = data.provenance.clone();
    inputs.push(FileDigest::of_bytes("checkpoint", &fs::read(checkpoint)?));
    RunManifest::build("eval", &run, inputs, out, &outputs)?.save(out)?;
    Ok((curve, rows))
}

/// Per-exit costs of a trained checkpoint or of a genotype file placed in the
/// network described by `cfg`.
pub fn cmd_flops(source: &Path, cfg: &RunConfig) -> Result<Vec<ExitCost>> {
    let bytes = fs::read(source)?;
    if bytes.starts_with(b"SCALENAS") {
        return load_trained(source, None)?.0.costs();
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Format {
        path: source.display().to_string(),
        msg: "neither a checkpoint nor a genotype file".into(),
    })?;
    let genotype = Genotype::from_json(&text)?;
    cfg.network.validate()?;
    let norm = Normalization::identity(cfg.network.in_channels);
    TrainedModel::<f32>::new(&cfg.network, &genotype, norm, cfg.seed)?.costs()
}

pub fn flops_table(costs: &[ExitCost]) -> String {
    let mut s = String::from("exit  layer      MFLOPS      params  share\n");
    let total = costs.last().map_or(1.0, |c| c.mflops);
    for c in costs {
        let _ = writeln!(
            s,
            "{:>4}  {:>5}  {:>10.3}  {:>10}  {:>5.1}%",
            c.exit_index,
            c.layer,
            c.mflops,
            c.params,
            100.0 * c.mflops / total
        );
    }
    s
}
