use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scalenas::checkpoint::Checkpoint;
use scalenas::config::{ConfigSources, RunConfig};
use scalenas::run::{cmd_eval, cmd_flops, cmd_search, cmd_train, flops_table, read_genotype};
use scalenas::Error;

#[derive(Parser)]
#[command(name = "scalenas", version, about = "Multi-scale early-exit architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell genotype.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Train a discrete network from a genotype file.
    Train {
        #[arg(long)]
        genotype: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Anytime curve and budgeted accuracy of a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR directory; overrides `data.path`.
        #[arg(long)]
        data_path: Option<PathBuf>,
        /// Comma-separated per-sample budgets in MFLOPS.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-exit cumulative MFLOPS and parameter counts.
    Flops {
        /// A trained checkpoint or a genotype JSON file.
        source: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: baseline-search, paper-sota or toy.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// `section.key=value` overrides, applied last.
    overrides: Vec<String>,
}

impl Common {
    fn sources(&self, fallback_file: Option<String>) -> Result<ConfigSources, Error> {
        let file = match &self.config {
            Some(p) => Some(fs::read_to_string(p)?),
            None => fallback_file,
        };
        Ok(ConfigSources {
            file,
            preset: self.preset.clone(),
            overrides: self.overrides.clone(),
            seed: self.seed,
        })
    }

    fn resolve(&self) -> Result<RunConfig, Error> {
        RunConfig::resolve(&self.sources(None)?)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Search { common } => {
            let cfg = common.resolve()?;
            let genotype = cmd_search(&cfg, &common.out_dir)?;
            println!("{}", genotype.to_json());
        }
        Command::Train { genotype, common } => {
            let cfg = common.resolve()?;
            let g = read_genotype(&genotype)?;
            let model = cmd_train(&cfg, &g, &common.out_dir)?;
            print!("{}", flops_table(&model.costs()?));
        }
        Command::Eval {
            checkpoint,
            data_path,
            budgets,
            mut common,
        } => {
            // Without an explicit config the checkpoint's own settings are the base layer.
            let base = Checkpoint::load(&checkpoint)?.header.config.to_toml();
            if let Some(p) = data_path {
                common.overrides.push(format!("data.path={}", toml_string(&p)));
            }
            if !budgets.is_empty() {
                let list: Vec<String> = budgets.iter().map(|b| format!("{b:?}")).collect();
                common.overrides.push(format!("eval.budgets=[{}]", list.join(",")));
            }
            let cfg = RunConfig::resolve(&common.sources(Some(base))?)?;
            let (curve, rows) = cmd_eval(&checkpoint, Some(&cfg), &common.out_dir)?;
            print!("{}", curve.to_csv());
            if !rows.is_empty() {
                print!("{}", scalenas::run::budgets_csv(&rows));
            }
        }
        Command::Flops { source, json, common } => {
            let cfg = common.resolve()?;
            let costs = cmd_flops(&source, &cfg)?;
            if json {
                println!("{}", scalenas::flops::costs_to_json(&costs)?);
            } else {
                print!("{}", flops_table(&costs));
            }
        }
    }
    Ok(())
}

fn toml_string(p: &Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::SchemaVersion { .. } | Error::Validation(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
