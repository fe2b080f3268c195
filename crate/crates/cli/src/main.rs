//! `mce`: experiment harness for capability-enhanced multi-modal training.

mod game;
mod pipeline;

use std::convert::Infallible;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use mce_core::coalition::{exact_shapley, mc_shapley, CoalitionGame, ShapleyResult};
use mce_core::config::RunConfig;
use mce_core::seeding::{derive_seed, stream};
use mce_core::text::{format_list, Document};

use crate::pipeline::Run;

#[derive(Parser)]
#[command(name = "mce", version, about = "Train and analyse multi-modal models under missing modalities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Config file (`[section]` headers, `key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; overrides `run.seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Run directory. Defaults to `runs/<config hash>`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test split.
    GenData(Common),
    /// Train the frozen single-modality models.
    Pretrain(Common),
    /// Joint training; writes losses, factor traces and evaluations.
    Train(Common),
    /// Evaluate the trained model on every modality subset.
    Eval(Common),
    /// Linear probes of each modality's encoder features.
    Probe(Common),
    /// Shapley values of a game given as a table of coalition values.
    Shapley {
        #[arg(long, value_name = "PATH")]
        game: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the component grid, rows a to m.
    Ablate(Common),
    /// Combine logged artifacts of one or two runs.
    Report {
        #[arg(long, num_args = 2, value_names = ["DIR", "DIR"])]
        compare: Option<Vec<PathBuf>>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<Run> {
    let mut config = match &common.config {
        Some(p) => RunConfig::read(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(config.hash()));
    Ok(Run { config, dir })
}

fn shapley(path: &std::path::Path, common: &Common) -> Result<()> {
    let run = resolve(common)?;
    let table = game::read_game(path)?;
    let values = table.values.clone();
    let g = CoalitionGame::new(table.players, move |s| Ok::<f64, Infallible>(values[s as usize]))?;
    let lce = &run.config.train.lce;
    let result: ShapleyResult = if table.players <= lce.exact_threshold {
        exact_shapley(&g, g.full_mask())?
    } else {
        mc_shapley(&g, g.full_mask(), lce.permutations, derive_seed(run.config.seed, stream::SHAPLEY))?
    };
    println!("phi = {}", format_list(&result.phi));
    if let Some(out) = &common.out {
        #[derive(serde::Serialize)]
        struct Row {
            player: usize,
            phi: f64,
        }
        std::fs::create_dir_all(out)?;
        let rows: Vec<Row> = result.phi.iter().enumerate().map(|(player, &phi)| Row { player, phi }).collect();
        let csv_path = out.join("shapley.csv");
        mce_core::runlog::write_csv(&csv_path, &rows)?;
        let mut doc = Document::new();
        doc.push("run", "command", "shapley");
        doc.push("run", "players", table.players);
        doc.push("run", "method", format!("{:?}", result.method));
        doc.push("run", "oracle_calls", result.oracle_calls);
        doc.push("inputs", "game", hex::encode(Sha256::digest(std::fs::read(path)?)));
        doc.push("outputs", "shapley.csv", hex::encode(Sha256::digest(std::fs::read(&csv_path)?)));
        doc.write(&out.join("manifest.txt"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let run = resolve(&c)?;
            let (train, test) = run.gen_data()?;
            println!("{} train / {} test samples in {}", train.len(), test.len(), run.dir.join("data").display());
        }
        Command::Pretrain(c) => {
            let run = resolve(&c)?;
            let (train, test) = run.ensure_data()?;
            let frozen = run.pretrain(&train, &test)?;
            println!("{} frozen models in {}", frozen.len(), run.dir.join("frozen").display());
        }
        Command::Train(c) => {
            let run = resolve(&c)?;
            let (_, log) = run.train()?;
            let mean = log.evals.iter().rev().find(|r| r.subset == "mean").map_or(f64::NAN, |r| r.accuracy);
            println!("mean subset accuracy {mean:.4}; logs in {}", run.dir.join("train").display());
        }
        Command::Eval(c) => {
            let run = resolve(&c)?;
            let mean = run.eval()?;
            println!("mean subset accuracy {mean:.4}; results in {}", run.dir.join("eval").display());
        }
        Command::Probe(c) => {
            let run = resolve(&c)?;
            for r in run.probe()? {
                println!("modality {}: probe {:.4}, upperbound {:.4}", r.modality, r.capability, r.upperbound);
            }
        }
        Command::Shapley { game, common } => shapley(&game, &common)?,
        Command::Ablate(c) => {
            let run = resolve(&c)?;
            for r in run.ablate()? {
                println!("{}: mean {:.4}, min {:.4}", r.row, r.average_accuracy, r.min_accuracy);
            }
        }
        Command::Report { compare, common } => {
            let (dirs, out) = match compare {
                Some(dirs) => {
                    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join("report"));
                    (dirs, out)
                }
                None => {
                    if common.out.is_none() && common.config.is_none() && common.seed.is_none() && common.overrides.is_empty() {
                        bail!("report needs --compare DIR DIR or a run (--out / --config)");
                    }
                    let run = resolve(&common)?;
                    let out = run.dir.join("report");
                    (vec![run.dir], out)
                }
            };
            pipeline::report(&dirs, &out)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
