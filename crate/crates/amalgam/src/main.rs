//! Command-line entry point: dataset generation, training, ablations,
//! evaluation rollouts and report generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use amalgam::analysis::{
    load_run_config, render_attention_grid, report_similarity, report_table, DEFAULT_TIMESTEPS,
};
use amalgam::checkpoint::load_checkpoint;
use amalgam::config::{load_toml, RunConfig, SuiteConfig};
use amalgam::env::dataset::generate_dataset;
use amalgam::env::EnvConfig;
use amalgam::model::build_model;
use amalgam::train::{rollout, run_ablation, train_run, RolloutMode};

#[derive(Parser)]
#[command(name = "amalgam", version, about = "Amalgamated-attention pick task: train, evaluate, report")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scripted pick dataset (episodes plus manifest).
    GenData {
        /// Number of box slots; must match the scene (3).
        #[arg(long, default_value_t = 3)]
        slots: usize,
        /// Episodes per slot.
        #[arg(long = "per-slot", default_value_t = 5)]
        per_slot: usize,
        /// Base seed; episode i uses seed + i.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Episode length override (default 120). A training run's `[env]`
        /// section must match the dataset it reads.
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model from a TOML run config.
    Train {
        /// Run config (model/train/env sections, data_dir, out_dir).
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and evaluate the full variant grid from a TOML suite config.
    Ablate {
        /// Suite config (base run config, variants, seeds).
        #[arg(long)]
        suite: PathBuf,
    },
    /// Run one evaluation episode from a checkpoint and save its trace.
    Rollout {
        /// Checkpoint file; `run.json` must sit next to it.
        #[arg(long)]
        ckpt: PathBuf,
        /// Box slot to evaluate.
        #[arg(long)]
        slot: usize,
        /// `open_loop` or `closed_loop`.
        #[arg(long, default_value = "closed_loop")]
        mode: String,
        /// Episode seed (start-pose jitter).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace output path (default: `trace_slot{K}_{mode}.json` next to
        /// the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render reports from training or ablation outputs.
    Report {
        #[command(subcommand)]
        what: ReportCmd,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Attention-development grid: one column per checkpoint, one row per
    /// timestep. Missing checkpoints render as crossed-out cells.
    Grid {
        /// Training output directory (contains run.json and ck_*.bin).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for attention_grid.png.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated episode timesteps (default 0,30,60,90).
        #[arg(long, value_delimiter = ',')]
        timesteps: Option<Vec<usize>>,
        /// Comma-separated checkpoint epochs (default: the run's checkpoint
        /// schedule plus the final epoch).
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<usize>>,
        /// Box slot for the probe episode.
        #[arg(long, default_value_t = 1)]
        slot: usize,
        /// Probe episode seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Query-similarity curves per TD head: similarity.csv + similarity.png.
    Similarity {
        /// Training output directory (contains metrics.jsonl).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablation results table: results_table.txt + results_table.csv.
    /// Exits with status 2 if any cell has no data.
    Table {
        /// Ablation output directory (contains results.json).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> amalgam::Result<RolloutMode> {
    match s {
        "open_loop" => Ok(RolloutMode::OpenLoop),
        "closed_loop" => Ok(RolloutMode::ClosedLoop),
        other => Err(amalgam::Error::Config(format!(
            "unknown rollout mode {other:?} (expected open_loop or closed_loop)"
        ))),
    }
}

fn cmd_gen_data(
    slots: usize,
    per_slot: usize,
    seed: u64,
    steps: Option<usize>,
    out: &Path,
) -> amalgam::Result<()> {
    let mut env = EnvConfig::default();
    if let Some(steps) = steps {
        env.steps = steps;
    }
    if slots != env.slots.len() {
        return Err(amalgam::Error::Config(format!(
            "the scene has {} slots, got --slots {slots}",
            env.slots.len()
        )));
    }
    if per_slot == 0 {
        return Err(amalgam::Error::Config("--per-slot must be >= 1".into()));
    }
    let manifest = generate_dataset(&env, per_slot, seed, out)?;
    println!(
        "wrote {} episodes ({} per slot) to {}",
        manifest.episodes.len(),
        per_slot,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path) -> amalgam::Result<()> {
    let run: RunConfig = load_toml(config)?;
    let summary = train_run(&run)?;
    let last = summary.records.last().expect("training emits records");
    println!(
        "trained {} epochs; final loss {:.6}; outputs in {}",
        last.epoch,
        last.loss.total,
        summary.out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(suite_path: &Path) -> amalgam::Result<()> {
    let suite: SuiteConfig = load_toml(suite_path)?;
    let results = run_ablation(&suite)?;
    for v in &results.variants {
        let (a_ok, a_n) = v.attention_counts();
        let (p_ok, p_n) = v.pick_counts();
        let failed = v.seeds.iter().filter(|s| s.error.is_some()).count();
        println!(
            "{:<10} attention {a_ok}/{a_n}  pick {p_ok}/{p_n}{}",
            v.name,
            if failed > 0 {
                format!("  ({failed} seed(s) failed)")
            } else {
                String::new()
            }
        );
    }
    println!("results in {}/results.json", suite.base.out_dir);
    Ok(())
}

fn cmd_rollout(
    ckpt: &Path,
    slot: usize,
    mode: &str,
    seed: u64,
    out: Option<PathBuf>,
) -> amalgam::Result<()> {
    let mode = parse_mode(mode)?;
    let run_dir = ckpt.parent().unwrap_or_else(|| Path::new("."));
    let run = load_run_config(run_dir)?;
    let (model, mut ps) = build_model::<f32>(&run.model)?;
    let meta = load_checkpoint(ckpt, Some(&run.model.hash()), &mut ps)?;
    let trace = rollout(&model, &ps, &run.env, slot, seed, mode)?;
    let out = out.unwrap_or_else(|| {
        run_dir.join(format!("trace_slot{slot}_{}.json", trace.mode))
    });
    trace.save(&out)?;
    println!(
        "epoch {} checkpoint, slot {slot}, {}: attention {} pick {}{}",
        meta.epoch,
        trace.mode,
        trace.attention_success,
        trace.pick_success,
        trace
            .aborted_at
            .map(|t| format!(" (aborted at step {t})"))
            .unwrap_or_default()
    );
    println!("trace written to {}", out.display());
    Ok(())
}

fn cmd_report_grid(
    input: &Path,
    out: &Path,
    timesteps: Option<Vec<usize>>,
    epochs: Option<Vec<usize>>,
    slot: usize,
    seed: u64,
) -> amalgam::Result<()> {
    let epochs = match epochs {
        Some(e) => e,
        None => {
            let run = load_run_config(input)?;
            let mut e = run.train.checkpoint_epochs.clone();
            e.push(run.train.epochs);
            e.sort_unstable();
            e.dedup();
            e
        }
    };
    let timesteps = timesteps.unwrap_or_else(|| DEFAULT_TIMESTEPS.to_vec());
    let png = out.join("attention_grid.png");
    render_attention_grid(input, slot, seed, &epochs, &timesteps, &png)?;
    println!("attention grid written to {}", png.display());
    Ok(())
}

fn run(cli: Cli) -> amalgam::Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData {
            slots,
            per_slot,
            seed,
            steps,
            out,
        } => cmd_gen_data(slots, per_slot, seed, steps, &out)?,
        Cmd::Train { config } => cmd_train(&config)?,
        Cmd::Ablate { suite } => cmd_ablate(&suite)?,
        Cmd::Rollout {
            ckpt,
            slot,
            mode,
            seed,
            out,
        } => cmd_rollout(&ckpt, slot, &mode, seed, out)?,
        Cmd::Report { what } => match what {
            ReportCmd::Grid {
                input,
                out,
                timesteps,
                epochs,
                slot,
                seed,
            } => cmd_report_grid(&input, &out, timesteps, epochs, slot, seed)?,
            ReportCmd::Similarity { input, out } => {
                let png = report_similarity(&input, &out)?;
                println!("similarity report written to {}", png.display());
            }
            ReportCmd::Table { input, out } => {
                let table = report_table(&input, &out)?;
                print!("{}", table.text);
                if !table.complete {
                    eprintln!("warning: table has gaps (missing or failed variants)");
                    return Ok(ExitCode::from(2));
                }
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
