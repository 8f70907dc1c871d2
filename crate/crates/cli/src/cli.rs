//! Argument parsing and subcommand dispatch.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;
use nfrl_core::kv::KvText;
use nfrl_rl::expert::{generate_expert_dataset, GenerationSpec};
use nfrl_rl::MazeId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks::{format_table, run_suite, Suite};
use crate::config::RunConfig;
use crate::datasets::{write_points, Builtin};
use crate::error::CliError;
use crate::eval::{run_eval, write_report, EvalRequest};
use crate::run::{export_long, run_root};
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "nfrl", version = crate::run::CODE_VERSION, about = "Normalizing-flow RL: data, training, evaluation and oracle checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a maze trajectory dataset or a built-in 2-D point set.
    GenData(GenDataArgs),
    /// Train one algorithm into a run directory.
    Train(TrainArgs),
    /// Roll out a checkpointed policy.
    Eval(EvalArgs),
    /// Run an oracle check suite and print measured values against thresholds.
    Check(CheckArgs),
    /// Write metric series of runs as a long-format CSV table.
    PlotExport(PlotExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Maze id (open, u_maze, big_maze, two_rooms) or density (two-moons, mixture, ring, gaussian).
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n_traj: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Fraction of trajectories driven with extra action noise.
    #[arg(long, default_value_t = 0.0)]
    pub noisy_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noisy_std: f64,
    /// Comma-separated route weights, one per route family of the maze.
    #[arg(long)]
    pub mode_mix: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config layers, applied in order.
    #[arg(long = "config")]
    pub configs: Vec<PathBuf>,
    /// `key=value` overrides applied after every config file.
    #[arg(long = "set", value_parser = parse_key_value)]
    pub overrides: Vec<(String, String)>,
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Run directory name under the output root; defaults to `<algo>-s<seed>`.
    #[arg(long)]
    pub run_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub env: String,
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    /// Apply the denoising correction with this training noise std (0.1 when given without a value).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.1")]
    pub denoise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Report file; defaults to `eval-<env>.txt` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    pub suite: String,
    /// Smaller sample counts and shorter training for a fast pass.
    #[arg(long)]
    pub quick: bool,
}

#[derive(Debug, Args)]
pub struct PlotExportArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).ok_or_else(|| format!("expected key=value, got '{s}'"))
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
        Command::PlotExport(a) => cmd_plot_export(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    if let Some(b) = Builtin::parse(&a.name) {
        let pts = b.sample(a.samples, &mut rng);
        let mut h = KvText::new();
        h.set("density", b.name());
        h.set("seed", a.seed);
        h.set("generator", crate::run::CODE_VERSION);
        let f = std::fs::File::create(&a.out)?;
        write_points(std::io::BufWriter::new(f), &pts, &h)?;
        println!("wrote {} points to {}", pts.rows(), a.out.display());
        return Ok(());
    }
    let maze: MazeId = a.name.parse()?;
    let mut spec = GenerationSpec::expert(maze, a.n_traj, a.seed);
    spec.noisy_fraction = a.noisy_fraction;
    spec.noisy_action_std = a.noisy_std;
    if let Some(mix) = &a.mode_mix {
        spec.mode_mix = mix.split(',').map(|w| w.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("--mode-mix: cannot parse '{w}'")))).collect::<Result<_, _>>()?;
    }
    let ds = generate_expert_dataset(&spec, &mut rng)?;
    ds.save(&a.out)?;
    println!("wrote {} trajectories of {} to {}", ds.trajectories.len(), maze, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut overrides = Vec::new();
    if let Some(v) = a.algo {
        overrides.push(("algorithm".to_string(), v));
    }
    overrides.extend(a.overrides);
    for (k, v) in [("steps", a.steps.map(|s| s.to_string())), ("seed", a.seed.map(|s| s.to_string())), ("dataset", a.dataset)] {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    let files: Vec<&std::path::Path> = a.configs.iter().map(|p| p.as_path()).collect();
    let config = RunConfig::from_layers(&files, &overrides)?;
    let name = a.run_name.unwrap_or_else(|| format!("{}-s{}", config.algorithm, config.seed));
    let dir = run_root().join(name);
    info!("training {} for {} steps into {}", config.algorithm, config.steps, dir.display());
    let out = train(&config, &dir)?;
    println!("run {} finished: {} steps, final loss {}", out.dir.display(), out.steps_done, out.final_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into()));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let maze: MazeId = a.env.parse()?;
    let req = EvalRequest { maze, episodes: a.episodes, denoise: a.denoise, seed: a.seed, workers: a.workers };
    let report = run_eval(&a.checkpoint, &req)?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.with_file_name(format!("eval-{maze}.txt")));
    let f = std::fs::File::create(&out)?;
    write_report(std::io::BufWriter::new(f), &req, &report)?;
    println!(
        "{maze}: {} episodes, success {:.3}, return {:.3} ± {:.3} (report {})",
        report.episodes.len(),
        report.success_rate(),
        report.return_mean(),
        report.return_std(),
        out.display()
    );
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Result<(), CliError> {
    let suite: Suite = a.suite.parse()?;
    let rows = run_suite(suite, a.quick)?;
    print!("{}", format_table(&rows));
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed()).map(|r| format!("{}/{}", r.suite, r.name)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

fn cmd_plot_export(a: PlotExportArgs) -> Result<(), CliError> {
    let rows = match &a.out {
        Some(p) => export_long(std::io::BufWriter::new(std::fs::File::create(p)?), &a.runs)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            let n = export_long(&mut lock, &a.runs)?;
            lock.flush()?;
            n
        }
    };
    if let Some(p) = &a.out {
        println!("wrote {rows} rows to {}", p.display());
    }
    Ok(())
}
