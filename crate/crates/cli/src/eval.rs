//! `eval`: roll out a checkpointed flow policy and write a report.

use std::io::Write;
use std::path::Path;

use nfrl_core::flow::FlowModel;
use nfrl_core::kv::KvText;
use nfrl_rl::env::{ACTION_DIM, GOAL_DIM, STATE_DIM};
use nfrl_rl::policy::{evaluate_policy, EvalGoals, EvalReport, EvalSettings, NfPolicy};
use nfrl_rl::{EnvConfig, MazeId};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub maze: MazeId,
    pub episodes: usize,
    /// Training noise std for the denoising correction.
    pub denoise: Option<f64>,
    pub seed: u64,
    pub workers: usize,
}

/// Reads a policy checkpoint and checks it fits the environment's observation and action widths.
pub fn load_policy(path: &Path, denoise: Option<f64>) -> Result<NfPolicy, CliError> {
    let model = FlowModel::load(path).map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", path.display())))?;
    if model.dim() != ACTION_DIM {
        return Err(CliError::Usage(format!("checkpoint models {}-D events, the environment has {ACTION_DIM}-D actions", model.dim())));
    }
    let c = model.cond_dim();
    if c != STATE_DIM && c != STATE_DIM + GOAL_DIM {
        return Err(CliError::Usage(format!(
            "checkpoint is conditioned on {c} values, the environment offers {STATE_DIM} (state) or {} (state and goal)",
            STATE_DIM + GOAL_DIM
        )));
    }
    Ok(NfPolicy::new(model, denoise)?)
}

pub fn run_eval(checkpoint: &Path, req: &EvalRequest) -> Result<EvalReport, CliError> {
    let policy = load_policy(checkpoint, req.denoise)?;
    if req.episodes == 0 {
        return Ok(EvalReport { episodes: Vec::new() });
    }
    let settings = EvalSettings { episodes: req.episodes, seed: req.seed, workers: req.workers.max(1), goals: EvalGoals::Task };
    Ok(evaluate_policy(&policy, req.maze, &EnvConfig::default(), &settings)?)
}

/// Summary line followed by one line per episode.
pub fn write_report<W: Write>(mut w: W, req: &EvalRequest, report: &EvalReport) -> Result<(), CliError> {
    let mut head = KvText::new();
    head.set("env", req.maze);
    head.set("episodes", report.episodes.len());
    head.set("success_rate", report.success_rate());
    head.set("return_mean", report.return_mean());
    head.set("return_std", report.return_std());
    head.set("denoise", req.denoise.map(|s| s.to_string()).unwrap_or_else(|| "off".into()));
    head.set("seed", req.seed);
    writeln!(w, "{}", head.to_line())?;
    for e in &report.episodes {
        let mut kv = KvText::new();
        kv.set("episode", e.index);
        kv.set("success", e.success);
        kv.set("return", e.episode_return);
        kv.set("length", e.length);
        kv.set("final_distance", e.final_distance);
        kv.set("route", e.route.map(|r| r.to_string()).unwrap_or_else(|| "none".into()));
        writeln!(w, "{}", kv.to_line())?;
    }
    Ok(())
}
