//! The training loops behind `train`, one per algorithm, with periodic
//! checkpoints and metric records.

use std::path::{Path, PathBuf};

use nfrl_core::flow::{FlowConfig, FlowModel};
use nfrl_core::grad::{Adam, AdamConfig, StepOutcome};
use nfrl_core::objectives::{cosine_lr, mle_loss, vi_loss, MleBatch};
use nfrl_rl::bc::{bc_batch, bc_update, gcbc_batch, UpdateMetrics};
use nfrl_rl::critic::{critic_update, CriticBatch, CriticConfig, CriticNet};
use nfrl_rl::env::{ACTION_DIM, GOAL_DIM, STATE_DIM};
use nfrl_rl::policy::{evaluate_policy, EvalGoals, EvalSettings, NfPolicy, PolicyInput};
use nfrl_rl::rlbc::{actor_update, ActorBatch, ActorLossWeights};
use nfrl_rl::ugs::{run_exploration, ExplorationSettings, GoalSelection, UgsConfig, UgsState};
use nfrl_rl::{Dataset, EnvConfig, MazeId, PointMassEnv, ReplayBuffer, RewardKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Algorithm, RunConfig};
use crate::datasets::{load_points, Builtin};
use crate::error::CliError;
use crate::run::{MetricsSink, AUX_CHECKPOINT_FILE, CHECKPOINT_FILE};

/// Stream of the seed used for built-in density draws, apart from the training stream.
const DATA_STREAM: u64 = 1;
/// Stream of the seed used for periodic evaluation episodes.
const EVAL_STREAM: u64 = 2;
/// Upper bound on training records per run.
const MAX_TRAIN_RECORDS: usize = 1000;

/// Where a finished (or failed) run left its artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub steps_done: usize,
    pub final_loss: Option<f64>,
}

/// Flow architecture of `config` for events of width `dim` conditioned on `cond_dim` values.
pub fn flow_config(config: &RunConfig, dim: usize, cond_dim: usize, seed: u64) -> FlowConfig {
    let base = if cond_dim == 0 {
        FlowConfig::unconditional(dim, config.blocks, config.channels, seed)
    } else {
        FlowConfig::conditional(dim, cond_dim, config.rep_dims, config.blocks, config.channels, seed)
    };
    FlowConfig {
        coupling_layers: config.coupling_layers,
        encoder_layers: if cond_dim == 0 { 0 } else { config.encoder_layers },
        encoder_width: if cond_dim == 0 { 0 } else { config.encoder_width },
        ..base
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn log_every(steps: usize) -> usize {
    steps.div_ceil(MAX_TRAIN_RECORDS).max(1)
}

/// Writes `model` via a temporary file so a crash never leaves a torn checkpoint.
fn save_atomic(model: &FlowModel, path: &Path) -> Result<(), CliError> {
    if !model.params().all_finite() {
        return Err(CliError::Numeric("refusing to checkpoint non-finite parameters".into()));
    }
    let tmp = path.with_extension("tmp");
    model.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `config` into `dir`. `Numeric` errors leave the last good checkpoint in place.
pub fn train(config: &RunConfig, dir: &Path) -> Result<TrainOutcome, CliError> {
    config.validate()?;
    let mut sink = MetricsSink::create(dir, config)?;
    let result = match config.algorithm {
        Algorithm::DensityMle => train_density(config, &mut sink, false),
        Algorithm::DensityVi => train_density(config, &mut sink, true),
        Algorithm::Bc | Algorithm::Gcbc => train_bc_family(config, &mut sink),
        Algorithm::Rlbc => train_rlbc(config, &mut sink),
        Algorithm::Ugs => train_ugs(config, &mut sink),
    };
    sink.flush()?;
    let (steps_done, final_loss) = result?;
    Ok(TrainOutcome { dir: dir.to_path_buf(), checkpoint: dir.join(CHECKPOINT_FILE), steps_done, final_loss })
}

type LoopResult = Result<(usize, Option<f64>), CliError>;

fn train_density(config: &RunConfig, sink: &mut MetricsSink, vi: bool) -> LoopResult {
    let mut model = FlowModel::new(flow_config(config, 2, 0, config.seed))?;
    let ckpt = sink.dir().join(CHECKPOINT_FILE);
    save_atomic(&model, &ckpt)?;
    let data = if vi { None } else { Some(load_points(&config.dataset, config.samples, &mut stream_rng(config.seed, DATA_STREAM))?) };
    if let Some(d) = &data {
        if d.cols() != 2 || d.rows() == 0 {
            return Err(CliError::Usage(format!("dataset '{}' must hold 2-D points, got {}×{}", config.dataset, d.rows(), d.cols())));
        }
    }
    let target = if vi {
        let b = Builtin::parse(&config.dataset).ok_or_else(|| CliError::Usage(format!("config field 'dataset': density-vi needs a built-in target, got '{}'", config.dataset)))?;
        Some(b.target().ok_or_else(|| CliError::Usage(format!("config field 'dataset': '{}' has no closed-form density", b.name())))?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.num_params(), AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let every = log_every(config.steps);
    let mut last = None;
    for step in 0..config.steps {
        let report = match (&data, &target) {
            (Some(d), _) => {
                let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..d.rows())).collect();
                mle_loss(&model, &MleBatch { x: d.select_rows(&idx), ctx: Vec::new(), noise_std: config.noise_std }, &mut rng)
            }
            (None, Some(t)) => vi_loss(&model, t.as_ref(), config.batch_size, &mut rng),
            (None, None) => unreachable!("density run without data or target"),
        }?;
        let lr = cosine_lr(step, config.steps, config.lr, config.lr_final);
        let outcome = adam.step_with_lr(model.params_mut(), &report.grad, lr)?;
        last = Some(report.loss);
        if step % every == 0 || step + 1 == config.steps {
            sink.record("train", step, &[("loss", report.loss), ("lr", lr), ("applied", f64::from(u8::from(outcome == StepOutcome::Applied)))])?;
        }
        periodic_save(config, step, &model, &ckpt)?;
    }
    save_atomic(&model, &ckpt)?;
    Ok((config.steps, last))
}

fn periodic_save(config: &RunConfig, step: usize, model: &FlowModel, ckpt: &Path) -> Result<(), CliError> {
    if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
        save_atomic(model, ckpt)?;
    }
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<(Dataset, MazeId), CliError> {
    let path = Path::new(&config.dataset);
    let ds = Dataset::load(path).map_err(|e| CliError::Usage(format!("config field 'dataset': {}: {e}", path.display())))?;
    if ds.trajectories.is_empty() {
        return Err(CliError::Usage(format!("dataset {} holds no trajectories", path.display())));
    }
    if ds.state_dim() != STATE_DIM || ds.action_dim() != ACTION_DIM {
        return Err(CliError::Usage(format!("dataset {} has state/action widths {}/{}, expected {STATE_DIM}/{ACTION_DIM}", path.display(), ds.state_dim(), ds.action_dim())));
    }
    let maze = match ds.header.get("env") {
        Some(m) => m.parse()?,
        None => config.env,
    };
    Ok((ds, maze))
}

fn maybe_eval(config: &RunConfig, sink: &mut MetricsSink, step: usize, model: &FlowModel, maze: MazeId, denoise: Option<f64>) -> Result<(), CliError> {
    if config.eval_every == 0 || (step + 1) % config.eval_every != 0 || config.eval_episodes == 0 {
        return Ok(());
    }
    let policy = NfPolicy::new(model.clone(), denoise)?;
    let settings = EvalSettings { episodes: config.eval_episodes, seed: config.seed ^ EVAL_STREAM, workers: 1, goals: EvalGoals::Task };
    let r = evaluate_policy(&policy, maze, &EnvConfig::default(), &settings)?;
    sink.record("eval", step + 1, &[("success", r.success_rate()), ("return_mean", r.return_mean()), ("return_std", r.return_std())])?;
    Ok(())
}

fn train_bc_family(config: &RunConfig, sink: &mut MetricsSink) -> LoopResult {
    let input = if config.algorithm == Algorithm::Gcbc { PolicyInput::StateGoal } else { PolicyInput::State };
    let mut model = FlowModel::new(flow_config(config, ACTION_DIM, input.cond_dim(), config.seed))?;
    let ckpt = sink.dir().join(CHECKPOINT_FILE);
    save_atomic(&model, &ckpt)?;
    if config.steps == 0 {
        return Ok((0, None));
    }
    let (ds, maze) = load_dataset(config)?;
    let buffer = ReplayBuffer::from_trajectories(ds.trajectories);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.num_params(), AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let every = log_every(config.steps);
    let mut last = None;
    for step in 0..config.steps {
        let lr = cosine_lr(step, config.steps, config.lr, config.lr_final);
        let batch = match input {
            PolicyInput::State => bc_batch(&buffer, config.batch_size, config.noise_std, &mut rng)?,
            PolicyInput::StateGoal => gcbc_batch(&buffer, config.batch_size, config.gamma_fut, config.noise_std, &mut rng)?,
        };
        let UpdateMetrics { loss, applied } = bc_update(&mut model, &mut adam, &batch, lr, &mut rng)?;
        last = Some(loss);
        if step % every == 0 || step + 1 == config.steps {
            sink.record("train", step, &[("loss", loss), ("lr", lr), ("applied", f64::from(u8::from(applied)))])?;
        }
        periodic_save(config, step, &model, &ckpt)?;
        maybe_eval(config, sink, step, &model, maze, Some(config.noise_std))?;
    }
    save_atomic(&model, &ckpt)?;
    Ok((config.steps, last))
}

fn train_rlbc(config: &RunConfig, sink: &mut MetricsSink) -> LoopResult {
    let mut actor = FlowModel::new(flow_config(config, ACTION_DIM, STATE_DIM, config.seed))?;
    let ckpt = sink.dir().join(CHECKPOINT_FILE);
    save_atomic(&actor, &ckpt)?;
    if config.steps == 0 {
        return Ok((0, None));
    }
    let mut critic = CriticNet::new(CriticConfig { tau: config.tau, ..CriticConfig::new(STATE_DIM + ACTION_DIM, config.critic_hidden.clone(), config.seed.wrapping_add(1)) })?;
    let (ds, maze) = load_dataset(config)?;
    let buffer = ReplayBuffer::from_trajectories(ds.trajectories);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut actor_adam = Adam::new(actor.num_params(), AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut critic_adam = Adam::new(critic.num_params(), AdamConfig { lr: config.critic_lr, ..AdamConfig::default() });
    let weights = ActorLossWeights { lambda_ent: config.lambda_ent, alpha_bc: config.alpha_bc };
    let every = log_every(config.steps);
    let mut last = None;
    for step in 0..config.steps {
        let batch = CriticBatch::sample(&buffer, config.batch_size, &mut rng)?;
        let c = critic_update(&mut critic, &mut critic_adam, &batch, &actor, config.gamma, config.critic_lr, &mut rng)?;
        let lr = cosine_lr(step, config.steps, config.lr, config.lr_final);
        let ab = ActorBatch { states: batch.states, actions: batch.actions };
        let (a, applied) = actor_update(&mut actor, &mut actor_adam, &critic, &ab, weights, config.noise_std, lr, &mut rng)?;
        last = Some(a.loss);
        if step % every == 0 || step + 1 == config.steps {
            sink.record(
                "train",
                step,
                &[("critic_loss", c.loss), ("q_mean", c.q_mean), ("actor_loss", a.loss), ("data_log_prob", a.data_log_prob), ("lr", lr), ("applied", f64::from(u8::from(applied && c.applied)))],
            )?;
        }
        periodic_save(config, step, &actor, &ckpt)?;
        maybe_eval(config, sink, step, &actor, maze, None)?;
    }
    save_atomic(&actor, &ckpt)?;
    Ok((config.steps, last))
}

fn train_ugs(config: &RunConfig, sink: &mut MetricsSink) -> LoopResult {
    let mut actor = FlowModel::new(flow_config(config, ACTION_DIM, STATE_DIM + GOAL_DIM, config.seed))?;
    let ugs_config = UgsConfig {
        candidate_count: config.candidate_count,
        goal_noise_std: config.goal_noise,
        gamma: config.gamma,
        mask_prob: config.mask_prob,
        batch_size: config.batch_size,
        lr: config.lr,
    };
    let joint = FlowModel::new(flow_config(config, GOAL_DIM, STATE_DIM + ACTION_DIM, config.seed.wrapping_add(1)))?;
    let mut ugs = UgsState::new(joint, ugs_config)?;
    let ckpt = sink.dir().join(CHECKPOINT_FILE);
    let aux = sink.dir().join(AUX_CHECKPOINT_FILE);
    save_atomic(&actor, &ckpt)?;
    save_atomic(&ugs.joint, &aux)?;
    if config.steps == 0 {
        return Ok((0, None));
    }
    let mut env = PointMassEnv::new(config.env, EnvConfig { reward: RewardKind::Zero, ..EnvConfig::default() });
    let settings = ExplorationSettings { episodes: config.steps, grad_steps: config.grad_steps, actor_lr: config.lr, selection: GoalSelection::MinDensity };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    run_exploration(&mut env, &mut actor, &mut ugs, &settings, &mut rng, |r| records.push(r.clone()))?;
    let mut last = None;
    for r in &records {
        sink.record("explore", r.episode, &[("coverage_entropy", r.coverage_entropy), ("q_loss", r.q_loss), ("actor_loss", r.actor_loss), ("goal_x", r.goal[0]), ("goal_y", r.goal[1])])?;
        last = Some(r.q_loss);
    }
    save_atomic(&actor, &ckpt)?;
    save_atomic(&ugs.joint, &aux)?;
    Ok((config.steps, last))
}
