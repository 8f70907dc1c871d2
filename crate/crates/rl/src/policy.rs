//! Policies and batched evaluation rollouts.

use nfrl_core::flow::{ConditionContext, FlowModel};
use nfrl_core::grad::{Matrix, Mlp, ParamStore};
use nfrl_core::objectives::denoise_batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::env::{EnvConfig, Maze, MazeId, PointMassEnv, ACTION_DIM, GOAL_DIM, STATE_DIM};
use crate::error::{Result, RlError};
use crate::expert::{ExpertConfig, ScriptedExpert};

/// What a learned policy is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyInput {
    State,
    StateGoal,
}

impl PolicyInput {
    pub fn cond_dim(self) -> usize {
        match self {
            PolicyInput::State => STATE_DIM,
            PolicyInput::StateGoal => STATE_DIM + GOAL_DIM,
        }
    }

    pub fn from_cond_dim(d: usize) -> Result<Self> {
        match d {
            STATE_DIM => Ok(PolicyInput::State),
            x if x == STATE_DIM + GOAL_DIM => Ok(PolicyInput::StateGoal),
            other => Err(RlError::Config(format!("no policy input has width {other}"))),
        }
    }

    pub fn context(self, s: &[f64], g: &[f64]) -> Vec<f64> {
        match self {
            PolicyInput::State => s[..STATE_DIM].to_vec(),
            PolicyInput::StateGoal => s[..STATE_DIM].iter().chain(&g[..GOAL_DIM]).copied().collect(),
        }
    }
}

/// Maps a batch of observations to actions. Row `i` may only consume randomness from `rngs[i]`.
pub trait Policy: Sync {
    fn act(&self, states: &[[f64; STATE_DIM]], goals: &[[f64; GOAL_DIM]], rngs: &mut [ChaCha8Rng]) -> Result<Vec<[f64; ACTION_DIM]>>;
}

/// A conditional flow over actions.
#[derive(Debug, Clone)]
pub struct NfPolicy {
    pub model: FlowModel,
    pub input: PolicyInput,
    /// Training noise std used by the denoising correction; `None` disables it.
    pub denoise: Option<f64>,
}

impl NfPolicy {
    pub fn new(model: FlowModel, denoise: Option<f64>) -> Result<Self> {
        if model.dim() != ACTION_DIM {
            return Err(RlError::Config(format!("policy flow has dim {}, actions have {ACTION_DIM}", model.dim())));
        }
        let input = PolicyInput::from_cond_dim(model.cond_dim())?;
        Ok(Self { model, input, denoise })
    }

    pub fn contexts(&self, states: &[[f64; STATE_DIM]], goals: &[[f64; GOAL_DIM]]) -> Vec<ConditionContext> {
        states.iter().zip(goals).map(|(s, g)| ConditionContext::new(self.input.context(s, g))).collect()
    }
}

impl Policy for NfPolicy {
    fn act(&self, states: &[[f64; STATE_DIM]], goals: &[[f64; GOAL_DIM]], rngs: &mut [ChaCha8Rng]) -> Result<Vec<[f64; ACTION_DIM]>> {
        let ctxs = self.contexts(states, goals);
        let z: Vec<f64> = rngs.iter_mut().flat_map(|r| (0..ACTION_DIM).map(|_| r.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()).collect();
        let z = Matrix::from_vec(states.len(), ACTION_DIM, z);
        let (mut a, _) = self.model.sample_from_noise(&z, &ctxs)?;
        if let Some(sigma) = self.denoise {
            a = denoise_batch(&self.model, &a, &ctxs, sigma)?;
        }
        Ok(a.iter_rows().map(|r| [r[0], r[1]]).collect())
    }
}

/// Diagonal Gaussian over actions; evaluated with its mean unless `stochastic`.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub params: ParamStore,
    pub input: PolicyInput,
    pub stochastic: bool,
}

impl GaussianPolicy {
    /// Row-wise `(mean, log_std)` for the given contexts.
    pub fn mean_log_std(&self, ctx: &[f64]) -> Result<([f64; ACTION_DIM], [f64; ACTION_DIM])> {
        let out = self.net.eval(&self.params, ctx)?;
        Ok(([out[0], out[1]], [out[2], out[3]]))
    }
}

impl Policy for GaussianPolicy {
    fn act(&self, states: &[[f64; STATE_DIM]], goals: &[[f64; GOAL_DIM]], rngs: &mut [ChaCha8Rng]) -> Result<Vec<[f64; ACTION_DIM]>> {
        let mut out = Vec::with_capacity(states.len());
        for ((s, g), rng) in states.iter().zip(goals).zip(rngs.iter_mut()) {
            let (mu, log_std) = self.mean_log_std(&self.input.context(s, g))?;
            if self.stochastic {
                let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                out.push([mu[0] + log_std[0].exp() * e[0], mu[1] + log_std[1].exp() * e[1]]);
            } else {
                out.push(mu);
            }
        }
        Ok(out)
    }
}

/// The scripted expert of one route family, steering toward whatever goal it is given.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    maze: Maze,
    env: EnvConfig,
    mode: usize,
    config: ExpertConfig,
}

impl ExpertPolicy {
    pub fn new(maze: MazeId, env: EnvConfig, mode: usize, config: ExpertConfig) -> Self {
        Self { maze: Maze::new(maze), env, mode, config }
    }
}

impl Policy for ExpertPolicy {
    fn act(&self, states: &[[f64; STATE_DIM]], goals: &[[f64; GOAL_DIM]], rngs: &mut [ChaCha8Rng]) -> Result<Vec<[f64; ACTION_DIM]>> {
        states
            .iter()
            .zip(goals)
            .zip(rngs.iter_mut())
            .map(|((s, g), rng)| {
                let e = ScriptedExpert::toward(&self.maze, &self.env, self.mode, self.maze.start, *g, self.config)?;
                Ok(e.action(s, rng))
            })
            .collect()
    }
}

/// Uniform actions on `[−1, 1]²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&self, states: &[[f64; STATE_DIM]], _goals: &[[f64; GOAL_DIM]], rngs: &mut [ChaCha8Rng]) -> Result<Vec<[f64; ACTION_DIM]>> {
        Ok(rngs.iter_mut().take(states.len()).map(|r| [r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0)]).collect())
    }
}

/// Which goal each evaluation episode commands.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalGoals {
    /// The maze's task goal.
    Task,
    /// One goal per episode, cycled if shorter than the episode count.
    Fixed(Vec<[f64; GOAL_DIM]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
    pub goals: EvalGoals,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { episodes: 50, seed: 0, workers: 1, goals: EvalGoals::Task }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub index: usize,
    pub success: bool,
    pub episode_return: f64,
    pub length: usize,
    pub final_distance: f64,
    /// Route family the visited cells match, if any.
    pub route: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }

    pub fn return_mean(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.episode_return).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn return_std(&self) -> f64 {
        let n = self.episodes.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.return_mean();
        (self.episodes.iter().map(|e| (e.episode_return - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    /// Success rate among episodes whose route matched `mode`, and their count.
    pub fn success_on_route(&self, mode: usize) -> (f64, usize) {
        let on: Vec<_> = self.episodes.iter().filter(|e| e.route == Some(mode)).collect();
        if on.is_empty() {
            return (0.0, 0);
        }
        (on.iter().filter(|e| e.success).count() as f64 / on.len() as f64, on.len())
    }
}

/// Seeds of the environment and policy streams of episode `i`.
pub fn episode_rngs(seed: u64, i: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut env = ChaCha8Rng::seed_from_u64(seed);
    env.set_stream(2 * i as u64);
    let mut pol = ChaCha8Rng::seed_from_u64(seed);
    pol.set_stream(2 * i as u64 + 1);
    (env, pol)
}

/// Runs `settings.episodes` episodes, all active episodes of a worker stepping in one batch.
pub fn evaluate_policy<P: Policy + ?Sized>(policy: &P, maze: MazeId, env: &EnvConfig, settings: &EvalSettings) -> Result<EvalReport> {
    let n = settings.episodes;
    let workers = settings.workers.max(1).min(n.max(1));
    let indices: Vec<usize> = (0..n).collect();
    let chunk = n.div_ceil(workers).max(1);
    let mut records: Vec<EpisodeRecord> = Vec::with_capacity(n);
    if workers <= 1 {
        records = run_episodes(policy, maze, env, settings, &indices)?;
    } else {
        let results: Vec<Result<Vec<EpisodeRecord>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = indices.chunks(chunk).map(|ids| scope.spawn(move || run_episodes(policy, maze, env, settings, ids))).collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(RlError::State("evaluation worker panicked".into())))).collect()
        });
        for r in results {
            records.extend(r?);
        }
    }
    records.sort_by_key(|r| r.index);
    Ok(EvalReport { episodes: records })
}

fn run_episodes<P: Policy + ?Sized>(policy: &P, maze: MazeId, cfg: &EnvConfig, settings: &EvalSettings, ids: &[usize]) -> Result<Vec<EpisodeRecord>> {
    let mut envs = Vec::with_capacity(ids.len());
    let mut rngs = Vec::with_capacity(ids.len());
    let mut paths = Vec::with_capacity(ids.len());
    for &i in ids {
        let (mut env_rng, pol_rng) = episode_rngs(settings.seed, i);
        let mut env = PointMassEnv::new(maze, cfg.clone());
        let s = env.reset(&mut env_rng);
        if let EvalGoals::Fixed(goals) = &settings.goals {
            if goals.is_empty() {
                return Err(RlError::Config("fixed evaluation goals list is empty".into()));
            }
            env.set_goal(goals[i % goals.len()]);
        }
        envs.push(env);
        rngs.push(pol_rng);
        paths.push(vec![[s[0], s[1]]]);
    }
    let mut returns = vec![0.0; ids.len()];
    let mut success = vec![false; ids.len()];
    loop {
        let active: Vec<usize> = (0..envs.len()).filter(|&k| !envs[k].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let states: Vec<_> = active.iter().map(|&k| envs[k].state()).collect();
        let goals: Vec<_> = active.iter().map(|&k| envs[k].goal()).collect();
        let mut batch_rngs: Vec<ChaCha8Rng> = active.iter().map(|&k| rngs[k].clone()).collect();
        let actions = policy.act(&states, &goals, &mut batch_rngs)?;
        for ((&k, a), r) in active.iter().zip(actions).zip(batch_rngs) {
            rngs[k] = r;
            let a = if a.iter().all(|v| v.is_finite()) { a } else { [0.0; ACTION_DIM] };
            let out = envs[k].step(&a)?;
            returns[k] += out.reward;
            success[k] = out.success;
            paths[k].push([out.state[0], out.state[1]]);
        }
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(k, &i)| EpisodeRecord {
            index: i,
            success: success[k],
            episode_return: returns[k],
            length: envs[k].steps_taken(),
            final_distance: envs[k].distance_to_goal(),
            route: envs[k].maze().classify_route(paths[k].iter().copied()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_episodes_gives_an_empty_report() {
        let r = evaluate_policy(&RandomPolicy, MazeId::Open, &EnvConfig::default(), &EvalSettings { episodes: 0, ..Default::default() }).unwrap();
        assert!(r.episodes.is_empty());
        assert_eq!(r.success_rate(), 0.0);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = EnvConfig::default();
        let s1 = EvalSettings { episodes: 7, seed: 5, workers: 1, goals: EvalGoals::Task };
        let s3 = EvalSettings { workers: 3, ..s1.clone() };
        let a = evaluate_policy(&RandomPolicy, MazeId::UMaze, &cfg, &s1).unwrap();
        let b = evaluate_policy(&RandomPolicy, MazeId::UMaze, &cfg, &s3).unwrap();
        assert_eq!(a, b);
    }
}
