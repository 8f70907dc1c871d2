//! Five-state chains with exact dynamic-programming answers, used to check
//! the TD critic and the occupancy model against closed forms.

use nfrl_core::flow::{ConditionContext, FlowModel};
use nfrl_core::grad::{Adam, AdamConfig, Matrix};
use nfrl_core::objectives::cosine_lr;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::critic::{critic_update_with, CriticBatch, CriticConfig, CriticNet};
use crate::data::{ReplayBuffer, Trajectory};
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::Result;
use crate::ugs::{UgsConfig, UgsState};

pub const CHAIN_STATES: usize = 5;
/// The two chain actions are embedded as `(±PROBE_ACTION, 0)`.
pub const PROBE_ACTION: f64 = 0.75;

fn chain_action<R: Rng>(rng: &mut R, advance_prob: f64) -> [f64; ACTION_DIM] {
    let sign = if rng.random_bool(advance_prob) { 1.0 } else { -1.0 };
    [sign * PROBE_ACTION, 0.0]
}

fn one_hot(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; CHAIN_STATES];
    v[i] = 1.0;
    v
}

/// Solves `x = b + A x` for a small dense system by Gaussian elimination.
fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - a[i][j]).chain([b[i]]).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

/// Chain MDP: `a₀ > 0` advances, otherwise the agent stays; entering the last
/// state pays 1 and terminates. The evaluated policy advances with probability `advance_prob`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainMdp {
    pub gamma: f64,
    pub advance_prob: f64,
}

impl ChainMdp {
    pub fn step(&self, s: usize, a0: f64) -> (usize, f64, bool) {
        if a0 > 0.0 {
            let n = s + 1;
            if n == CHAIN_STATES - 1 {
                (n, 1.0, true)
            } else {
                (n, 0.0, false)
            }
        } else {
            (s, 0.0, false)
        }
    }

    /// Exact `Q(s, advance)` and `Q(s, stay)` for the non-terminal states.
    pub fn exact_q(&self) -> Vec<[f64; 2]> {
        let n = CHAIN_STATES - 1;
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for s in 0..n {
            for (a0, w) in [(1.0, self.advance_prob), (-1.0, 1.0 - self.advance_prob)] {
                let (s2, r, done) = self.step(s, a0);
                b[s] += w * r;
                if !done {
                    a[s][s2] += w * self.gamma;
                }
            }
        }
        let v = solve(&a, &b);
        (0..n)
            .map(|s| {
                let q = |a0: f64| {
                    let (s2, r, done) = self.step(s, a0);
                    r + if done { 0.0 } else { self.gamma * v[s2] }
                };
                [q(1.0), q(-1.0)]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainCriticSettings {
    pub gamma: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub tau: f64,
    pub hidden: Vec<usize>,
    /// Probability that the evaluated policy's next action advances.
    pub advance_prob: f64,
    pub seed: u64,
}

impl Default for ChainCriticSettings {
    fn default() -> Self {
        Self { gamma: 0.9, steps: 4000, batch_size: 256, lr: 1e-3, lr_final: 1e-5, tau: 0.05, hidden: vec![64, 64], advance_prob: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainCriticReport {
    /// `(state, probe a₀, learned Q1, exact Q)`.
    pub rows: Vec<(usize, f64, f64, f64)>,
    pub max_abs_error: f64,
}

/// Trains twin critics by TD on chain transitions with uniform behavior
/// actions and compares Q1 of the fixed evaluated policy with the exact values.
pub fn chain_critic_check(settings: &ChainCriticSettings) -> Result<ChainCriticReport> {
    let mdp = ChainMdp { gamma: settings.gamma, advance_prob: settings.advance_prob };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut critic = CriticNet::new(CriticConfig { tau: settings.tau, ..CriticConfig::new(CHAIN_STATES + ACTION_DIM, settings.hidden.clone(), settings.seed) })?;
    let mut adam = Adam::new(critic.num_params(), AdamConfig { lr: settings.lr, ..AdamConfig::default() });
    for step in 0..settings.steps {
        let n = settings.batch_size;
        let (mut s, mut a, mut r, mut s2, mut d, mut a2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let st = rng.random_range(0..CHAIN_STATES - 1);
            let act = chain_action(&mut rng, 0.5);
            let (nx, rew, done) = mdp.step(st, act[0]);
            s.extend(one_hot(st));
            a.extend(act);
            r.push(rew);
            s2.extend(one_hot(nx));
            d.push(done);
            a2.extend(chain_action(&mut rng, settings.advance_prob));
        }
        let batch = CriticBatch {
            states: Matrix::from_vec(n, CHAIN_STATES, s),
            actions: Matrix::from_vec(n, ACTION_DIM, a),
            rewards: r,
            next_states: Matrix::from_vec(n, CHAIN_STATES, s2),
            dones: d,
        };
        let lr = cosine_lr(step, settings.steps, settings.lr, settings.lr_final);
        critic_update_with(&mut critic, &mut adam, &batch, &Matrix::from_vec(n, ACTION_DIM, a2), settings.gamma, lr)?;
    }
    let exact = mdp.exact_q();
    let mut rows = Vec::new();
    for (s, q) in exact.iter().enumerate() {
        for (k, a0) in [PROBE_ACTION, -PROBE_ACTION].into_iter().enumerate() {
            let input: Vec<f64> = one_hot(s).into_iter().chain([a0, 0.0]).collect();
            let learned = critic.q1_values(&Matrix::from_vec(1, input.len(), input))?[0];
            rows.push((s, a0, learned, q[k]));
        }
    }
    let max_abs_error = rows.iter().map(|r| (r.2 - r.3).abs()).fold(0.0, f64::max);
    Ok(ChainCriticReport { rows, max_abs_error })
}

/// Position of reflecting-chain state `i`.
pub fn chain_position(i: usize) -> [f64; 2] {
    [i as f64 * 0.25, 0.0]
}

/// Reflecting random walk: `a₀ > 0` moves right, otherwise left; the ends reflect to themselves.
pub fn reflect_step(s: usize, a0: f64) -> usize {
    if a0 > 0.0 {
        (s + 1).min(CHAIN_STATES - 1)
    } else {
        s.saturating_sub(1)
    }
}

/// `(1 − γ) Σ_{k≥1} γ^{k−1} P(s_{t+k} = · | s_t = s, a_t = a)` under the uniform-direction policy.
pub fn exact_occupancy(s: usize, a0: f64, gamma: f64) -> Vec<f64> {
    let n = CHAIN_STATES;
    let mut p = vec![vec![0.0; n]; n];
    for (i, row) in p.iter_mut().enumerate() {
        row[reflect_step(i, 1.0)] += 0.5;
        row[reflect_step(i, -1.0)] += 0.5;
    }
    let s1 = reflect_step(s, a0);
    let mut out = vec![0.0; n];
    let mut dist = vec![0.0; n];
    dist[s1] = 1.0;
    let mut w = 1.0 - gamma;
    for _ in 0..10_000 {
        for i in 0..n {
            out[i] += w * dist[i];
        }
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += dist[i] * p[i][j];
            }
        }
        dist = next;
        w *= gamma;
        if w < 1e-17 {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancySettings {
    pub gamma: f64,
    pub trajectories: usize,
    pub length: usize,
    pub steps: usize,
    pub blocks: usize,
    pub channels: usize,
    pub lr: f64,
    pub seed: u64,
    /// Grid cells per unit length for the integration.
    pub grid_density: usize,
}

impl Default for OccupancySettings {
    fn default() -> Self {
        Self { gamma: 0.8, trajectories: 20, length: 1000, steps: 10_000, blocks: 8, channels: 64, lr: 5e-4, seed: 0, grid_density: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyReport {
    /// `(state, probe a₀, total variation)`.
    pub rows: Vec<(usize, f64, f64)>,
    pub max_tv: f64,
    /// Grid integral of the masked (marginal) density.
    pub marginal_mass: f64,
}

fn chain_state(i: usize) -> [f64; STATE_DIM] {
    let p = chain_position(i);
    [p[0], p[1], 0.0, 0.0]
}

/// Random-walk data on the chain in the point-mass state layout.
pub fn chain_buffer<R: Rng>(trajectories: usize, length: usize, rng: &mut R) -> ReplayBuffer {
    let mut trajs = Vec::with_capacity(trajectories);
    for ep in 0..trajectories {
        let mut s = rng.random_range(0..CHAIN_STATES);
        let mut states = chain_state(s).to_vec();
        let mut actions = Vec::with_capacity(length * ACTION_DIM);
        for _ in 0..length {
            let a = chain_action(rng, 0.5);
            s = reflect_step(s, a[0]);
            actions.extend(a);
            states.extend(chain_state(s));
        }
        trajs.push(Trajectory {
            states: Matrix::from_vec(length + 1, STATE_DIM, states),
            actions: Matrix::from_vec(length, ACTION_DIM, actions),
            rewards: vec![0.0; length],
            dones: vec![false; length],
            episode_id: ep as u64,
            mode: 0,
        });
    }
    ReplayBuffer::from_trajectories(trajs)
}

/// Probability mass of a goal density on each state's Voronoi cell (split at
/// midpoints along x), integrated by the midpoint rule over a padded box.
fn cell_masses(model: &FlowModel, ctx: &ConditionContext, density: usize) -> Result<(Vec<f64>, f64)> {
    let (x0, x1, y0, y1) = (-0.5, 1.5, -0.5, 0.5);
    let nx = ((x1 - x0) * density as f64) as usize;
    let ny = ((y1 - y0) * density as f64) as usize;
    let (hx, hy) = ((x1 - x0) / nx as f64, (y1 - y0) / ny as f64);
    let mut pts = Vec::with_capacity(nx * ny * 2);
    for i in 0..nx {
        for j in 0..ny {
            pts.push(x0 + (i as f64 + 0.5) * hx);
            pts.push(y0 + (j as f64 + 0.5) * hy);
        }
    }
    let pts = Matrix::from_vec(nx * ny, 2, pts);
    let ctxs = vec![ctx.clone(); nx * ny];
    let lp = model.log_prob_batch(&pts, &ctxs)?;
    let mut mass = vec![0.0; CHAIN_STATES];
    let mut total = 0.0;
    for (k, l) in lp.iter().enumerate() {
        let w = l.exp() * hx * hy;
        let x = pts.get(k, 0);
        let cell = ((x / 0.25).round().max(0.0) as usize).min(CHAIN_STATES - 1);
        mass[cell] += w;
        total += w;
    }
    Ok((mass, total))
}

/// Fits the joint occupancy flow on random-walk data and compares its cell
/// masses with the exact discounted occupancy for every `(state, ±probe)`.
pub fn occupancy_check(settings: &OccupancySettings) -> Result<OccupancyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let buffer = chain_buffer(settings.trajectories, settings.length, &mut rng);
    let config = UgsConfig { gamma: settings.gamma, lr: settings.lr, ..UgsConfig::default() };
    let mut ugs = UgsState::with_size(settings.blocks, settings.channels, settings.channels, config, settings.seed)?;
    for step in 0..settings.steps {
        ugs.config.lr = cosine_lr(step, settings.steps, settings.lr, settings.lr * 0.02);
        crate::ugs::gcrl_q_update(&mut ugs, &buffer, &mut rng)?;
    }
    let mut rows = Vec::new();
    for s in 0..CHAIN_STATES {
        for a0 in [PROBE_ACTION, -PROBE_ACTION] {
            let ctx = ConditionContext::new(chain_state(s).iter().copied().chain([a0, 0.0]).collect());
            let (mass, _) = cell_masses(&ugs.joint, &ctx, settings.grid_density)?;
            let exact = exact_occupancy(s, a0, settings.gamma);
            let tv = 0.5 * mass.iter().zip(&exact).map(|(m, e)| (m - e).abs()).sum::<f64>();
            rows.push((s, a0, tv));
        }
    }
    let (_, marginal_mass) = cell_masses(&ugs.joint, &ConditionContext::masked(STATE_DIM + ACTION_DIM), settings.grid_density)?;
    let max_tv = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(OccupancyReport { rows, max_tv, marginal_mass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_dp_matches_hand_values() {
        let q = ChainMdp { gamma: 0.9, advance_prob: 0.5 }.exact_q();
        let v3 = 0.5 / (1.0 - 0.45);
        assert!((q[3][0] - 1.0).abs() < 1e-12);
        assert!((q[3][1] - 0.9 * v3).abs() < 1e-12);
        let v2 = 0.5 * 0.9 * v3 / (1.0 - 0.45);
        assert!((q[2][0] - 0.9 * v3).abs() < 1e-12);
        assert!((q[2][1] - 0.9 * v2).abs() < 1e-12);
    }

    #[test]
    fn always_advancing_policy_discounts_by_distance() {
        let g: f64 = 0.9;
        let q = ChainMdp { gamma: g, advance_prob: 1.0 }.exact_q();
        for (s, row) in q.iter().enumerate() {
            assert!((row[0] - g.powi(3 - s as i32)).abs() < 1e-12);
            assert!((row[1] - g.powi(4 - s as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn occupancy_is_a_distribution_with_known_first_step() {
        for s in 0..CHAIN_STATES {
            let d = exact_occupancy(s, 1.0, 0.8);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d[reflect_step(s, 1.0)] >= 0.2 - 1e-12);
        }
        let d = exact_occupancy(2, -1.0, 1e-9);
        assert!((d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn occupancy_matches_matrix_inverse() {
        let gamma = 0.8;
        let n = CHAIN_STATES;
        let mut p = vec![vec![0.0; n]; n];
        for (i, row) in p.iter_mut().enumerate() {
            row[reflect_step(i, 1.0)] += 0.5;
            row[reflect_step(i, -1.0)] += 0.5;
        }
        // Row s1 of (1 − γ)(I − γP)⁻¹ via solving (I − γPᵀ) x = (1 − γ) e_{s1}.
        let s1 = reflect_step(3, 1.0);
        let pt: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| gamma * p[j][i]).collect()).collect();
        let mut e = vec![0.0; n];
        e[s1] = 1.0 - gamma;
        let x = solve(&pt, &e);
        for (a, b) in x.iter().zip(exact_occupancy(3, 1.0, gamma)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
