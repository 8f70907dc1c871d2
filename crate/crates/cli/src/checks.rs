//! Oracle check suites behind `check`: finite-difference Jacobians and
//! gradients, quadrature, round trips, tabular DP and exact occupancy.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nfrl_core::flow::{ConditionContext, FlowConfig, FlowModel};
use nfrl_core::grad::fd::{central_difference, central_jacobian, log_abs_det, max_relative_error, RELATIVE_FLOOR};
use nfrl_core::grad::{Matrix, Triangle};
use nfrl_core::objectives::{mle_loss, vi_loss_from_noise, MleBatch};
use nfrl_rl::critic::{critic_loss, CriticBatch, CriticConfig, CriticNet};
use nfrl_rl::rlbc::{actor_loss, ActorBatch, ActorLossWeights};
use nfrl_rl::tabular::{chain_critic_check, occupancy_check, ChainCriticSettings, OccupancySettings};
use nfrl_rl::ugs::gcrl_actor_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::ring_log_density;
use crate::error::CliError;
use nfrl_core::objectives::FnTarget;

pub const JACOBIAN_TOL: f64 = 1e-5;
pub const ROUND_TRIP_TOL: f64 = 1e-9;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const MASS_TOL: f64 = 0.02;
pub const CRITIC_TOL: f64 = 0.01;
pub const OCCUPANCY_TV_TOL: f64 = 0.05;
/// Finite-difference step of the gradient and Jacobian checks.
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Jacobian,
    Gradients,
    Quadrature,
    Invertibility,
    Tabular,
    Occupancy,
    All,
}

impl Suite {
    pub const EACH: [Suite; 6] = [Suite::Jacobian, Suite::Gradients, Suite::Quadrature, Suite::Invertibility, Suite::Tabular, Suite::Occupancy];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Jacobian => "jacobian",
            Suite::Gradients => "gradients",
            Suite::Quadrature => "quadrature",
            Suite::Invertibility => "invertibility",
            Suite::Tabular => "tabular",
            Suite::Occupancy => "occupancy",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Suite::EACH.into_iter().chain([Suite::All]).find(|x| x.name() == s).ok_or_else(|| {
            CliError::Usage(format!("unknown check suite '{s}' (expected jacobian, gradients, quadrature, invertibility, tabular, occupancy or all)"))
        })
    }
}

/// How a measurement is compared with its threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Below(f64),
    Within { target: f64, tol: f64 },
}

impl Bound {
    pub fn holds(self, v: f64) -> bool {
        match self {
            Bound::Below(t) => v < t,
            Bound::Within { target, tol } => (v - target).abs() <= tol,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Below(t) => write!(f, "< {t:e}"),
            Bound::Within { target, tol } => write!(f, "{target} ± {tol}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub seconds: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.bound.holds(self.measured)
    }
}

pub fn run_suite(suite: Suite, quick: bool) -> Result<Vec<CheckRow>, CliError> {
    let suites: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    let mut rows = Vec::new();
    for s in suites {
        let t0 = Instant::now();
        let mut part = match s {
            Suite::Jacobian => jacobian(quick),
            Suite::Gradients => gradients()?,
            Suite::Quadrature => quadrature(quick)?,
            Suite::Invertibility => invertibility(quick),
            Suite::Tabular => tabular(quick)?,
            Suite::Occupancy => occupancy(quick)?,
            Suite::All => unreachable!("expanded above"),
        };
        let secs = t0.elapsed().as_secs_f64();
        for r in &mut part {
            r.seconds = secs;
        }
        rows.extend(part);
    }
    Ok(rows)
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<14} {:<28} {:>14} {:>18} {:>8} {:>6}\n", "suite", "check", "measured", "threshold", "secs", "result");
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:<28} {:>14.6e} {:>18} {:>8.1} {:>6}\n",
            r.suite.name(),
            r.name,
            r.measured,
            r.bound.to_string(),
            r.seconds,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}

fn row(suite: Suite, name: &str, measured: f64, bound: Bound) -> CheckRow {
    CheckRow { suite, name: name.to_string(), measured, bound, seconds: 0.0 }
}

/// Perturbs every parameter, keeping the PLU diagonal within `[0.6, 1.5]` in magnitude.
pub fn randomize(model: &mut FlowModel, seed: u64, spread: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let diag: Vec<usize> = model
        .blocks()
        .iter()
        .flat_map(|b| (0..d).map(move |i| b.linear.upper_offset() + Triangle::Upper.packed_index(d, i, i)))
        .collect();
    let p = model.params_mut().values_mut();
    for v in p.iter_mut() {
        *v += rng.random_range(-spread..spread);
    }
    for i in diag {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        p[i] = sign * rng.random_range(0.6..1.5);
    }
}

fn random_model(d: usize, cond_dim: usize, blocks: usize, seed: u64) -> FlowModel {
    let config = if cond_dim == 0 { FlowConfig::unconditional(d, blocks, 6, seed) } else { FlowConfig::conditional(d, cond_dim, 3, blocks, 6, seed) };
    let mut m = FlowModel::new(config).expect("valid small flow");
    randomize(&mut m, seed.wrapping_add(1), 0.4);
    m
}

fn random_ctx(cond_dim: usize, rng: &mut ChaCha8Rng) -> ConditionContext {
    if cond_dim == 0 {
        ConditionContext::empty()
    } else {
        ConditionContext::new((0..cond_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }
}

fn jacobian(quick: bool) -> Vec<CheckRow> {
    let n = if quick { 30 } else { 300 };
    let mut worst = 0.0f64;
    for i in 0..n as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let d = 2 + (i as usize % 5);
        let cond = i as usize % 3;
        let m = random_model(d, cond, 3, i);
        let ctx = random_ctx(cond, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, ld) = m.forward(&x, &ctx).expect("finite forward");
        let jac = central_jacobian(|p| m.forward(p, &ctx).expect("finite forward").0, &x, FD_STEP);
        worst = worst.max((ld - log_abs_det(&jac)).abs());
    }
    vec![row(Suite::Jacobian, &format!("log-det vs fd ({n} models)"), worst, Bound::Below(JACOBIAN_TOL))]
}

fn invertibility(quick: bool) -> Vec<CheckRow> {
    let n = if quick { 100 } else { 1000 };
    let (mut worst_x, mut worst_ld) = (0.0f64, 0.0f64);
    for i in 0..n as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i ^ 0x9E37);
        let d = 2 + (i as usize % 5);
        let cond = i as usize % 3;
        let m = random_model(d, cond, 1 + (i as usize % 4), i);
        let ctx = random_ctx(cond, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (z, ld) = m.forward(&x, &ctx).expect("finite forward");
        let (back, ld_inv) = m.inverse(&z, &ctx).expect("finite inverse");
        worst_x = worst_x.max(back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        worst_ld = worst_ld.max((ld + ld_inv).abs());
    }
    vec![
        row(Suite::Invertibility, &format!("x round trip ({n} models)"), worst_x, Bound::Below(ROUND_TRIP_TOL)),
        row(Suite::Invertibility, "log-det sum", worst_ld, Bound::Below(ROUND_TRIP_TOL)),
    ]
}

/// Grid mass of `exp(log p)` over `[−h, h]²` with `n²` midpoint cells.
pub fn grid_mass(model: &FlowModel, n: usize, half_width: f64) -> Result<f64, CliError> {
    let h = 2.0 * half_width / n as f64;
    let mut xs = Matrix::zeros(n * n, 2);
    for i in 0..n {
        for j in 0..n {
            xs.set(i * n + j, 0, -half_width + (i as f64 + 0.5) * h);
            xs.set(i * n + j, 1, -half_width + (j as f64 + 0.5) * h);
        }
    }
    let lp = model.log_prob_batch(&xs, &[])?;
    Ok(lp.iter().map(|v| v.exp()).sum::<f64>() * h * h)
}

fn quadrature(quick: bool) -> Result<Vec<CheckRow>, CliError> {
    let n = if quick { 200 } else { 400 };
    let mut rows = Vec::new();
    for seed in 0..3 {
        let mut m = FlowModel::new(FlowConfig::unconditional(2, 4, 16, seed))?;
        randomize(&mut m, seed + 10, 0.15);
        let mass = grid_mass(&m, n, 6.0)?;
        rows.push(row(Suite::Quadrature, &format!("mass on [-6,6]^2, model {seed}"), mass, Bound::Within { target: 1.0, tol: MASS_TOL }));
    }
    Ok(rows)
}

fn tiny_flow(cond_dim: usize, seed: u64) -> FlowModel {
    let mut c = if cond_dim == 0 { FlowConfig::unconditional(2, 2, 4, seed) } else { FlowConfig::conditional(2, cond_dim, 2, 2, 3, seed) };
    c.coupling_layers = 1;
    if cond_dim > 0 {
        c.encoder_layers = 1;
        c.encoder_width = 3;
    }
    let mut m = FlowModel::new(c).expect("valid tiny flow");
    randomize(&mut m, seed ^ 0x55, 0.4);
    m
}

fn with_params(m: &FlowModel, theta: &[f64]) -> FlowModel {
    let mut mm = m.clone();
    mm.params_mut().values_mut().copy_from_slice(theta);
    mm
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn gradients() -> Result<Vec<CheckRow>, CliError> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = |name: &str, err: f64| row(Suite::Gradients, name, err, Bound::Below(GRADIENT_TOL));

    let m = tiny_flow(0, 1);
    let batch = MleBatch { x: uniform_matrix(4, 2, &mut rng), ctx: Vec::new(), noise_std: 0.1 };
    let r = mle_loss(&m, &batch, &mut ChaCha8Rng::seed_from_u64(1))?;
    let num = central_difference(|t| mle_loss(&with_params(&m, t), &batch, &mut ChaCha8Rng::seed_from_u64(1)).map(|r| r.loss).unwrap_or(f64::NAN), m.params().values(), FD_STEP);
    rows.push(g("mle", max_relative_error(&r.grad, &num, RELATIVE_FLOOR)));

    let target = FnTarget::new(2, ring_log_density);
    let z = m.draw_noise(5, &mut rng);
    let r = vi_loss_from_noise(&m, &target, &z)?;
    let num = central_difference(|t| vi_loss_from_noise(&with_params(&m, t), &target, &z).map(|r| r.loss).unwrap_or(f64::NAN), m.params().values(), FD_STEP);
    rows.push(g("vi", max_relative_error(&r.grad, &num, RELATIVE_FLOOR)));

    let gc = tiny_flow(6, 2);
    let ctx: Vec<ConditionContext> = (0..4).map(|i| ConditionContext { raw: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), masked: i == 3 }).collect();
    let batch = MleBatch { x: uniform_matrix(4, 2, &mut rng), ctx, noise_std: 0.1 };
    let r = mle_loss(&gc, &batch, &mut ChaCha8Rng::seed_from_u64(2))?;
    let num = central_difference(|t| mle_loss(&with_params(&gc, t), &batch, &mut ChaCha8Rng::seed_from_u64(2)).map(|r| r.loss).unwrap_or(f64::NAN), gc.params().values(), FD_STEP);
    rows.push(g("conditional mle (masked row)", max_relative_error(&r.grad, &num, RELATIVE_FLOOR)));

    let mut critic = CriticNet::new(CriticConfig { action_clip: None, ..CriticConfig::new(6, vec![5], 3) })?;
    for v in critic.target.values_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let cb = CriticBatch {
        states: uniform_matrix(4, 4, &mut rng),
        actions: uniform_matrix(4, 2, &mut rng),
        rewards: vec![0.3, -1.0, 0.5, 0.0],
        next_states: uniform_matrix(4, 4, &mut rng),
        dones: vec![false, true, false, false],
    };
    let na = uniform_matrix(4, 2, &mut rng);
    let r = critic_loss(&critic, &cb, &na, 0.9)?;
    let base = critic.clone();
    let num = central_difference(
        |t| {
            let mut c = base.clone();
            c.online.values_mut().copy_from_slice(t);
            critic_loss(&c, &cb, &na, 0.9).map(|r| r.loss).unwrap_or(f64::NAN)
        },
        critic.online.values(),
        FD_STEP,
    );
    rows.push(g("critic td", max_relative_error(&r.grad, &num, RELATIVE_FLOOR)));

    let actor = tiny_flow(4, 4);
    let ab = ActorBatch { states: cb.states.clone(), actions: cb.actions.clone() };
    let z = actor.draw_noise(4, &mut rng);
    let w = ActorLossWeights { lambda_ent: 0.3, alpha_bc: 1.0 };
    critic.target = critic.online.clone();
    let r = actor_loss(&actor, &critic, &ab, &z, w)?;
    let num = central_difference(|t| actor_loss(&with_params(&actor, t), &critic, &ab, &z, w).map(|r| r.loss).unwrap_or(f64::NAN), actor.params().values(), FD_STEP);
    rows.push(g("actor (q, entropy, bc)", max_relative_error(&r.grad, &num, RELATIVE_FLOOR)));

    let gactor = tiny_flow(6, 5);
    let joint = tiny_flow(6, 6);
    let goals = uniform_matrix(4, 2, &mut rng);
    let z = gactor.draw_noise(4, &mut rng);
    let r = gcrl_actor_loss(&gactor, &joint, &cb.states, &goals, &z)?;
    let num = central_difference(|t| gcrl_actor_loss(&with_params(&gactor, t), &joint, &cb.states, &goals, &z).map(|r| r.loss).unwrap_or(f64::NAN), gactor.params().values(), FD_STEP);
    rows.push(g("goal-conditioned actor", max_relative_error(&r.grad, &num, RELATIVE_FLOOR)));
    Ok(rows)
}

fn tabular(quick: bool) -> Result<Vec<CheckRow>, CliError> {
    let settings = if quick { ChainCriticSettings { steps: 1500, ..ChainCriticSettings::default() } } else { ChainCriticSettings::default() };
    let r = chain_critic_check(&settings)?;
    Ok(vec![row(Suite::Tabular, "chain critic vs dp", r.max_abs_error, Bound::Below(CRITIC_TOL))])
}

fn occupancy(quick: bool) -> Result<Vec<CheckRow>, CliError> {
    let settings = if quick { OccupancySettings { grid_density: 50, ..OccupancySettings::default() } } else { OccupancySettings::default() };
    let r = occupancy_check(&settings)?;
    Ok(vec![
        row(Suite::Occupancy, "occupancy max tv", r.max_tv, Bound::Below(OCCUPANCY_TV_TOL)),
        row(Suite::Occupancy, "marginal mass", r.marginal_mass, Bound::Within { target: 1.0, tol: MASS_TOL }),
    ])
}
