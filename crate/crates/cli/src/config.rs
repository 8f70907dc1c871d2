//! Run configuration: per-algorithm defaults, layered `key=value` files and
//! flag overrides, last writer wins.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nfrl_core::kv::KvText;
use nfrl_rl::MazeId;

use crate::error::CliError;

/// Keys with this prefix carry run metadata and are skipped when a manifest is read back as a config.
pub const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    DensityMle,
    DensityVi,
    Bc,
    Gcbc,
    Rlbc,
    Ugs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [Algorithm::DensityMle, Algorithm::DensityVi, Algorithm::Bc, Algorithm::Gcbc, Algorithm::Rlbc, Algorithm::Ugs];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::DensityMle => "density-mle",
            Algorithm::DensityVi => "density-vi",
            Algorithm::Bc => "bc",
            Algorithm::Gcbc => "gcbc",
            Algorithm::Rlbc => "rlbc",
            Algorithm::Ugs => "ugs",
        }
    }

    /// Trains a policy that `eval` can roll out.
    pub fn is_policy(self) -> bool {
        matches!(self, Algorithm::Bc | Algorithm::Gcbc | Algorithm::Rlbc | Algorithm::Ugs)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            format!("unknown algorithm '{s}' (expected one of {})", names.join(", "))
        })
    }
}

/// Discount presets of the future-goal distribution.
pub const GAMMA_FUT_PRESETS: [f64; 2] = [0.97, 0.99];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Built-in density name (`two-moons`, `mixture`, `ring`, `gaussian`) or a dataset file.
    pub dataset: String,
    pub env: MazeId,

    pub blocks: usize,
    pub channels: usize,
    pub coupling_layers: usize,
    pub noise_std: f64,
    pub rep_dims: usize,
    pub encoder_layers: usize,
    pub encoder_width: usize,

    pub alpha_bc: f64,
    pub lambda_ent: f64,
    pub gamma: f64,
    pub gamma_fut: f64,
    pub mask_prob: f64,
    pub candidate_count: usize,
    pub goal_noise: f64,

    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub critic_lr: f64,
    pub critic_hidden: Vec<usize>,
    pub tau: f64,
    /// Gradient steps per collected episode (ugs).
    pub grad_steps: usize,
    /// Training samples drawn from a built-in density.
    pub samples: usize,

    pub seed: u64,
    pub steps: usize,
    /// Checkpoint and evaluation period in steps; 0 disables both.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl RunConfig {
    pub fn defaults(algorithm: Algorithm) -> Self {
        let base = Self {
            algorithm,
            dataset: String::new(),
            env: MazeId::UMaze,
            blocks: 6,
            channels: 512,
            coupling_layers: 2,
            noise_std: 0.1,
            rep_dims: 512,
            encoder_layers: 4,
            encoder_width: 512,
            alpha_bc: nfrl_rl::rlbc::ALPHA_PRESETS[0],
            lambda_ent: 0.0,
            gamma: 0.99,
            gamma_fut: GAMMA_FUT_PRESETS[0],
            mask_prob: 0.1,
            candidate_count: 1024,
            goal_noise: 0.05,
            batch_size: 256,
            lr: 3e-4,
            lr_final: 3e-4,
            critic_lr: 3e-4,
            critic_hidden: vec![512; 4],
            tau: 0.005,
            grad_steps: 64,
            samples: 10_000,
            seed: 0,
            steps: 100_000,
            eval_every: 0,
            eval_episodes: 50,
        };
        match algorithm {
            Algorithm::Bc => Self { blocks: 12, dataset: "data/u_maze.nfds".into(), ..base },
            Algorithm::Gcbc | Algorithm::Rlbc => Self { dataset: "data/u_maze.nfds".into(), ..base },
            Algorithm::Ugs => Self { channels: 256, encoder_width: 1024, env: MazeId::BigMaze, steps: 200, ..base },
            Algorithm::DensityMle => Self { dataset: "two-moons".into(), rep_dims: 0, encoder_layers: 0, encoder_width: 0, ..base },
            Algorithm::DensityVi => Self { dataset: "ring".into(), rep_dims: 0, encoder_layers: 0, encoder_width: 0, noise_std: 0.0, ..base },
        }
    }

    /// Builds a config from layered files and then `key=value` overrides.
    /// The algorithm is resolved first so that the matching defaults sit underneath.
    pub fn from_layers(files: &[&Path], overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut merged = KvText::new();
        for f in files {
            let text = std::fs::read_to_string(f).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))?;
            let kv = KvText::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))?;
            merged.overlay(&kv);
        }
        for (k, v) in overrides {
            merged.set(k, v);
        }
        let algorithm = match merged.get("algorithm") {
            Some(a) => a.parse::<Algorithm>().map_err(|e| field_error("algorithm", &e))?,
            None => return Err(field_error("algorithm", "not set (use --algo or an algorithm= line)")),
        };
        let mut config = Self::defaults(algorithm);
        for (k, v) in merged.entries() {
            if k.starts_with(META_PREFIX) {
                continue;
            }
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Assigns one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
            value.parse().map_err(|_| field_error(key, &format!("cannot parse '{value}'")))
        }
        match key {
            "algorithm" => self.algorithm = value.parse().map_err(|e: String| field_error(key, &e))?,
            "dataset" => self.dataset = value.to_string(),
            "env" => self.env = value.parse().map_err(|e: nfrl_rl::RlError| field_error(key, &e.to_string()))?,
            "blocks" => self.blocks = p(key, value)?,
            "channels" => self.channels = p(key, value)?,
            "coupling_layers" => self.coupling_layers = p(key, value)?,
            "noise_std" => self.noise_std = p(key, value)?,
            "rep_dims" => self.rep_dims = p(key, value)?,
            "encoder_layers" => self.encoder_layers = p(key, value)?,
            "encoder_width" => self.encoder_width = p(key, value)?,
            "alpha_bc" => self.alpha_bc = p(key, value)?,
            "lambda_ent" => self.lambda_ent = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "gamma_fut" => self.gamma_fut = p(key, value)?,
            "mask_prob" => self.mask_prob = p(key, value)?,
            "candidate_count" => self.candidate_count = p(key, value)?,
            "goal_noise" => self.goal_noise = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "lr_final" => self.lr_final = p(key, value)?,
            "critic_lr" => self.critic_lr = p(key, value)?,
            "critic_hidden" => {
                self.critic_hidden = value.split(',').filter(|s| !s.is_empty()).map(|s| p(key, s.trim())).collect::<Result<_, _>>()?
            }
            "tau" => self.tau = p(key, value)?,
            "grad_steps" => self.grad_steps = p(key, value)?,
            "samples" => self.samples = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "eval_episodes" => self.eval_episodes = p(key, value)?,
            _ => return Err(field_error(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let unit = |k: &str, v: f64| if (0.0..=1.0).contains(&v) { Ok(()) } else { Err(field_error(k, &format!("{v} outside [0, 1]"))) };
        let discount = |k: &str, v: f64| if (0.0..1.0).contains(&v) { Ok(()) } else { Err(field_error(k, &format!("{v} outside [0, 1)"))) };
        let positive = |k: &str, v: usize| if v > 0 { Ok(()) } else { Err(field_error(k, "must be ≥ 1")) };
        let nonneg = |k: &str, v: f64| if v >= 0.0 && v.is_finite() { Ok(()) } else { Err(field_error(k, &format!("{v} must be finite and ≥ 0"))) };
        positive("blocks", self.blocks)?;
        positive("channels", self.channels)?;
        positive("batch_size", self.batch_size)?;
        positive("candidate_count", self.candidate_count)?;
        nonneg("noise_std", self.noise_std)?;
        nonneg("goal_noise", self.goal_noise)?;
        nonneg("alpha_bc", self.alpha_bc)?;
        nonneg("lambda_ent", self.lambda_ent)?;
        nonneg("lr", self.lr)?;
        nonneg("lr_final", self.lr_final)?;
        nonneg("critic_lr", self.critic_lr)?;
        unit("mask_prob", self.mask_prob)?;
        unit("tau", self.tau)?;
        discount("gamma", self.gamma)?;
        discount("gamma_fut", self.gamma_fut)?;
        if self.algorithm.is_policy() || self.algorithm == Algorithm::Ugs {
            positive("rep_dims", self.rep_dims)?;
            positive("encoder_width", self.encoder_width.max(usize::from(self.encoder_layers == 0)))?;
        }
        if self.algorithm == Algorithm::Rlbc && self.critic_hidden.is_empty() {
            return Err(field_error("critic_hidden", "needs at least one layer"));
        }
        if self.dataset.is_empty() && self.algorithm != Algorithm::Ugs {
            return Err(field_error("dataset", "not set"));
        }
        Ok(())
    }

    /// Every field as text, in a fixed order.
    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("algorithm", self.algorithm);
        kv.set("dataset", &self.dataset);
        kv.set("env", self.env);
        kv.set("blocks", self.blocks);
        kv.set("channels", self.channels);
        kv.set("coupling_layers", self.coupling_layers);
        kv.set("noise_std", self.noise_std);
        kv.set("rep_dims", self.rep_dims);
        kv.set("encoder_layers", self.encoder_layers);
        kv.set("encoder_width", self.encoder_width);
        kv.set("alpha_bc", self.alpha_bc);
        kv.set("lambda_ent", self.lambda_ent);
        kv.set("gamma", self.gamma);
        kv.set("gamma_fut", self.gamma_fut);
        kv.set("mask_prob", self.mask_prob);
        kv.set("candidate_count", self.candidate_count);
        kv.set("goal_noise", self.goal_noise);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("lr_final", self.lr_final);
        kv.set("critic_lr", self.critic_lr);
        kv.set("critic_hidden", self.critic_hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
        kv.set("tau", self.tau);
        kv.set("grad_steps", self.grad_steps);
        kv.set("samples", self.samples);
        kv.set("seed", self.seed);
        kv.set("steps", self.steps);
        kv.set("eval_every", self.eval_every);
        kv.set("eval_episodes", self.eval_episodes);
        kv
    }
}

fn field_error(field: &str, msg: &str) -> CliError {
    CliError::Usage(format!("config field '{field}': {msg}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_form_round_trips() {
        for a in Algorithm::ALL {
            let mut c = RunConfig::defaults(a);
            c.critic_hidden = vec![3, 5];
            c.noise_std = 0.123456789012345;
            let mut back = RunConfig::defaults(Algorithm::Bc);
            for (k, v) in c.to_kv().entries() {
                back.set(k, v).unwrap();
            }
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_key_names_the_field() {
        let err = RunConfig::defaults(Algorithm::Bc).set("blokcs", "3").unwrap_err();
        assert!(err.to_string().contains("blokcs"));
        let err = RunConfig::defaults(Algorithm::Bc).set("blocks", "three").unwrap_err();
        assert!(err.to_string().contains("blocks"));
    }

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        std::fs::write(&a, "algorithm=gcbc\nseed=1\nsteps=10\n").unwrap();
        std::fs::write(&b, "seed=2\n").unwrap();
        let c = RunConfig::from_layers(&[&a, &b], &[("steps".into(), "3".into())]).unwrap();
        assert_eq!((c.algorithm, c.seed, c.steps), (Algorithm::Gcbc, 2, 3));
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut c = RunConfig::defaults(Algorithm::Rlbc);
        c.gamma = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("gamma"));
        let mut c = RunConfig::defaults(Algorithm::Ugs);
        c.mask_prob = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("mask_prob"));
    }
}
