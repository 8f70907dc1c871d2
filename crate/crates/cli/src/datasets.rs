//! Built-in 2-D densities: samplers for likelihood training and unnormalized
//! targets for variational fitting, plus a plain-text point file format.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nfrl_core::grad::Matrix;
use nfrl_core::kv::KvText;
use nfrl_core::objectives::{FnTarget, GaussianTarget, ViTarget};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::CliError;

pub const POINTS_MAGIC: &str = "NFRL-POINTS";

/// Noise std of the two-moons generator.
pub const MOONS_NOISE: f64 = 0.05;
/// Component means `±MIXTURE_OFFSET` along the first axis, unit covariance.
pub const MIXTURE_OFFSET: f64 = 2.0;
pub const RING_RADIUS: f64 = 2.0;
/// `log p̃(x) = −RING_SHARPNESS (|x| − RING_RADIUS)²`.
pub const RING_SHARPNESS: f64 = 4.0;
pub const GAUSSIAN_TARGET_MEAN: [f64; 2] = [3.0, -2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    TwoMoons,
    Mixture,
    Ring,
    Gaussian,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [Builtin::TwoMoons, Builtin::Mixture, Builtin::Ring, Builtin::Gaussian];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::TwoMoons => "two-moons",
            Builtin::Mixture => "mixture",
            Builtin::Ring => "ring",
            Builtin::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Builtin::ALL.into_iter().find(|b| b.name() == s)
    }

    pub fn sample<R: Rng>(self, n: usize, rng: &mut R) -> Matrix {
        let mut out = Matrix::zeros(n, 2);
        for i in 0..n {
            let p = match self {
                Builtin::TwoMoons => moon_point(rng),
                Builtin::Mixture => {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    [sign * MIXTURE_OFFSET + rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)]
                }
                Builtin::Ring => ring_point(rng),
                Builtin::Gaussian => [GAUSSIAN_TARGET_MEAN[0] + rng.sample::<f64, _>(StandardNormal), GAUSSIAN_TARGET_MEAN[1] + rng.sample::<f64, _>(StandardNormal)],
            };
            out.row_slice_mut(i).copy_from_slice(&p);
        }
        out
    }

    /// Unnormalized log-density with its gradient; `None` for the moons, which have no closed form.
    pub fn target(self) -> Option<Box<dyn ViTarget + Send + Sync>> {
        match self {
            Builtin::TwoMoons => None,
            Builtin::Mixture => Some(Box::new(FnTarget::new(2, mixture_log_density))),
            Builtin::Ring => Some(Box::new(FnTarget::new(2, ring_log_density))),
            Builtin::Gaussian => Some(Box::new(GaussianTarget { mean: GAUSSIAN_TARGET_MEAN.to_vec(), std: 1.0 })),
        }
    }
}

fn moon_point<R: Rng>(rng: &mut R) -> [f64; 2] {
    let t = rng.random::<f64>() * std::f64::consts::PI;
    let noise = Normal::new(0.0, MOONS_NOISE).expect("positive std");
    let (x, y) = if rng.random::<bool>() { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
    [x + noise.sample(rng), y + noise.sample(rng)]
}

/// Rejection sampler for the ring: radius from `r·exp(−k(r − R)²)`, uniform angle.
fn ring_point<R: Rng>(rng: &mut R) -> [f64; 2] {
    let sd = (0.5 / RING_SHARPNESS).sqrt();
    let bound = RING_RADIUS + 6.0 * sd;
    loop {
        let r = RING_RADIUS + sd * rng.sample::<f64, _>(StandardNormal);
        if r > 0.0 && rng.random::<f64>() * bound < r {
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            return [r * a.cos(), r * a.sin()];
        }
    }
}

pub fn ring_log_density(x: &[f64]) -> (f64, Vec<f64>) {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt().max(1e-12);
    let dr = -2.0 * RING_SHARPNESS * (r - RING_RADIUS);
    (-RING_SHARPNESS * (r - RING_RADIUS).powi(2), vec![dr * x[0] / r, dr * x[1] / r])
}

/// Normalized log-density of the equal-weight two-Gaussian mixture.
pub fn mixture_log_density(x: &[f64]) -> (f64, Vec<f64>) {
    let comp = |m: f64| -0.5 * ((x[0] - m).powi(2) + x[1] * x[1]) - (2.0 * std::f64::consts::PI).ln();
    let (a, b) = (comp(MIXTURE_OFFSET), comp(-MIXTURE_OFFSET));
    let hi = a.max(b);
    let lse = hi + ((a - hi).exp() + (b - hi).exp()).ln() - std::f64::consts::LN_2;
    let (wa, wb) = ((a - hi).exp(), (b - hi).exp());
    let (wa, wb) = (wa / (wa + wb), wb / (wa + wb));
    let gx = -(wa * (x[0] - MIXTURE_OFFSET) + wb * (x[0] + MIXTURE_OFFSET));
    (lse, vec![gx, -x[1]])
}

/// `−mean log p(x)` of the mixture over `n` fresh draws: a Monte-Carlo estimate of its differential entropy.
pub fn mixture_entropy_mc<R: Rng>(n: usize, rng: &mut R) -> f64 {
    let xs = Builtin::Mixture.sample(n, rng);
    -xs.iter_rows().map(|r| mixture_log_density(r).0).sum::<f64>() / n as f64
}

/// Training points for `dataset`: a built-in name (drawn with `rng`) or a point file.
pub fn load_points<R: Rng>(dataset: &str, n: usize, rng: &mut R) -> Result<Matrix, CliError> {
    match Builtin::parse(dataset) {
        Some(b) => Ok(b.sample(n, rng)),
        None => read_points_file(Path::new(dataset)),
    }
}

pub fn write_points<W: Write>(mut w: W, points: &Matrix, header: &KvText) -> Result<(), CliError> {
    let mut h = header.clone();
    h.set("format", POINTS_MAGIC);
    h.set("n", points.rows());
    h.set("dim", points.cols());
    writeln!(w, "{}", h.to_line())?;
    for row in points.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}

pub fn read_points<R: Read>(r: R) -> Result<Matrix, CliError> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    let header = KvText::parse_line(&first).map_err(|e| CliError::Usage(format!("point file header: {e}")))?;
    if header.get("format") != Some(POINTS_MAGIC) {
        return Err(CliError::Usage("not a point file (missing format marker)".into()));
    }
    let dim: usize = header.parse_value("dim").map_err(|e| CliError::Usage(e.to_string()))?;
    let n: usize = header.parse_value("n").map_err(|e| CliError::Usage(e.to_string()))?;
    let mut data = Vec::with_capacity(n * dim);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let row: Vec<f64> = line.split_whitespace().map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| CliError::Usage(format!("point row {}: {e}", i + 1)))?;
        if row.len() != dim {
            return Err(CliError::Usage(format!("point row {} has {} values, expected {dim}", i + 1, row.len())));
        }
        data.extend(row);
    }
    if data.len() != n * dim {
        return Err(CliError::Usage(format!("point file declares {n} rows, holds {}", data.len() / dim.max(1))));
    }
    Ok(Matrix::from_vec(n, dim, data))
}

pub fn read_points_file(path: &Path) -> Result<Matrix, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Usage(format!("dataset {}: {e}", path.display())))?;
    read_points(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nfrl_core::grad::fd::{central_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn target_gradients_match_differences() {
        for f in [ring_log_density as fn(&[f64]) -> (f64, Vec<f64>), mixture_log_density] {
            for x in [[0.3, -1.1], [2.5, 0.4], [-1.7, 1.9]] {
                let num = central_difference(|p| f(p).0, &x, 1e-6);
                assert!(max_relative_error(&f(&x).1, &num, 1e-6) < 1e-6);
            }
        }
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let (n, hw) = (600, 9.0);
        let h = 2.0 * hw / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-hw + (i as f64 + 0.5) * h, -hw + (j as f64 + 0.5) * h];
                mass += mixture_log_density(&x).0.exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn ring_sampler_matches_radial_moments() {
        let xs = Builtin::Ring.sample(50_000, &mut ChaCha8Rng::seed_from_u64(3));
        let r: Vec<f64> = xs.iter_rows().map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).collect();
        let (n, h) = (4000, 4.0 / 4000.0);
        let w: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).map(|r| r * (-RING_SHARPNESS * (r - RING_RADIUS).powi(2)).exp()).collect();
        let mean = (0..n).map(|i| (i as f64 + 0.5) * h * w[i]).sum::<f64>() / w.iter().sum::<f64>();
        let emp = r.iter().sum::<f64>() / r.len() as f64;
        assert!((emp - mean).abs() < 0.01, "{emp} vs {mean}");
    }

    #[test]
    fn point_files_round_trip() {
        let xs = Builtin::TwoMoons.sample(50, &mut ChaCha8Rng::seed_from_u64(0));
        let mut buf = Vec::new();
        write_points(&mut buf, &xs, &KvText::new()).unwrap();
        assert_eq!(read_points(&buf[..]).unwrap(), xs);
        let text = String::from_utf8(buf).unwrap();
        let short = &text[..text.trim_end().rfind('\n').unwrap() + 1];
        assert!(read_points(short.as_bytes()).is_err());
    }
}
