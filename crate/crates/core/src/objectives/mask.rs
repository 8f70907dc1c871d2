use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::ConditionContext;

/// Sets each context's mask flag independently with probability `mask_prob`.
///
/// Contexts that were already masked stay masked.
pub fn apply_mask<R: Rng>(mut ctxs: Vec<ConditionContext>, mask_prob: f64, rng: &mut R) -> Result<Vec<ConditionContext>> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Config(format!("mask probability {mask_prob} outside [0, 1]")));
    }
    for c in &mut ctxs {
        if rng.random_bool(mask_prob) {
            c.masked = true;
        }
    }
    Ok(ctxs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize) -> Vec<ConditionContext> {
        (0..n).map(|i| ConditionContext::new(vec![i as f64])).collect()
    }

    #[test]
    fn extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_mask(batch(500), 0.0, &mut rng).unwrap().iter().all(|c| !c.masked));
        assert!(apply_mask(batch(500), 1.0, &mut rng).unwrap().iter().all(|c| c.masked));
    }

    #[test]
    fn rejects_bad_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_mask(batch(1), 1.5, &mut rng).is_err());
        assert!(apply_mask(batch(1), f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn masked_fraction_near_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = apply_mask(batch(100_000), 0.1, &mut rng).unwrap();
        let frac = out.iter().filter(|c| c.masked).count() as f64 / 1e5;
        assert!((0.094..=0.106).contains(&frac), "{frac}");
    }
}
