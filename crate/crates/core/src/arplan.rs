//! Partitioning of a token sequence into contiguous autoregressive steps.
//!
//! The number of steps `I` is drawn first (uniformly when `gamma == 1`,
//! otherwise with probability proportional to `gamma^(I-1)`), then `I - 1`
//! distinct cut points are drawn uniformly from `1..l`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes of consecutive AR steps and their cumulative boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArPlan {
    sizes: Vec<usize>,
    cumsum: Vec<usize>,
}

impl ArPlan {
    /// Builds a plan from explicit step sizes, all of which must be positive.
    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("a plan needs at least one step".into()));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("step {i} has size 0")));
        }
        let mut cumsum = Vec::with_capacity(sizes.len() + 1);
        cumsum.push(0);
        for s in &sizes {
            cumsum.push(cumsum.last().unwrap() + s);
        }
        Ok(Self { sizes, cumsum })
    }

    /// A single step covering all `l` tokens.
    pub fn single(l: usize) -> Result<Self> {
        Self::from_sizes(vec![l])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Boundaries `cm[0] = 0 < cm[1] < ... < cm[S] = l`.
    pub fn cumsum(&self) -> &[usize] {
        &self.cumsum
    }

    pub fn steps(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        *self.cumsum.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Token range of step `s` (0-based).
    pub fn block(&self, s: usize) -> std::ops::Range<usize> {
        self.cumsum[s]..self.cumsum[s + 1]
    }

    /// Step index that owns token `i`.
    pub fn block_of(&self, i: usize) -> usize {
        self.cumsum.partition_point(|&c| c <= i) - 1
    }

    /// The plan restricted to its first `steps` steps.
    pub fn prefix(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.steps() {
            return Err(Error::Config(format!(
                "prefix of {steps} steps from a {}-step plan",
                self.steps()
            )));
        }
        Self::from_sizes(self.sizes[..steps].to_vec())
    }

    /// `sizes=[...] cumsum=[...]` as a JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "sizes": self.sizes, "cumsum": self.cumsum })
    }
}

fn check_args(l: usize, gamma: f64) -> Result<()> {
    if l < 1 {
        return Err(Error::Config("token count must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// Probability of each step count `1..=l` (index 0 holds `P(I = 1)`).
pub fn step_count_pmf(l: usize, gamma: f64) -> Result<Vec<f64>> {
    check_args(l, gamma)?;
    if gamma == 1.0 {
        return Ok(vec![1.0 / l as f64; l]);
    }
    let b = (1.0 - gamma) / (1.0 - gamma.powi(l as i32));
    Ok((0..l).map(|i| b * gamma.powi(i as i32)).collect())
}

/// Draws a step count, then cut points, and returns the resulting plan.
pub fn generate_ar_steps<R: Rng + ?Sized>(l: usize, gamma: f64, rng: &mut R) -> Result<ArPlan> {
    check_args(l, gamma)?;
    let count = if gamma == 1.0 {
        rng.random_range(1..=l)
    } else {
        let pmf = step_count_pmf(l, gamma)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = l;
        for (i, p) in pmf.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i + 1;
                break;
            }
        }
        pick
    };

    // cut points are distinct draws from 1..l
    let mut cuts: Vec<usize> = index::sample(rng, l - 1, count - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(count);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(l)) {
        sizes.push(c - prev);
        prev = c;
    }
    ArPlan::from_sizes(sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn single_token_forces_one_step() {
        for gamma in [0.25, 0.5, 1.0] {
            let mut rng = rng_from_seed(1);
            let p = generate_ar_steps(1, gamma, &mut rng).unwrap();
            assert_eq!(p.sizes(), &[1]);
            assert_eq!(p.cumsum(), &[0, 1]);
        }
    }

    #[test]
    fn three_step_example_is_reachable() {
        let p = ArPlan::from_sizes(vec![2, 2, 3]).unwrap();
        assert_eq!(p.cumsum(), &[0, 2, 4, 7]);

        let mut rng = rng_from_seed(9);
        let seen = (0..5000).any(|_| {
            generate_ar_steps(7, 1.0, &mut rng).unwrap().sizes() == [2, 2, 3]
        });
        assert!(seen);
    }

    #[test]
    fn pmf_matches_hand_values() {
        let p = step_count_pmf(3, 0.5).unwrap();
        let want = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(step_count_pmf(4, 1.0).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn pmf_is_continuous_near_one() {
        let p = step_count_pmf(2, 0.999).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-3 && (p[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn pmf_sums_to_one() {
        for l in 1..40 {
            for gamma in [0.1, 0.25, 0.5, 0.9, 0.999, 1.0] {
                let s: f64 = step_count_pmf(l, gamma).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "l={l} gamma={gamma}");
            }
        }
    }

    #[test]
    fn invalid_arguments_are_config_errors() {
        let mut rng = rng_from_seed(0);
        assert!(matches!(
            generate_ar_steps(0, 0.5, &mut rng),
            Err(Error::Config(_))
        ));
        for gamma in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(step_count_pmf(4, gamma), Err(Error::Config(_))));
        }
        assert!(ArPlan::from_sizes(vec![]).is_err());
        assert!(ArPlan::from_sizes(vec![2, 0, 1]).is_err());
    }

    #[test]
    fn block_lookup() {
        let p = ArPlan::from_sizes(vec![2, 2, 3]).unwrap();
        let owners: Vec<usize> = (0..7).map(|i| p.block_of(i)).collect();
        assert_eq!(owners, vec![0, 0, 1, 1, 2, 2, 2]);
        assert_eq!(p.block(2), 4..7);
        assert_eq!(p.prefix(2).unwrap().sizes(), &[2, 2]);
    }

    #[test]
    fn empirical_pmf_at_half_decay() {
        let mut rng = rng_from_seed(2024);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[generate_ar_steps(3, 0.5, &mut rng).unwrap().steps() - 1] += 1;
        }
        let want = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (c, w) in counts.iter().zip(want) {
            assert!((*c as f64 / n as f64 - w).abs() < 0.02);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn plans_satisfy_invariants(
                l in 1usize..=64,
                gamma in prop::sample::select(vec![0.25, 0.5, 1.0]),
                seed in any::<u64>(),
            ) {
                let mut rng = rng_from_seed(seed);
                let p = generate_ar_steps(l, gamma, &mut rng).unwrap();
                prop_assert_eq!(p.sizes().iter().sum::<usize>(), l);
                prop_assert!(p.sizes().iter().all(|&s| s >= 1));
                prop_assert_eq!(p.cumsum()[0], 0);
                prop_assert_eq!(*p.cumsum().last().unwrap(), l);
                prop_assert!(p.cumsum().windows(2).all(|w| w[1] > w[0]));
                for (i, s) in p.sizes().iter().enumerate() {
                    prop_assert_eq!(p.cumsum()[i + 1] - p.cumsum()[i], *s);
                }
            }
        }
    }
}
