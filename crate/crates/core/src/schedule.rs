//! Linear variance schedule, cumulative signal products, and strided
//! timestep ladders for accelerated sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Parameters a [`NoiseSchedule`] is rebuilt from; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end`, both
    /// inclusive. With `timesteps == 1` the single beta is `beta_start`, and
    /// `beta_end` may equal it.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("timestep count must be at least 1".into()));
        }
        if timesteps == 1 {
            return Self::from_betas(vec![beta_start]);
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        let betas = (0..timesteps)
            .map(|i| {
                if i == timesteps - 1 {
                    beta_end
                } else {
                    beta_start + step * i as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Schedule from an explicit strictly increasing beta sequence in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one beta".into()));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::Config(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        if let Some(i) = betas.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "betas must strictly increase: beta_{} = {} then {}",
                i + 1,
                betas[i],
                betas[i + 1]
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Index {
                index: t,
                max: self.timesteps(),
            });
        }
        Ok(self.betas[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Cumulative product of `1 - beta_s` for `s <= t`; exactly 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::Index {
            index: t,
            max: self.timesteps(),
        })
    }

    /// `steps` distinct timesteps in descending order, strided by
    /// `floor(T / steps)` from `T`. Whatever the stride leaves over sits
    /// below the last entry, next to `t = 0`.
    pub fn subsample(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.timesteps();
        if steps == 0 || steps > t_max {
            return Err(Error::Config(format!(
                "sampling steps must be in [1, {t_max}], got {steps}"
            )));
        }
        let stride = t_max / steps;
        Ok((0..steps).map(|i| t_max - i * stride).collect())
    }

    /// CSV dump with header `t,beta,alpha_bar`, one row per `t` in `1..=T`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar\n");
        for t in 1..=self.timesteps() {
            out.push_str(&format!("{t},{},{}\n", self.betas[t - 1], self.alpha_bars[t]));
        }
        out
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleConfig::default()
            .build()
            .expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn flat_betas_rejected() {
        assert!(matches!(
            NoiseSchedule::from_betas(vec![0.1, 0.1]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            NoiseSchedule::linear(2, 0.1, 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.19]).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(2).unwrap() - 0.729).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_bounds() {
        let s = NoiseSchedule::default();
        assert_eq!(s.timesteps(), 100);
        let last = s.alpha_bar(100).unwrap();
        assert!(last > 0.0 && last < 1.0);
        for t in 0..100 {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
        assert!(matches!(
            s.alpha_bar(101),
            Err(Error::Index { index: 101, max: 100 })
        ));
    }

    #[test]
    fn linear_endpoints_inclusive() {
        let s = NoiseSchedule::default();
        assert_eq!(s.beta(1).unwrap(), DEFAULT_BETA_START);
        assert_eq!(s.beta(100).unwrap(), DEFAULT_BETA_END);
        assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn stored_alpha_bars_match_naive_products() {
        let s = NoiseSchedule::default();
        for t in 0..=s.timesteps() {
            let naive: f64 = (1..=t).map(|u| 1.0 - s.beta(u).unwrap()).product();
            assert!((naive - s.alpha_bar(t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_ladder() {
        let s = NoiseSchedule::default();
        let ladder = s.subsample(100).unwrap();
        assert_eq!(ladder, (1..=100).rev().collect::<Vec<_>>());
    }

    #[test]
    fn half_ladder_by_enumeration() {
        let s = NoiseSchedule::default();
        let ladder = s.subsample(50).unwrap();
        let want: Vec<usize> = (1..=100).rev().filter(|t| t % 2 == 0).collect();
        assert_eq!(ladder, want);
    }

    #[test]
    fn single_step_ladder() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        assert_eq!(s.subsample(1).unwrap(), vec![10]);
        assert!(s.subsample(0).is_err());
        assert!(s.subsample(11).is_err());
    }

    #[test]
    fn ladders_are_valid_for_every_length() {
        for t_max in [1usize, 7, 10, 100] {
            let s = if t_max == 1 {
                NoiseSchedule::from_betas(vec![0.1]).unwrap()
            } else {
                NoiseSchedule::linear(t_max, 1e-3, 0.2).unwrap()
            };
            for steps in 1..=t_max {
                let ladder = s.subsample(steps).unwrap();
                assert_eq!(ladder.len(), steps);
                assert_eq!(ladder[0], t_max);
                assert!(ladder.windows(2).all(|w| w[0] > w[1]));
                assert!(ladder.iter().all(|&t| (1..=t_max).contains(&t)));
            }
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.19]).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha_bar");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,0.19,"));
    }
}
