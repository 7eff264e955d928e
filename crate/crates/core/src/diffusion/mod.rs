//! Forward noising, classifier-free-guidance dropout, and training.

mod adam;
mod checkpoint;
mod gradcheck;
mod train;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check_denoiser, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
pub use train::{
    assemble_sample, prepare_sample, sample_loss_and_grads, train, training_step, LossRecord,
    LossScope, StepOutput, TrainConfig, TrainOutcome, TrainingSample,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::schedule::NoiseSchedule;

/// `l x d_token` latent token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T: Scalar = f64> {
    pub tokens: Matrix<T>,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn new(tokens: Matrix<T>) -> Self {
        Self { tokens }
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.is_finite()
    }
}

/// `cl x d_token` condition tokens, or the learned null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSequence<T: Scalar = f64> {
    pub tokens: Matrix<T>,
    /// When set the model substitutes its learned null token and ignores
    /// `tokens`, which are zero.
    pub is_null: bool,
}

impl<T: Scalar> ConditionSequence<T> {
    pub fn new(tokens: Matrix<T>) -> Self {
        Self {
            tokens,
            is_null: false,
        }
    }

    pub fn null(cl: usize, d_token: usize) -> Self {
        Self {
            tokens: Matrix::zeros(cl, d_token),
            is_null: true,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn cast<U: Scalar>(&self) -> ConditionSequence<U> {
        ConditionSequence {
            tokens: self.tokens.cast(),
            is_null: self.is_null,
        }
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 - ᾱ_t)·noise`; returns `x0` unchanged at `t = 0`.
pub fn forward_diffuse<T: Scalar>(
    x0: &Matrix<T>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Matrix<T>,
) -> Result<Matrix<T>> {
    if x0.shape() != noise.shape() {
        return Err(Error::Contract(format!(
            "noise {:?} does not match tokens {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
    let mut out = x0.clone();
    for (o, &n) in out.as_mut_slice().iter_mut().zip(noise.as_slice()) {
        *o = a * *o + b * n;
    }
    Ok(out)
}

/// Standard normal matrix.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Replaces `cond` with the null condition with probability `p`.
///
/// Always consumes exactly one uniform draw.
pub fn cfg_dropout<T: Scalar, R: Rng + ?Sized>(
    cond: &ConditionSequence<T>,
    p: f64,
    rng: &mut R,
) -> ConditionSequence<T> {
    let u: f64 = rng.random();
    if u < p {
        ConditionSequence::null(cond.tokens.rows(), cond.tokens.cols())
    } else {
        cond.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn x0() -> Matrix<f64> {
        Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]]).unwrap()
    }

    #[test]
    fn zero_timestep_is_identity() {
        let s = NoiseSchedule::default();
        let noise = gaussian(&mut rng_from_seed(1), 2, 3);
        assert_eq!(forward_diffuse(&x0(), 0, &s, &noise).unwrap(), x0());
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::default();
        let out = forward_diffuse(&x0(), 40, &s, &Matrix::zeros(2, 3)).unwrap();
        let want = x0().scale(s.alpha_bar(40).unwrap().sqrt());
        assert!(out.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let s = NoiseSchedule::default();
        assert!(matches!(
            forward_diffuse(&x0(), 3, &s, &Matrix::zeros(3, 2)),
            Err(Error::Contract(_))
        ));
        assert!(forward_diffuse(&x0(), 101, &s, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = rng_from_seed(4);
        let c = ConditionSequence::new(x0());
        for _ in 0..100 {
            assert_eq!(cfg_dropout(&c, 0.0, &mut rng), c);
            let n = cfg_dropout(&c, 1.0, &mut rng);
            assert!(n.is_null);
            assert_eq!(n.len(), 2);
        }
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let mut rng = rng_from_seed(5);
        let c = ConditionSequence::new(x0());
        let n = 100_000;
        let nulls = (0..n).filter(|_| cfg_dropout(&c, 0.1, &mut rng).is_null).count();
        assert!((nulls as f64 / n as f64 - 0.1).abs() < 0.01);
    }
}
