//! Central-difference check of the training loss gradient with respect to
//! every denoiser parameter.

use super::train::{assemble_sample, sample_loss_and_grads, TrainingSample};
use super::{gaussian, ConditionSequence};
use crate::arplan::generate_ar_steps;
use crate::causal_mask::MaskVariant;
use crate::denoiser::{init_params, layout, DenoiserConfig, DenoiserParams};
use crate::error::Result;
use crate::numerics::{grad_check, GradCheckReport, Matrix};
use crate::rng::{derive_seed, derived_rng};
use crate::schedule::ScheduleConfig;
use rand::Rng;

pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-5;

/// Spread added to the initial weights so that no gradient entry is
/// vanishingly small.
const PERTURB_STD: f64 = 0.3;

/// Checks the batch loss of one conditional and one null-condition example,
/// each with a random plan and timestep, in double precision.
pub fn grad_check_denoiser(
    config: &DenoiserConfig,
    variant: MaskVariant,
    seed: u64,
) -> Result<GradCheckReport> {
    config.validate()?;
    let mut params = init_params::<f64>(config, derive_seed(seed, "init"))?;
    params.perturb(&mut derived_rng(seed, "perturb"), PERTURB_STD);
    let schedule = ScheduleConfig {
        timesteps: config.timesteps,
        ..ScheduleConfig::default()
    }
    .build()?;

    let mut rng = derived_rng(seed, "samples");
    let (l, d, cl) = (config.l, config.d_token, config.cl);
    let mut samples = Vec::new();
    for conditioned in [true, false] {
        let cond = if conditioned {
            ConditionSequence::new(gaussian(&mut rng, cl, d))
        } else {
            ConditionSequence::null(cl, d)
        };
        let x0: Matrix<f64> = gaussian(&mut rng, l, d);
        let plan = generate_ar_steps(l, 0.5, &mut rng)?;
        let block_t: Vec<usize> = (0..plan.steps())
            .map(|_| rng.random_range(1..=config.timesteps))
            .collect();
        let noise = gaussian(&mut rng, l, d);
        samples.push(assemble_sample(
            cond, &x0, plan, &block_t, &noise, &schedule, variant,
        )?);
    }
    let refs: Vec<&TrainingSample<f64>> = samples.iter().collect();

    let rebuild = |ps: &[Matrix<f64>]| {
        let mut it = ps.iter();
        DenoiserParams {
            config: *config,
            weights: layout(config).map(|_, _| it.next().expect("one tensor per entry").clone()),
        }
    };
    let flat: Vec<Matrix<f64>> = params.weights.tensors().into_iter().cloned().collect();
    grad_check(
        |ps| {
            let (losses, _) = sample_loss_and_grads(&rebuild(ps), &refs, refs.len())?;
            Ok(losses.iter().sum::<f64>() / losses.len() as f64)
        },
        |ps| {
            let (_, g) = sample_loss_and_grads(&rebuild(ps), &refs, refs.len())?;
            Ok(g.tensors().into_iter().cloned().collect())
        },
        &flat,
        GRAD_CHECK_EPS,
    )
}
