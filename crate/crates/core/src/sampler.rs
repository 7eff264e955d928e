//! Reverse process: deterministic x0-parameterized updates over a subsampled
//! timestep ladder, with classifier-free guidance, single-shot or block by
//! block.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arplan::{generate_ar_steps, ArPlan};
use crate::causal_mask::{build_mask, MaskVariant};
use crate::denoiser::{DenoiserConfig, DenoiserInput, DenoiserParams};
use crate::diffusion::{gaussian, ConditionSequence};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::rng::{derive_seed, rng_from_seed};
use crate::schedule::NoiseSchedule;

/// Samples per forward batch.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    #[default]
    Single,
    Ar,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(SampleMode::Single),
            "ar" => Ok(SampleMode::Ar),
            _ => Err(Error::Config(format!("unknown sampling mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Reverse steps, a subsample of the training timesteps.
    pub steps: usize,
    /// Guidance weight.
    pub w: f64,
    pub mode: SampleMode,
    /// Step-count decay used to draw plans in `ar` mode when `sizes` is unset.
    pub gamma: f64,
    /// Explicit block sizes for `ar` mode.
    pub sizes: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            w: 2.0,
            mode: SampleMode::Single,
            gamma: 0.5,
            sizes: None,
            seed: 0,
        }
    }
}

impl SampleConfig {
    /// Defaults for the unconditional regime.
    pub fn unconditional() -> Self {
        Self {
            steps: 25,
            ..Self::default()
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::Config(format!(
                "sample.steps must lie in [1, {timesteps}], got {}",
                self.steps
            )));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!(
                "sample.w must be finite and non-negative, got {}",
                self.w
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "sample.gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `uncond + w·(cond − uncond)`, exact at `w = 0` and `w = 1`.
pub fn guide<T: Scalar>(pred_cond: &Matrix<T>, pred_uncond: &Matrix<T>, w: f64) -> Result<Matrix<T>> {
    if pred_cond.shape() != pred_uncond.shape() {
        return Err(Error::Contract(format!(
            "guidance branches disagree: {:?} vs {:?}",
            pred_cond.shape(),
            pred_uncond.shape()
        )));
    }
    if w == 0.0 {
        return Ok(pred_uncond.clone());
    }
    if w == 1.0 {
        return Ok(pred_cond.clone());
    }
    let w = T::from_f64_lossy(w);
    let mut out = pred_uncond.clone();
    for (o, &c) in out.as_mut_slice().iter_mut().zip(pred_cond.as_slice()) {
        *o = *o + w * (c - *o);
    }
    Ok(out)
}

/// Deterministic update between two cumulative signal levels.
pub fn ddim_update<T: Scalar>(
    x_t: &Matrix<T>,
    x0_hat: &Matrix<T>,
    ab_t: f64,
    ab_prev: f64,
) -> Result<Matrix<T>> {
    if x_t.shape() != x0_hat.shape() {
        return Err(Error::Contract(format!(
            "x_t {:?} vs x0_hat {:?}",
            x_t.shape(),
            x0_hat.shape()
        )));
    }
    if ab_prev == 1.0 {
        return Ok(x0_hat.clone());
    }
    let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (s_p, n_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let mut out = x0_hat.clone();
    for (o, &x) in out.as_mut_slice().iter_mut().zip(x_t.as_slice()) {
        let x0 = o.to_f64().unwrap();
        let eps = (x.to_f64().unwrap() - s_t * x0) / n_t;
        *o = T::from_f64_lossy(s_p * x0 + n_p * eps);
    }
    Ok(out)
}

pub fn ddim_step<T: Scalar>(
    x_t: &Matrix<T>,
    x0_hat: &Matrix<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Matrix<T>> {
    if t <= t_prev {
        return Err(Error::Contract(format!(
            "reverse step must descend, got {t} -> {t_prev}"
        )));
    }
    ddim_update(x_t, x0_hat, schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?)
}

/// `(t, t_prev)` pairs visited by a reverse pass of `steps` steps.
pub fn ladder(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<(usize, usize)>> {
    let ts = schedule.subsample(steps)?;
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
        .collect())
}

/// Anything that predicts clean tokens for a batch of denoiser inputs.
pub trait CleanPredictor<T: Scalar>: Sync {
    fn config(&self) -> &DenoiserConfig;
    fn predict(&self, inputs: &[&DenoiserInput<T>]) -> Result<Vec<Matrix<T>>>;
}

impl<T: Scalar> CleanPredictor<T> for DenoiserParams<T> {
    fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn predict(&self, inputs: &[&DenoiserInput<T>]) -> Result<Vec<Matrix<T>>> {
        let parts: Vec<Vec<Matrix<T>>> = inputs
            .par_chunks(CHUNK)
            .map(|c| self.forward_batch(c))
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }
}

/// One sequence to generate.
#[derive(Debug, Clone)]
pub struct SampleRequest<T: Scalar> {
    pub cond: ConditionSequence<T>,
    pub plan: ArPlan,
}

/// Source of initial noise for block `step` of sample `sample`.
pub trait NoiseSource<T: Scalar> {
    fn block_noise(&mut self, sample: usize, step: usize, rows: usize, cols: usize) -> Matrix<T>;
}

impl<T: Scalar, F: FnMut(usize, usize, usize, usize) -> Matrix<T>> NoiseSource<T> for F {
    fn block_noise(&mut self, sample: usize, step: usize, rows: usize, cols: usize) -> Matrix<T> {
        self(sample, step, rows, cols)
    }
}

/// Each sample draws its blocks in order from its own generator.
pub struct PerSampleRng<R>(pub Vec<R>);

impl<T: Scalar, R: Rng> NoiseSource<T> for PerSampleRng<R> {
    fn block_noise(&mut self, sample: usize, _step: usize, rows: usize, cols: usize) -> Matrix<T> {
        gaussian(&mut self.0[sample], rows, cols)
    }
}

struct Active<T: Scalar> {
    index: usize,
    layout: DenoiserInput<T>,
    block: Range<usize>,
}

/// Generates every request, block by block. Within a block each request
/// runs the full ladder; a single-block plan is one-shot generation.
pub fn sample_batch<T: Scalar, P: CleanPredictor<T> + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    requests: &[SampleRequest<T>],
    scfg: &SampleConfig,
    noise: &mut dyn NoiseSource<T>,
) -> Result<Vec<Matrix<T>>> {
    let c = *model.config();
    scfg.validate(schedule.timesteps())?;
    if schedule.timesteps() != c.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} timesteps, model was built for {}",
            schedule.timesteps(),
            c.timesteps
        )));
    }
    for (i, r) in requests.iter().enumerate() {
        if r.plan.len() != c.l {
            return Err(Error::Contract(format!(
                "request {i}: plan covers {} tokens, model length is {}",
                r.plan.len(),
                c.l
            )));
        }
        if r.cond.tokens.shape() != (c.cl, c.d_token) {
            return Err(Error::Contract(format!(
                "request {i}: condition is {:?}, model expects {}x{}",
                r.cond.tokens.shape(),
                c.cl,
                c.d_token
            )));
        }
    }
    let steps = ladder(schedule, scfg.steps)?;
    let null = ConditionSequence::null(c.cl, c.d_token);
    let mut finished: Vec<Matrix<T>> = vec![Matrix::zeros(c.l, c.d_token); requests.len()];
    let max_blocks = requests.iter().map(|r| r.plan.steps()).max().unwrap_or(0);

    for s in 0..max_blocks {
        let mut active = Vec::new();
        for (i, r) in requests.iter().enumerate() {
            if s >= r.plan.steps() {
                continue;
            }
            let prefix = r.plan.prefix(s + 1)?;
            let block = r.plan.block(s);
            let mask = build_mask(&prefix, c.cl, MaskVariant::Partial)?;
            let done = finished[i].slice_rows(0, block.start)?;
            let x = noise.block_noise(i, s, block.len(), c.d_token);
            if x.shape() != (block.len(), c.d_token) {
                return Err(Error::Contract(format!(
                    "noise source returned {:?} for a {}-row block",
                    x.shape(),
                    block.len()
                )));
            }
            // Earlier noisy rows are never read by this block's rows.
            let noisy = Matrix::concat_rows(&[&done, &x])?;
            active.push(Active {
                index: i,
                layout: DenoiserInput {
                    cond: r.cond.clone(),
                    clean_visible: done,
                    noisy,
                    timesteps: vec![0; prefix.len()],
                    alpha_bar: vec![1.0; prefix.len()],
                    mask,
                },
                block,
            });
        }

        for &(t, t_prev) in &steps {
            let mut cond_inputs = Vec::new();
            let mut null_inputs = Vec::new();
            let ab = schedule.alpha_bar(t)?;
            for a in &mut active {
                a.layout.timesteps.iter_mut().for_each(|v| *v = t);
                a.layout.alpha_bar.iter_mut().for_each(|v| *v = ab);
                let r = &requests[a.index];
                let use_cond = !r.cond.is_null && scfg.w != 0.0;
                let use_null = r.cond.is_null || scfg.w != 1.0;
                if use_cond {
                    cond_inputs.push(a.layout.clone());
                }
                if use_null {
                    let mut n = a.layout.clone();
                    n.cond = null.clone();
                    null_inputs.push(n);
                }
            }
            let cond_preds = model.predict(&cond_inputs.iter().collect::<Vec<_>>())?;
            let null_preds = model.predict(&null_inputs.iter().collect::<Vec<_>>())?;
            let (mut ci, mut ni) = (cond_preds.into_iter(), null_preds.into_iter());

            for a in &mut active {
                let r = &requests[a.index];
                let use_cond = !r.cond.is_null && scfg.w != 0.0;
                let use_null = r.cond.is_null || scfg.w != 1.0;
                let pc = if use_cond { ci.next() } else { None };
                let pn = if use_null { ni.next() } else { None };
                let pick = |p: Matrix<T>| p.slice_rows(a.block.start, a.block.len());
                let x0_hat = match (pc, pn) {
                    (Some(pc), Some(pn)) => guide(&pick(pc)?, &pick(pn)?, scfg.w)?,
                    (Some(pc), None) => pick(pc)?,
                    (None, Some(pn)) => pick(pn)?,
                    (None, None) => unreachable!("at least one branch runs"),
                };
                let x_t = a.layout.noisy.slice_rows(a.block.start, a.block.len())?;
                let x_prev = ddim_step(&x_t, &x0_hat, t, t_prev, schedule)?;
                let start = a.block.start;
                for (k, row) in (0..x_prev.rows()).map(|k| (k, x_prev.row(k))) {
                    a.layout.noisy.row_mut(start + k).copy_from_slice(row);
                }
            }
        }

        for a in active {
            let rows = a.layout.noisy.slice_rows(a.block.start, a.block.len())?;
            for k in 0..rows.rows() {
                finished[a.index]
                    .row_mut(a.block.start + k)
                    .copy_from_slice(rows.row(k));
            }
        }
    }
    Ok(finished)
}

/// One-shot generation of a single sequence.
pub fn sample_single<T: Scalar, P: CleanPredictor<T> + ?Sized, R: Rng>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: &ConditionSequence<T>,
    scfg: &SampleConfig,
    rng: &mut R,
) -> Result<Matrix<T>> {
    let plan = ArPlan::single(model.config().l)?;
    sample_ar(model, schedule, cond, &plan, scfg, rng)
}

/// Block-by-block generation following `plan`.
pub fn sample_ar<T: Scalar, P: CleanPredictor<T> + ?Sized, R: Rng>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: &ConditionSequence<T>,
    plan: &ArPlan,
    scfg: &SampleConfig,
    rng: &mut R,
) -> Result<Matrix<T>> {
    let req = [SampleRequest {
        cond: cond.clone(),
        plan: plan.clone(),
    }];
    let mut src = |_: usize, _: usize, r: usize, c: usize| gaussian(&mut *rng, r, c);
    Ok(sample_batch(model, schedule, &req, scfg, &mut src)?.pop().unwrap())
}

/// A generated sequence with the seed that reproduces it alone.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample<T: Scalar> {
    pub tokens: Matrix<T>,
    pub plan: ArPlan,
    pub seed: u64,
}

/// Generates one sequence per condition. Sample `i` uses its own seed derived
/// from `scfg.seed`, so results do not depend on batch composition.
pub fn sample_many<T: Scalar, P: CleanPredictor<T> + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    conds: &[ConditionSequence<T>],
    scfg: &SampleConfig,
) -> Result<Vec<GeneratedSample<T>>> {
    let l = model.config().l;
    let seeds: Vec<u64> = (0..conds.len())
        .map(|i| derive_seed(scfg.seed, &format!("sample/{i}")))
        .collect();
    let mut plans = Vec::with_capacity(conds.len());
    for &seed in &seeds {
        plans.push(match (scfg.mode, &scfg.sizes) {
            (SampleMode::Single, _) => ArPlan::single(l)?,
            (SampleMode::Ar, Some(sizes)) => ArPlan::from_sizes(sizes.clone())?,
            (SampleMode::Ar, None) => {
                generate_ar_steps(l, scfg.gamma, &mut rng_from_seed(derive_seed(seed, "plan")))?
            }
        });
    }
    let requests: Vec<SampleRequest<T>> = conds
        .iter()
        .zip(&plans)
        .map(|(c, p)| SampleRequest {
            cond: c.clone(),
            plan: p.clone(),
        })
        .collect();
    let mut src = PerSampleRng(
        seeds
            .iter()
            .map(|&s| rng_from_seed(derive_seed(s, "noise")))
            .collect(),
    );
    let out = sample_batch(model, schedule, &requests, scfg, &mut src)?;
    Ok(out
        .into_iter()
        .zip(plans)
        .zip(seeds)
        .map(|((tokens, plan), seed)| GeneratedSample { tokens, plan, seed })
        .collect())
}

/// One line of a samples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub tokens: Vec<Vec<f64>>,
    /// Mode of the condition used, absent for null-condition samples.
    pub cond_mode: Option<usize>,
    pub seed: u64,
    /// Block sizes the sample was generated with.
    pub plan: Vec<usize>,
    /// Clean tokens of the record the condition came from.
    #[serde(rename = "ref")]
    pub reference: Option<Vec<Vec<f64>>>,
}

impl SampleRecord {
    pub fn from_generated<T: Scalar>(
        g: &GeneratedSample<T>,
        cond_mode: Option<usize>,
        reference: Option<&Matrix<f64>>,
    ) -> Self {
        Self {
            tokens: g.tokens.cast::<f64>().to_rows(),
            cond_mode,
            seed: g.seed,
            plan: g.plan.sizes().to_vec(),
            reference: reference.map(|m| m.to_rows()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    config: serde_json::Value,
}

/// Generated samples with the configuration that produced them. Stored as
/// JSON lines: a `{"config": ...}` header, then one [`SampleRecord`] each.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub config: serde_json::Value,
    pub records: Vec<SampleRecord>,
}

impl SampleSet {
    pub fn tokens(&self) -> Result<Vec<Matrix<f64>>> {
        self.records.iter().map(|r| Matrix::from_rows(&r.tokens)).collect()
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let header = SampleHeader {
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("samples file is empty".into()))?;
        let header: SampleHeader = serde_json::from_str(&first?)
            .map_err(|e| Error::Format(format!("samples header: {e}")))?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("samples line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self {
            config: header.config,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::init_params;
    use crate::diffusion::forward_diffuse;
    use crate::rng::rng_from_seed;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 16,
            d_token: 3,
            l: 6,
            cl: 2,
            timesteps: 100,
            data_std: 1.0,
        }
    }

    fn model() -> DenoiserParams<f64> {
        let mut p = init_params::<f64>(&tiny(), 11).unwrap();
        p.perturb(&mut rng_from_seed(12), 0.3);
        p
    }

    fn cond(seed: u64) -> ConditionSequence<f64> {
        ConditionSequence::new(gaussian(&mut rng_from_seed(seed), 2, 3))
    }

    /// Returns a fixed matrix regardless of input.
    struct Constant {
        config: DenoiserConfig,
        value: Matrix<f64>,
    }

    impl CleanPredictor<f64> for Constant {
        fn config(&self) -> &DenoiserConfig {
            &self.config
        }

        fn predict(&self, inputs: &[&DenoiserInput<f64>]) -> Result<Vec<Matrix<f64>>> {
            Ok(inputs
                .iter()
                .map(|i| self.value.slice_rows(0, i.mask.l()).unwrap())
                .collect())
        }
    }

    #[test]
    fn guide_formula() {
        let c = Matrix::from_rows(&[[1.0]]).unwrap();
        let u = Matrix::from_rows(&[[0.0]]).unwrap();
        assert_eq!(guide(&c, &u, 2.0).unwrap().get(0, 0), 2.0);
        let c = Matrix::from_rows(&[[0.1, 0.7]]).unwrap();
        let u = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        assert_eq!(guide(&c, &u, 0.0).unwrap(), u);
        assert_eq!(guide(&c, &u, 1.0).unwrap(), c);
        assert!(guide(&c, &Matrix::zeros(2, 1), 2.0).is_err());
    }

    #[test]
    fn ddim_reaches_prediction_at_zero() {
        let s = NoiseSchedule::default();
        let x = gaussian(&mut rng_from_seed(1), 4, 3);
        let x0: Matrix<f64> = gaussian(&mut rng_from_seed(2), 4, 3);
        assert_eq!(ddim_step(&x, &x0, 7, 0, &s).unwrap(), x0);
        assert!(matches!(ddim_step(&x, &x0, 5, 5, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn ddim_with_true_clean_follows_forward_process() {
        let s = NoiseSchedule::default();
        let mut rng = rng_from_seed(3);
        for (t, tp) in [(100, 98), (60, 20), (2, 1), (37, 36)] {
            let x0: Matrix<f64> = gaussian(&mut rng, 4, 3);
            let n = gaussian(&mut rng, 4, 3);
            let xt = forward_diffuse(&x0, t, &s, &n).unwrap();
            let got = ddim_step(&xt, &x0, t, tp, &s).unwrap();
            let want = forward_diffuse(&x0, tp, &s, &n).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
        }
    }

    #[test]
    fn ddim_fixed_point_at_equal_levels() {
        let x: Matrix<f64> = gaussian(&mut rng_from_seed(4), 3, 3);
        let out = ddim_update(&x, &x, 0.7, 0.7).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn full_ladder_visits_every_timestep_descending() {
        let s = NoiseSchedule::default();
        let l = ladder(&s, 100).unwrap();
        let ts: Vec<usize> = l.iter().map(|p| p.0).collect();
        assert_eq!(ts, (1..=100).rev().collect::<Vec<_>>());
        assert!(l.iter().all(|&(t, tp)| tp + 1 == t));
        let l = ladder(&s, 50).unwrap();
        assert_eq!(l.first(), Some(&(100, 98)));
        assert_eq!(l.last(), Some(&(2, 0)));
    }

    #[test]
    fn constant_oracle_is_reproduced_exactly() {
        let s = NoiseSchedule::default();
        let value = gaussian(&mut rng_from_seed(5), 6, 3);
        let oracle = Constant {
            config: tiny(),
            value: value.clone(),
        };
        for steps in [1, 7, 25, 50, 100] {
            for w in [0.0, 1.0, 2.0] {
                let cfg = SampleConfig {
                    steps,
                    w,
                    ..SampleConfig::default()
                };
                let out = sample_single(&oracle, &s, &cond(1), &cfg, &mut rng_from_seed(6)).unwrap();
                assert_eq!(out, value);
            }
        }
        let plan = ArPlan::from_sizes(vec![2, 1, 3]).unwrap();
        let out = sample_ar(&oracle, &s, &cond(1), &plan, &SampleConfig::default(), &mut rng_from_seed(6))
            .unwrap();
        assert_eq!(out, value);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = NoiseSchedule::default();
        let m = model();
        let cfg = SampleConfig {
            steps: 10,
            ..SampleConfig::default()
        };
        let a = sample_single(&m, &s, &cond(1), &cfg, &mut rng_from_seed(7)).unwrap();
        let b = sample_single(&m, &s, &cond(1), &cfg, &mut rng_from_seed(7)).unwrap();
        let c = sample_single(&m, &s, &cond(1), &cfg, &mut rng_from_seed(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.is_finite());
    }

    #[test]
    fn zero_weight_ignores_condition() {
        let s = NoiseSchedule::default();
        let m = model();
        let cfg = SampleConfig {
            steps: 10,
            w: 0.0,
            ..SampleConfig::default()
        };
        let a = sample_single(&m, &s, &cond(1), &cfg, &mut rng_from_seed(7)).unwrap();
        let b = sample_single(&m, &s, &cond(2), &cfg, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_block_ar_equals_one_shot() {
        let s = NoiseSchedule::default();
        let m = model();
        let cfg = SampleConfig {
            steps: 10,
            ..SampleConfig::default()
        };
        let a = sample_single(&m, &s, &cond(1), &cfg, &mut rng_from_seed(7)).unwrap();
        let b = sample_ar(&m, &s, &cond(1), &ArPlan::single(6).unwrap(), &cfg, &mut rng_from_seed(7))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_by_token_plan_terminates() {
        let s = NoiseSchedule::default();
        let plan = ArPlan::from_sizes(vec![1; 6]).unwrap();
        let cfg = SampleConfig {
            steps: 5,
            ..SampleConfig::default()
        };
        let out = sample_ar(&model(), &s, &cond(1), &plan, &cfg, &mut rng_from_seed(9)).unwrap();
        assert_eq!(out.shape(), (6, 3));
        assert!(out.is_finite());
    }

    #[test]
    fn finalized_blocks_ignore_later_noise() {
        let s = NoiseSchedule::default();
        let m = model();
        let plan = ArPlan::from_sizes(vec![2, 1, 3]).unwrap();
        let cfg = SampleConfig {
            steps: 8,
            ..SampleConfig::default()
        };
        let req = [SampleRequest {
            cond: cond(1),
            plan: plan.clone(),
        }];
        let run = |later: u64| {
            let mut src = |_: usize, step: usize, r: usize, c: usize| {
                let seed = if step == 0 { 100 } else { later + step as u64 };
                gaussian(&mut rng_from_seed(seed), r, c)
            };
            sample_batch(&m, &s, &req, &cfg, &mut src).unwrap().pop().unwrap()
        };
        let (a, b) = (run(1), run(50));
        assert_eq!(a.slice_rows(0, 2).unwrap(), b.slice_rows(0, 2).unwrap());
        assert_ne!(a.slice_rows(2, 4).unwrap(), b.slice_rows(2, 4).unwrap());
    }

    #[test]
    fn batch_matches_individual_runs() {
        let s = NoiseSchedule::default();
        let m = model();
        let cfg = SampleConfig {
            steps: 6,
            mode: SampleMode::Ar,
            seed: 3,
            ..SampleConfig::default()
        };
        let conds: Vec<_> = (0..5).map(cond).collect();
        let all = sample_many(&m, &s, &conds, &cfg).unwrap();
        let one = sample_many(&m, &s, &conds[..1], &cfg).unwrap();
        assert_eq!(all[0], one[0]);
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn config_errors() {
        let s = NoiseSchedule::default();
        let m = model();
        let bad = SampleConfig {
            steps: 0,
            ..SampleConfig::default()
        };
        assert!(sample_single(&m, &s, &cond(1), &bad, &mut rng_from_seed(1)).is_err());
        let bad = SampleConfig {
            w: -1.0,
            ..SampleConfig::default()
        };
        assert!(sample_single(&m, &s, &cond(1), &bad, &mut rng_from_seed(1)).is_err());
        let short = ConditionSequence::new(Matrix::zeros(1, 3));
        assert!(sample_single(&m, &s, &short, &SampleConfig::default(), &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn sample_set_round_trips() {
        let set = SampleSet {
            config: serde_json::json!({"w": 2.0}),
            records: vec![
                SampleRecord {
                    tokens: vec![vec![0.1, -3.25e-7], vec![1.0 / 3.0, 2.0]],
                    cond_mode: Some(1),
                    seed: u64::MAX,
                    plan: vec![2],
                    reference: Some(vec![vec![1.0, 2.0], vec![3.0, 4.0]]),
                },
                SampleRecord {
                    tokens: vec![vec![0.0, 0.5], vec![0.25, 9.0]],
                    cond_mode: None,
                    seed: 3,
                    plan: vec![1, 1],
                    reference: None,
                },
            ],
        };
        let mut buf = Vec::new();
        set.write_jsonl(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("\"ref\":null"));
        assert_eq!(SampleSet::read_jsonl(&buf[..]).unwrap(), set);
        assert!(matches!(
            SampleSet::read_jsonl(&b"{\"config\":1}\n{\"tokens\":[]}\n"[..]),
            Err(Error::Format(_))
        ));
    }
}
