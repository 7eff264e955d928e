//! Latent-space quality metrics over sets of generated sequences.
//!
//! Similarity between two sequences is the cosine of their flattened token
//! matrices. Diversity is reported halved so that it lies in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::datagen::assign_mode;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const SIMILARITY_THRESHOLD: f64 = 0.5;
pub const NOVELTY_THRESHOLD: f64 = 0.8;
pub const UNIQUENESS_THRESHOLD: f64 = 0.99;
pub const VALIDITY_RMS_FACTOR: f64 = 10.0;

pub fn cos_sim(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Metric(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (na, nb) = (a.frobenius(), b.frobenius());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("cosine of a zero-norm sequence".into()));
    }
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn non_empty(gen: &[Matrix<f64>], what: &str) -> Result<()> {
    if gen.is_empty() {
        return Err(Error::Metric(format!("{what} needs at least one sample")));
    }
    Ok(())
}

/// Similarity of each generated sequence to its paired reference.
pub fn pair_similarities(gen: &[Matrix<f64>], refs: &[Matrix<f64>]) -> Result<Vec<f64>> {
    if gen.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} samples but {} references",
            gen.len(),
            refs.len()
        )));
    }
    gen.iter().zip(refs).map(|(g, r)| cos_sim(g, r)).collect()
}

/// Fraction of pairs with similarity above the qualification threshold.
pub fn similarity_rate(gen: &[Matrix<f64>], refs: &[Matrix<f64>]) -> Result<f64> {
    non_empty(gen, "similarity")?;
    let sims = pair_similarities(gen, refs)?;
    Ok(sims.iter().filter(|&&s| s > SIMILARITY_THRESHOLD).count() as f64 / sims.len() as f64)
}

/// Fraction of samples whose best match in `train` is below `threshold`.
pub fn novelty_rate(gen: &[Matrix<f64>], train: &[Matrix<f64>], threshold: f64) -> Result<f64> {
    non_empty(gen, "novelty")?;
    non_empty(train, "novelty reference set")?;
    let mut novel = 0;
    for g in gen {
        let mut best = f64::NEG_INFINITY;
        for t in train {
            best = best.max(cos_sim(g, t)?);
        }
        if best < threshold {
            novel += 1;
        }
    }
    Ok(novel as f64 / gen.len() as f64)
}

/// Mean pairwise `1 - cos`, halved into `[0, 1]`.
pub fn diversity_mean(gen: &[Matrix<f64>]) -> Result<f64> {
    if gen.len() < 2 {
        return Err(Error::Metric("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..gen.len() {
        for j in i + 1..gen.len() {
            total += 1.0 - cos_sim(&gen[i], &gen[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64 / 2.0)
}

/// Fraction of samples not within `threshold` cosine of an earlier sample.
pub fn uniqueness_rate(gen: &[Matrix<f64>], threshold: f64) -> Result<f64> {
    non_empty(gen, "uniqueness")?;
    let mut unique = 0;
    for i in 0..gen.len() {
        let mut dup = false;
        for j in 0..i {
            if cos_sim(&gen[i], &gen[j])? >= threshold {
                dup = true;
                break;
            }
        }
        if !dup {
            unique += 1;
        }
    }
    Ok(unique as f64 / gen.len() as f64)
}

/// Root mean square of token norms over a set of sequences.
pub fn token_rms(seqs: &[Matrix<f64>]) -> Result<f64> {
    let rows: usize = seqs.iter().map(|s| s.rows()).sum();
    if rows == 0 {
        return Err(Error::Metric("no tokens".into()));
    }
    Ok((seqs.iter().map(|s| s.sum_squares()).sum::<f64>() / rows as f64).sqrt())
}

/// Fraction of samples that are finite with every token norm below `bound`.
pub fn validity_rate(gen: &[Matrix<f64>], bound: f64) -> Result<f64> {
    non_empty(gen, "validity")?;
    let ok = gen
        .iter()
        .filter(|g| {
            g.is_finite()
                && (0..g.rows()).all(|r| g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() < bound)
        })
        .count();
    Ok(ok as f64 / gen.len() as f64)
}

/// Fraction of samples nearest to the center of their target mode.
pub fn mode_accuracy(gen: &[Matrix<f64>], targets: &[usize], centers: &Matrix<f64>) -> Result<f64> {
    non_empty(gen, "mode accuracy")?;
    if gen.len() != targets.len() {
        return Err(Error::Metric(format!(
            "{} samples but {} target modes",
            gen.len(),
            targets.len()
        )));
    }
    let mut hits = 0;
    for (g, &t) in gen.iter().zip(targets) {
        if assign_mode(g, centers)? == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / gen.len() as f64)
}

/// Share of samples assigned to each mode.
pub fn mode_shares(gen: &[Matrix<f64>], centers: &Matrix<f64>) -> Result<Vec<f64>> {
    non_empty(gen, "mode shares")?;
    let mut counts = vec![0usize; centers.rows()];
    for g in gen {
        counts[assign_mode(g, centers)?] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / gen.len() as f64).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub similarity: Option<f64>,
    pub novelty: Option<f64>,
    /// Mean pairwise distance, halved into `[0, 1]`.
    pub diversity: Option<f64>,
    pub validity: Option<f64>,
    pub uniqueness: Option<f64>,
    pub mode_accuracy: Option<f64>,
    pub overall: Option<f64>,
}

impl MetricReport {
    fn present(&self) -> Vec<f64> {
        [
            self.similarity,
            self.novelty,
            self.diversity,
            self.validity,
            self.uniqueness,
            self.mode_accuracy,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    /// Fills `overall` from the fields that are present.
    pub fn with_overall(mut self) -> Self {
        self.overall = overall(&self);
        self
    }
}

/// Mean of the present metric fields, `None` when none are present.
pub fn overall(report: &MetricReport) -> Option<f64> {
    let v = report.present();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// What the evaluation has to work with.
pub struct EvalInputs<'a> {
    pub gen: &'a [Matrix<f64>],
    /// Paired references, one per generated sample.
    pub refs: Option<&'a [Matrix<f64>]>,
    pub train: &'a [Matrix<f64>],
    pub centers: Option<&'a Matrix<f64>>,
    /// Target mode of each generated sample.
    pub targets: Option<&'a [usize]>,
}

/// Computes every metric the inputs allow. With references, novelty and
/// diversity are taken over the qualified samples (similarity above the
/// threshold) and are absent when fewer than needed qualify.
pub fn evaluate(inp: &EvalInputs<'_>) -> Result<MetricReport> {
    let gen = inp.gen;
    non_empty(gen, "evaluation")?;
    let bound = VALIDITY_RMS_FACTOR * token_rms(inp.train)?;
    let validity = validity_rate(gen, bound)?;
    // Later metrics need finite, nonzero samples.
    let usable: Vec<usize> = (0..gen.len())
        .filter(|&i| gen[i].is_finite() && gen[i].frobenius() > 0.0)
        .collect();
    let pick = |idx: &[usize]| idx.iter().map(|&i| gen[i].clone()).collect::<Vec<_>>();

    let mut report = MetricReport {
        validity: Some(validity),
        ..MetricReport::default()
    };
    let pool: Vec<usize> = match inp.refs {
        Some(refs) => {
            if refs.len() != gen.len() {
                return Err(Error::Metric("one reference per sample is required".into()));
            }
            let paired: Vec<Matrix<f64>> = usable.iter().map(|&i| refs[i].clone()).collect();
            let sims = pair_similarities(&pick(&usable), &paired)?;
            let qualified: Vec<usize> = usable
                .iter()
                .zip(&sims)
                .filter(|(_, &s)| s > SIMILARITY_THRESHOLD)
                .map(|(&i, _)| i)
                .collect();
            report.similarity = Some(qualified.len() as f64 / gen.len() as f64);
            qualified
        }
        None => usable.clone(),
    };
    let pool_set = pick(&pool);
    if !pool_set.is_empty() {
        report.novelty = Some(novelty_rate(&pool_set, inp.train, NOVELTY_THRESHOLD)?);
    }
    if pool_set.len() >= 2 {
        report.diversity = Some(diversity_mean(&pool_set)?);
    }
    if !usable.is_empty() {
        let u = uniqueness_rate(&pick(&usable), UNIQUENESS_THRESHOLD)?;
        report.uniqueness = Some(u * usable.len() as f64 / gen.len() as f64);
    }
    if let (Some(centers), Some(targets)) = (inp.centers, inp.targets) {
        if targets.len() != gen.len() {
            return Err(Error::Metric("one target mode per sample is required".into()));
        }
        let hits = usable
            .iter()
            .filter(|&&i| assign_mode(&gen[i], centers).map(|m| m == targets[i]).unwrap_or(false))
            .count();
        report.mode_accuracy = Some(hits as f64 / gen.len() as f64);
    }
    Ok(report.with_overall())
}
