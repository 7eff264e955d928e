//! Synthetic conditional latent sequences with known mode structure.
//!
//! Each sample belongs to one of `k` modes. Its tokens are the mode center
//! plus an AR(1) process along the sequence, and its condition is a fixed
//! random projection of the mode's one-hot code, lightly jittered.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{derive_seed, derived_rng, rng_from_seed};

const CENTER_STD: f64 = 2.0;
const COND_JITTER_STD: f64 = 0.1;
const MAX_CENTER_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of modes.
    pub k: usize,
    /// Number of samples.
    pub n: usize,
    pub l: usize,
    pub d_token: usize,
    /// Lag-1 correlation of the token noise.
    pub rho: f64,
    pub sigma: f64,
    pub cl: usize,
    pub seed: u64,
    /// Redraw the centers until every pair is at least this far apart.
    pub min_center_dist: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k: 4,
            n: 4000,
            l: 8,
            d_token: 16,
            rho: 0.7,
            sigma: 1.0,
            cl: 2,
            seed: 0,
            min_center_dist: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("data.k must be at least 2, got {}", self.k)));
        }
        for (name, v) in [("n", self.n), ("l", self.l), ("d_token", self.d_token), ("cl", self.cl)] {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("data.rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("data.sigma must be positive, got {}", self.sigma)));
        }
        if let Some(d) = self.min_center_dist {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::Config(format!(
                    "data.min_center_dist must be non-negative, got {d}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// `cl x d_token`.
    pub cond: Matrix<f64>,
    /// `l x d_token`.
    pub x0: Matrix<f64>,
    pub mode: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    /// `k x d_token`.
    pub centers: Matrix<f64>,
    /// `k x d_token` map from one-hot mode codes to condition tokens.
    pub projection: Matrix<f64>,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    centers: Vec<Vec<f64>>,
    projection: Vec<Vec<f64>>,
    config: SynthConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    cond: Vec<Vec<f64>>,
    x0: Vec<Vec<f64>>,
    mode: usize,
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn min_pair_dist(centers: &Matrix<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..centers.rows() {
        for b in a + 1..centers.rows() {
            best = best.min(sq_dist(centers.row(a), centers.row(b)).sqrt());
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn draw_centers(cfg: &SynthConfig) -> Result<Matrix<f64>> {
    let mut rng = derived_rng(cfg.seed, "centers");
    for _ in 0..MAX_CENTER_DRAWS {
        let c = normal_matrix(&mut rng, cfg.k, cfg.d_token, CENTER_STD);
        match cfg.min_center_dist {
            Some(d) if min_pair_dist(&c) < d => continue,
            _ => return Ok(c),
        }
    }
    Err(Error::Config(format!(
        "no center draw met data.min_center_dist = {:?} after {MAX_CENTER_DRAWS} attempts",
        cfg.min_center_dist
    )))
}

/// Generates the dataset. Sample `i` uses its own derived stream.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let centers = draw_centers(cfg)?;
    let projection = normal_matrix(&mut derived_rng(cfg.seed, "projection"), cfg.k, cfg.d_token, 1.0);
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let innov = (1.0 - cfg.rho * cfg.rho).sqrt();
    let sample_seed = derive_seed(cfg.seed, "records");

    let records = (0..cfg.n)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(sample_seed, &i.to_string()));
            let mode = rng.random_range(0..cfg.k);
            let mut u: Vec<f64> = (0..cfg.d_token).map(|_| noise.sample(&mut rng)).collect();
            let mut x0 = Matrix::zeros(cfg.l, cfg.d_token);
            for t in 0..cfg.l {
                if t > 0 {
                    for v in &mut u {
                        *v = cfg.rho * *v + innov * noise.sample(&mut rng);
                    }
                }
                for (j, x) in x0.row_mut(t).iter_mut().enumerate() {
                    *x = centers.get(mode, j) + u[j];
                }
            }
            let cond = Matrix::from_fn(cfg.cl, cfg.d_token, |_, j| {
                projection.get(mode, j) + COND_JITTER_STD * rng.sample::<f64, _>(StandardNormal)
            });
            Record { cond, x0, mode }
        })
        .collect();
    Ok(Dataset {
        config: *cfg,
        centers,
        projection,
        records,
    })
}

/// Index of the center nearest to the token mean of `x`; lowest index on ties.
pub fn assign_mode(x: &Matrix<f64>, centers: &Matrix<f64>) -> Result<usize> {
    if centers.rows() == 0 {
        return Err(Error::Contract("no mode centers".into()));
    }
    if x.rows() == 0 || x.cols() != centers.cols() {
        return Err(Error::Contract(format!(
            "sample {:?} does not match centers of width {}",
            x.shape(),
            centers.cols()
        )));
    }
    let mean = x.col_sums().scale(1.0 / x.rows() as f64);
    let mut best = (0, f64::INFINITY);
    for k in 0..centers.rows() {
        let d = sq_dist(mean.row(0), centers.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

impl Dataset {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = HeaderJson {
            centers: self.centers.to_rows(),
            projection: self.projection.to_rows(),
            config: self.config,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let rec = RecordJson {
                cond: r.cond.to_rows(),
                x0: r.x0.to_rows(),
                mode: r.mode,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("dataset file is empty".into()))?;
        let header: HeaderJson = serde_json::from_str(&first?)
            .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        let centers = Matrix::from_rows(&header.centers)?;
        let projection = Matrix::from_rows(&header.projection)?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordJson = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("dataset line {}: {e}", i + 1)))?;
            let cond = Matrix::from_rows(&rec.cond)?;
            let x0 = Matrix::from_rows(&rec.x0)?;
            if rec.mode >= centers.rows() {
                return Err(Error::Format(format!(
                    "dataset line {}: mode {} but only {} centers",
                    i + 1,
                    rec.mode,
                    centers.rows()
                )));
            }
            records.push(Record {
                cond,
                x0,
                mode: rec.mode,
            });
        }
        Ok(Self {
            config: header.config,
            centers,
            projection,
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

    /// `n` record indices cycling through the modes: entry `i` is the
    /// `(i / k)`-th record of mode `i % k`.
    pub fn round_robin(&self, n: usize) -> Result<Vec<usize>> {
        let k = self.centers.rows();
        let picked = self.pick_per_mode(n.div_ceil(k))?;
        let per_mode = picked.len() / k;
        Ok((0..n).map(|i| picked[(i % k) * per_mode + i / k]).collect())
    }

    /// Indices of the first `per_mode` records of each mode, grouped by mode.
    pub fn pick_per_mode(&self, per_mode: usize) -> Result<Vec<usize>> {
        let k = self.centers.rows();
        let mut picked: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, r) in self.records.iter().enumerate() {
            if picked[r.mode].len() < per_mode {
                picked[r.mode].push(i);
            }
        }
        if let Some(m) = picked.iter().position(|p| p.len() < per_mode) {
            return Err(Error::Config(format!(
                "mode {m} has only {} records, {per_mode} requested",
                picked[m].len()
            )));
        }
        Ok(picked.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lag1_corr(ds: &Dataset) -> f64 {
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for r in &ds.records {
            let u = |t: usize, j: usize| r.x0.get(t, j) - ds.centers.get(r.mode, j);
            for t in 0..r.x0.rows() - 1 {
                for j in 0..r.x0.cols() {
                    let (a, b) = (u(t, j), u(t + 1, j));
                    sxy += a * b;
                    sxx += a * a;
                    syy += b * b;
                }
            }
        }
        sxy / (sxx * syy).sqrt()
    }

    fn cfg(n: usize, rho: f64, sigma: f64) -> SynthConfig {
        SynthConfig {
            n,
            rho,
            sigma,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn uncorrelated_tokens_at_zero_rho() {
        let ds = gen_dataset(&SynthConfig {
            d_token: 1,
            ..cfg(12_500, 0.0, 1.0)
        })
        .unwrap();
        assert!(lag1_corr(&ds).abs() < 0.05);
    }

    #[test]
    fn lag_one_correlation_matches_rho() {
        let ds = gen_dataset(&SynthConfig {
            d_token: 1,
            ..cfg(12_500, 0.9, 1.0)
        })
        .unwrap();
        assert!((lag1_corr(&ds) - 0.9).abs() < 0.05);
    }

    #[test]
    fn vanishing_noise_sits_on_centers() {
        let ds = gen_dataset(&cfg(500, 0.7, 1e-6)).unwrap();
        for r in &ds.records {
            assert_eq!(assign_mode(&r.x0, &ds.centers).unwrap(), r.mode);
            for t in 0..r.x0.rows() {
                for j in 0..r.x0.cols() {
                    assert!((r.x0.get(t, j) - ds.centers.get(r.mode, j)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn assign_mode_ties_and_exact_centers() {
        let centers = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]]).unwrap();
        let on = Matrix::from_rows(&[[-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(assign_mode(&on, &centers).unwrap(), 1);
        let mid = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(assign_mode(&mid, &centers).unwrap(), 0);
        assert!(assign_mode(&mid, &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn separated_modes_are_recovered() {
        let ds = gen_dataset(&SynthConfig {
            min_center_dist: Some(10.0),
            ..cfg(4000, 0.7, 1.0)
        })
        .unwrap();
        let hits = ds
            .records
            .iter()
            .filter(|r| assign_mode(&r.x0, &ds.centers).unwrap() == r.mode)
            .count();
        assert!(hits as f64 / 4000.0 >= 0.99);
        assert!(min_pair_dist(&ds.centers) >= 10.0);
    }

    #[test]
    fn modes_are_balanced() {
        let c = cfg(4000, 0.7, 1.0);
        let ds = gen_dataset(&c).unwrap();
        let mut counts = vec![0usize; c.k];
        for r in &ds.records {
            counts[r.mode] += 1;
        }
        let k = c.k as f64;
        let tol = 3.0 * (c.n as f64 * (k - 1.0) / (k * k)).sqrt();
        for n in counts {
            assert!((n as f64 - c.n as f64 / k).abs() <= tol);
        }
    }

    #[test]
    fn round_robin_cycles_modes_without_repeats() {
        let ds = gen_dataset(&cfg(200, 0.7, 1.0)).unwrap();
        let idx = ds.round_robin(10).unwrap();
        let modes: Vec<usize> = idx.iter().map(|&i| ds.records[i].mode).collect();
        assert_eq!(modes, [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
        let mut uniq = idx.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), idx.len());
        assert!(ds.round_robin(1000).is_err());
    }

    #[test]
    fn reproducible_and_round_trips() {
        let c = cfg(50, 0.7, 1.0);
        let a = gen_dataset(&c).unwrap();
        assert_eq!(a, gen_dataset(&c).unwrap());
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, a);
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        assert_eq!(buf, again);
        let first = std::str::from_utf8(&buf).unwrap().lines().nth(1).unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        assert!(v["cond"].is_array() && v["x0"].is_array() && v["mode"].is_u64());
    }

    #[test]
    fn condition_identifies_mode() {
        let ds = gen_dataset(&cfg(200, 0.7, 1.0)).unwrap();
        for r in &ds.records {
            assert_eq!(assign_mode(&r.cond, &ds.projection).unwrap(), r.mode);
        }
    }

    #[test]
    fn config_errors() {
        for bad in [
            SynthConfig { k: 1, ..SynthConfig::default() },
            SynthConfig { rho: 1.0, ..SynthConfig::default() },
            SynthConfig { sigma: 0.0, ..SynthConfig::default() },
            SynthConfig { n: 0, ..SynthConfig::default() },
        ] {
            assert!(matches!(gen_dataset(&bad), Err(Error::Config(_))));
        }
        let impossible = SynthConfig {
            n: 1,
            min_center_dist: Some(1e6),
            ..SynthConfig::default()
        };
        assert!(gen_dataset(&impossible).is_err());
    }
}
