//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::path::Path;

use cadiff::datagen::SynthConfig;
use cadiff::denoiser::DenoiserConfig;
use cadiff::diffusion::TrainConfig;
use cadiff::rng::derive_seed;
use cadiff::sampler::{SampleConfig, SampleMode};
use cadiff::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Denoiser width settings. Sequence shapes come from the dataset and the
/// timestep count from the training section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Measured from the training tokens when unset.
    pub data_std: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            d_model: d.d_model,
            n_blocks: d.n_blocks,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            data_std: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub steps: usize,
    pub w: f64,
    pub mode: SampleMode,
    pub gamma: f64,
    pub sizes: Option<Vec<usize>>,
    pub seed: u64,
    /// Samples per run.
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        let s = SampleConfig::default();
        Self {
            steps: s.steps,
            w: s.w,
            mode: s.mode,
            gamma: s.gamma,
            sizes: s.sizes,
            seed: s.seed,
            n: 400,
        }
    }
}

impl SampleSection {
    pub fn sampler(&self) -> SampleConfig {
        SampleConfig {
            steps: self.steps,
            w: self.w,
            mode: self.mode,
            gamma: self.gamma,
            sizes: self.sizes.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every seed not set explicitly is derived from this one.
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sample: SampleSection::default(),
        }
    }
}

impl RunConfig {
    pub fn denoiser(&self, data: &SynthConfig, data_std: f64) -> DenoiserConfig {
        DenoiserConfig {
            d_model: self.model.d_model,
            n_blocks: self.model.n_blocks,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            d_token: data.d_token,
            l: data.l,
            cl: data.cl,
            timesteps: self.train.timesteps,
            data_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if let Some(s) = self.model.data_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("model.data_std must be positive, got {s}")));
            }
        }
        self.denoiser(&self.data, 1.0).validate()?;
        self.sample.sampler().validate(self.train.timesteps)?;
        if self.sample.n == 0 {
            return Err(Error::Config("sample.n must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Layers `base`, then the file, then each `key=value` override, fills the
/// seeds left unset, and validates the result.
pub fn load(base: Option<&RunConfig>, file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut tree = match base {
        Some(b) => Table::try_from(b).map_err(|e| Error::Config(e.to_string()))?,
        None => Table::new(),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let t: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut tree, t);
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
        set_path(&mut tree, key.trim(), parse_value(raw.trim()))?;
    }
    let seed = match tree.get("seed") {
        Some(Value::Integer(i)) if *i >= 0 => *i as u64,
        Some(v) => return Err(Error::Config(format!("seed must be a non-negative integer, got {v}"))),
        None => 0,
    };
    for (section, label) in [("data", "data"), ("sample", "sample")] {
        if lookup(&tree, &[section, "seed"]).is_none() {
            let derived = derive_seed(seed, label);
            // TOML integers are signed; keep the derived seed in range.
            let v = Value::Integer((derived >> 1) as i64);
            set_path(&mut tree, &format!("{section}.seed"), v)?;
        }
    }
    let cfg: RunConfig = Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn lookup<'a>(tree: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (last, init) = path.split_last()?;
    let mut t = tree;
    for p in init {
        t = t.get(*p)?.as_table()?;
    }
    t.get(*last)
}

fn set_path(tree: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (last, init) = parts.split_last().expect("split yields one part");
    let mut t = tree;
    for p in init {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

pub fn is_set(file: Option<&Path>, sets: &[String], key: &str) -> Result<bool> {
    let mut tree = Table::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        tree = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    let path: Vec<&str> = key.split('.').collect();
    Ok(lookup(&tree, &path).is_some()
        || sets
            .iter()
            .any(|s| s.split_once('=').is_some_and(|(k, _)| k.trim() == key)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_seeds_derive() {
        let cfg = load(
            None,
            None,
            &["train.epochs=3".into(), "seed=9".into(), "train.variant=\"full\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.variant.to_string(), "full");
        assert_eq!(cfg.data.seed, derive_seed(9, "data") >> 1);
        let again = load(Some(&cfg), None, &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = load(None, None, &["train.epoch=3".into()]).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        let err = load(None, None, &["model.d_model=130".into()]).unwrap_err();
        assert!(err.to_string().contains("n_heads"), "{err}");
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[train]\nepochs = 7\nlr = 0.01\n").unwrap();
        let cfg = load(None, Some(&path), &["train.epochs=2".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.train.lr), (4, 2, 0.01));
        assert!(is_set(Some(&path), &[], "train.lr").unwrap());
        assert!(!is_set(Some(&path), &[], "sample.steps").unwrap());
    }
}
