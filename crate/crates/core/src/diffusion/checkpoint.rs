//! Binary checkpoint: magic line, one JSON header line, then every parameter
//! as little-endian `f32` in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use crate::denoiser::{layout, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8] = b"CADIFF1\n";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub params: Vec<ParamEntry>,
    /// Free-form copy of the configuration that produced the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl CheckpointHeader {
    pub fn new(
        model: DenoiserConfig,
        train: TrainConfig,
        seed: u64,
        epoch: usize,
        step: usize,
        params: &DenoiserParams<f32>,
    ) -> Self {
        let entries = params
            .weights
            .map(|name, m| ParamEntry {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
            })
            .tensors()
            .into_iter()
            .cloned()
            .collect();
        Self {
            format: FORMAT,
            model,
            train,
            seed,
            epoch,
            step,
            params: entries,
            run_config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: DenoiserParams<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n: usize = self.params.weights.tensors().iter().map(|m| m.len()).sum();
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + header.len() + 1 + 4 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&header);
        out.push(b'\n');
        for m in self.params.weights.tensors() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::Format("not a checkpoint (bad magic)".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {}",
                header.format
            )));
        }
        header.model.validate()?;
        let mut body = &rest[nl + 1..];

        let expected = layout(&header.model);
        let names = expected.names();
        let specs = expected.tensors();
        if header.params.len() != names.len() {
            return Err(Error::Format(format!(
                "header lists {} tensors, model has {}",
                header.params.len(),
                names.len()
            )));
        }
        for ((entry, name), spec) in header.params.iter().zip(&names).zip(&specs) {
            if entry.name != *name || entry.shape != [spec.rows, spec.cols] {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    [spec.rows, spec.cols]
                )));
            }
        }
        let total: usize = specs.iter().map(|s| s.rows * s.cols).sum();
        if body.len() != 4 * total {
            return Err(Error::Format(format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                4 * total
            )));
        }
        let weights = expected.map(|_, s| {
            let n = s.rows * s.cols;
            let (chunk, tail) = body.split_at(4 * n);
            body = tail;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Matrix::from_vec(s.rows, s.cols, data).expect("length checked above")
        });
        Ok(Self {
            params: DenoiserParams {
                config: header.model,
                weights,
            },
            header,
        })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => std::path::PathBuf::from("."),
        };
        let name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::init_params;

    fn ckpt() -> Checkpoint {
        let model = DenoiserConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 8,
            d_token: 3,
            l: 4,
            cl: 1,
            timesteps: 20,
            data_std: 1.0,
        };
        let params = init_params::<f32>(&model, 9).unwrap();
        let header = CheckpointHeader::new(model, TrainConfig::default(), 9, 3, 12, &params);
        Checkpoint { header, params }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = ckpt();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[1..]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut wrong = ckpt();
        wrong.header.params[0].name = "bogus".into();
        assert!(matches!(
            Checkpoint::from_bytes(&wrong.to_bytes().unwrap()),
            Err(Error::Format(_))
        ));
    }
}
