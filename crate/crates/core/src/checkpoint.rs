//! Self-contained model file: configuration, feature standardizer, tuned
//! thresholds and parameters.
//!
//! Layout: `PAED` · u32 version · u32 header length · JSON header ·
//! little-endian f64 blocks · CRC32 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{SpectrogramConfig, Standardizer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::Thresholds;
use crate::model::{bn_names, param_layout, BnState, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"PAED";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub spectrogram: SpectrogramConfig,
    pub class_names: Vec<String>,
    pub standardizer: Standardizer,
    pub thresholds: Thresholds,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    spectrogram: SpectrogramConfig,
    class_names: Vec<String>,
    thresholds: Thresholds,
    bn_updates: Vec<(String, u64)>,
    /// Offsets count f64 values from the start of the data section.
    blocks: Vec<BlockEntry>,
}

impl Checkpoint {
    fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape.clone(), t.data.as_slice()))
            .collect();
        for bn in &self.params.bn {
            out.push((
                format!("{}.running_mean", bn.name),
                vec![bn.mean.len()],
                &bn.mean,
            ));
            out.push((
                format!("{}.running_var", bn.name),
                vec![bn.var.len()],
                &bn.var,
            ));
        }
        out.push((
            "standardizer.mean".into(),
            vec![self.standardizer.mean.len()],
            &self.standardizer.mean,
        ));
        out.push((
            "standardizer.std".into(),
            vec![self.standardizer.std.len()],
            &self.standardizer.std,
        ));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in self.blocks() {
            blocks.push(BlockEntry {
                name,
                shape,
                offset,
            });
            offset += data.len();
        }
        let header = Header {
            model: self.model.clone(),
            spectrogram: self.spectrogram.clone(),
            class_names: self.class_names.clone(),
            thresholds: self.thresholds.clone(),
            bn_updates: self
                .params
                .bn
                .iter()
                .map(|b| (b.name.clone(), b.updates))
                .collect(),
            blocks,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in self.blocks() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptFile(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic or too short)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let json = body
            .get(12..12 + hlen)
            .ok_or_else(|| corrupt("header overruns file"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::CorruptFile(format!("header: {e}")))?;
        let data = &body[12 + hlen..];
        if data.len() % 8 != 0 {
            return Err(corrupt("data section is not a whole number of values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let block = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let e = header
                .blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::CorruptFile(format!("missing block {name}")))?;
            if e.shape != shape {
                return Err(Error::CorruptFile(format!(
                    "block {name} has shape {:?}, expected {shape:?}",
                    e.shape
                )));
            }
            let len: usize = shape.iter().product();
            values
                .get(e.offset..e.offset + len)
                .map(|s| s.to_vec())
                .ok_or_else(|| Error::CorruptFile(format!("block {name} overruns data")))
        };

        header.model.validate()?;
        let tensors = param_layout(&header.model)
            .into_iter()
            .map(|(name, shape)| {
                let data = block(&name, &shape)?;
                Ok((name, Tensor { shape, data }))
            })
            .collect::<Result<Vec<_>>>()?;
        let bn = bn_names(&header.model)
            .into_iter()
            .map(|(name, ch)| {
                let updates = header
                    .bn_updates
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, u)| *u)
                    .ok_or_else(|| {
                        Error::CorruptFile(format!("missing update count for {name}"))
                    })?;
                Ok(BnState {
                    mean: block(&format!("{name}.running_mean"), &[ch])?,
                    var: block(&format!("{name}.running_var"), &[ch])?,
                    name,
                    updates,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_mels = header.spectrogram.n_mels;
        let standardizer = Standardizer {
            mean: block("standardizer.mean", &[n_mels])?,
            std: block("standardizer.std", &[n_mels])?,
        };
        Ok(Self {
            model: header.model,
            spectrogram: header.spectrogram,
            class_names: header.class_names,
            standardizer,
            thresholds: header.thresholds,
            params: ModelParams { tensors, bn },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Guards fine-tuning or ensembling against an incompatible network.
    pub fn ensure_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.model != cfg {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model {:?} differs from requested {:?}",
                self.model, cfg
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BatchStats;
    use crate::model::init_params;

    fn sample(n_classes: usize) -> Checkpoint {
        let model = ModelConfig {
            n_mels: 10,
            context_frames: 8,
            n_classes,
            filters: 4,
            hidden: 3,
            pool_sizes: vec![5, 2],
            kernel_size: 5,
            dropout: 0.25,
        };
        let mut params = init_params(&model, 3).unwrap();
        for (i, bn) in params.bn.iter_mut().enumerate() {
            let c = bn.mean.len();
            bn.update(&BatchStats {
                mean: (0..c).map(|k| (k as f64 * 0.37 + i as f64).sin()).collect(),
                var: (0..c).map(|k| 1.0 / (k as f64 + 1.7)).collect(),
            });
        }
        Checkpoint {
            model,
            spectrogram: SpectrogramConfig {
                n_mels: 10,
                ..Default::default()
            },
            class_names: (0..n_classes).map(|c| format!("class{c}")).collect(),
            standardizer: Standardizer {
                mean: (0..10).map(|k| -3.0 + k as f64 / 7.0).collect(),
                std: (0..10).map(|k| 0.1 + k as f64 / 3.0).collect(),
            },
            thresholds: Thresholds {
                alpha: vec![0.37; n_classes],
                beta: vec![0.1 + 0.2; n_classes],
                baseline_alpha: vec![0.01; n_classes],
                median_windows: vec![7; n_classes],
            },
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample(3);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.paed");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample(2).to_bytes().unwrap();
        for cut in [3, 15, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::CorruptFile(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(Error::CorruptFile(_))
        ));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample(2).to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch {
                found: 7,
                expected: 1
            })
        ));
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let ck = sample(2);
        let other = ModelConfig {
            n_classes: 3,
            ..ck.model.clone()
        };
        assert!(matches!(
            ck.ensure_compatible(&other),
            Err(Error::ConfigMismatch(_))
        ));
        assert!(ck.ensure_compatible(&ck.model).is_ok());
    }
}
