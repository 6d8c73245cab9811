//! The single JSON run configuration, one section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{SpectrogramConfig, SAMPLE_RATE};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::metrics::MatchConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub spectrogram: SpectrogramConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decoder: DecoderConfig,
    pub matching: MatchConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.spectrogram.validate(SAMPLE_RATE)?;
        self.model.validate()?;
        self.train.validate()?;
        self.matching.validate()?;
        self.synth.validate()?;
        if self.model.n_mels != self.spectrogram.n_mels {
            return Err(Error::InvalidConfig(format!(
                "model expects {} mel bins but the spectrogram has {}",
                self.model.n_mels, self.spectrogram.n_mels
            )));
        }
        if self.decoder.batch_size == 0 || self.decoder.segment_hop == Some(0) {
            return Err(Error::InvalidConfig(
                "decoder batch_size and segment_hop must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Settings sized for a laptop CPU: 64-frame context, a narrower
    /// network without dropout, and synthetic events short enough that most
    /// fit inside one segment.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                context_frames: 64,
                filters: 32,
                hidden: 32,
                dropout: 0.0,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 40,
                lr: 2e-3,
                ..Default::default()
            },
            synth: SynthConfig {
                event_duration_s: (0.3, 1.2),
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert!(RunConfig::desk().validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"modle": {}}"#),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"filterz": 3}}"#),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn section_invariants_enforced() {
        let bad = r#"{"model": {"pool_sizes": [5, 4]}}"#;
        assert!(matches!(
            RunConfig::from_json(bad),
            Err(Error::InvalidConfig(_))
        ));
        let bad = r#"{"train": {"batch_size": 0}}"#;
        assert!(matches!(
            RunConfig::from_json(bad),
            Err(Error::InvalidConfig(_))
        ));
        let bad = r#"{"synth": {"max_polyphony": 0}}"#;
        assert!(RunConfig::from_json(bad).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
