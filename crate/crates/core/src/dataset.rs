//! Recordings prepared for training and decoding: standardized features
//! next to their annotation.

use std::path::Path;

use crate::annotation::{
    load_annotations, load_manifest, LabelMap, ManifestEntry, RecordingAnnotation, Split,
};
use crate::audio::{
    build_mel_filterbank, compute_logmel, fit_standardizer, load_wav, LogMelSpectrogram,
    SpectrogramConfig, Standardizer,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    /// Standardized log-mel values, frame-major.
    pub features: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub annotation: RecordingAnnotation,
}

/// Raw spectrograms of a manifest, grouped by split.
pub struct Corpus {
    pub entries: Vec<(ManifestEntry, LogMelSpectrogram, RecordingAnnotation)>,
    pub hop_s: f64,
}

impl Corpus {
    pub fn load(
        manifest: impl AsRef<Path>,
        labels: &LabelMap,
        spec: &SpectrogramConfig,
    ) -> Result<Self> {
        let entries = load_manifest(manifest)?;
        if entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut fb = None;
        let mut out = Vec::with_capacity(entries.len());
        for entry in entries {
            let wave = load_wav(&entry.audio_path)?;
            if fb.is_none() {
                spec.validate(wave.sample_rate)?;
                fb = Some(build_mel_filterbank(spec, wave.sample_rate)?);
            }
            let mel = compute_logmel(&wave, spec, fb.as_ref().unwrap(), &entry.recording_id)?;
            let ann = load_annotations(&entry.annotation_path, labels)?;
            let ann = RecordingAnnotation {
                recording_id: entry.recording_id.clone(),
                ..ann
            };
            out.push((entry, mel, ann));
        }
        Ok(Self {
            entries: out,
            hop_s: spec.hop_s(),
        })
    }

    pub fn split(
        &self,
        split: Split,
    ) -> impl Iterator<Item = &(ManifestEntry, LogMelSpectrogram, RecordingAnnotation)> {
        self.entries
            .iter()
            .filter(move |(e, _, _)| e.split == split)
    }

    /// Standardizer fitted on the training split only.
    pub fn fit_standardizer(&self) -> Result<Standardizer> {
        let specs: Vec<&LogMelSpectrogram> = self.split(Split::Train).map(|(_, s, _)| s).collect();
        if specs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        fit_standardizer(&specs)
    }

    pub fn prepare(&self, split: Split, st: &Standardizer) -> Result<Vec<Recording>> {
        self.split(split)
            .map(|(_, spec, ann)| prepare_recording(spec, ann.clone(), st))
            .collect()
    }
}

pub fn prepare_recording(
    spec: &LogMelSpectrogram,
    annotation: RecordingAnnotation,
    st: &Standardizer,
) -> Result<Recording> {
    Ok(Recording {
        id: spec.recording_id.clone(),
        features: st.apply(spec)?,
        n_frames: spec.n_frames,
        n_mels: spec.n_mels,
        annotation,
    })
}
