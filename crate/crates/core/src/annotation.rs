//! Event annotations, dataset manifests and per-frame triplet targets.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventInstance {
    pub class_id: usize,
    pub onset_s: f64,
    pub offset_s: f64,
}

impl EventInstance {
    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingAnnotation {
    pub recording_id: String,
    /// Sorted by (class, onset); same-class overlaps already merged.
    pub events: Vec<EventInstance>,
    pub duration_s: f64,
}

/// Class names indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn to_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }
}

/// Union of overlapping (or touching) same-class intervals.
pub fn merge_same_class(mut events: Vec<EventInstance>) -> Vec<EventInstance> {
    events.sort_by(|a, b| {
        a.class_id
            .cmp(&b.class_id)
            .then(a.onset_s.total_cmp(&b.onset_s))
    });
    let mut merged: Vec<EventInstance> = Vec::with_capacity(events.len());
    for e in events {
        match merged.last_mut() {
            Some(last) if last.class_id == e.class_id && e.onset_s <= last.offset_s => {
                last.offset_s = last.offset_s.max(e.offset_s);
            }
            _ => merged.push(e),
        }
    }
    merged
}

pub fn parse_annotations(
    text: &str,
    labels: &LabelMap,
    recording_id: &str,
) -> Result<RecordingAnnotation> {
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{recording_id}:{}", lineno + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(loc(), "expected onset<TAB>offset<TAB>label"));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(loc(), format!("bad time '{s}'")))
        };
        let (onset_s, offset_s) = (num(fields[0])?, num(fields[1])?);
        if onset_s < 0.0 || onset_s >= offset_s {
            return Err(Error::parse(
                loc(),
                format!("onset {onset_s} must be >= 0 and below offset {offset_s}"),
            ));
        }
        let label = fields[2].trim();
        let class_id = labels
            .id(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        events.push(EventInstance {
            class_id,
            onset_s,
            offset_s,
        });
    }
    let events = merge_same_class(events);
    let duration_s = events.iter().map(|e| e.offset_s).fold(0.0, f64::max);
    Ok(RecordingAnnotation {
        recording_id: recording_id.to_string(),
        events,
        duration_s,
    })
}

pub fn load_annotations(path: impl AsRef<Path>, labels: &LabelMap) -> Result<RecordingAnnotation> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_annotations(&text, labels, &id)
}

pub fn format_annotations(ann: &RecordingAnnotation, labels: &LabelMap) -> String {
    let mut events = ann.events.clone();
    events.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.class_id.cmp(&b.class_id))
    });
    events
        .iter()
        .map(|e| {
            format!(
                "{:.3}\t{:.3}\t{}\n",
                e.onset_s,
                e.offset_s,
                labels.name(e.class_id)
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub recording_id: String,
    pub audio_path: PathBuf,
    pub annotation_path: PathBuf,
    pub split: Split,
}

/// Reads "audio_path<TAB>annotation_path<TAB>split" lines. Relative paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), lineno + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(loc, "expected audio<TAB>annotation<TAB>split"));
        }
        let split = Split::parse(fields[2].trim())
            .ok_or_else(|| Error::parse(loc.clone(), format!("bad split '{}'", fields[2])))?;
        let audio_path = base.join(fields[0]);
        let recording_id = audio_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        entries.push(ManifestEntry {
            recording_id,
            audio_path,
            annotation_path: base.join(fields[1]),
            split,
        });
    }
    Ok(entries)
}

pub fn time_to_frame(time_s: f64, hop_s: f64) -> i64 {
    (time_s / hop_s).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameTriplet {
    pub y: f64,
    pub p: f64,
    pub q: f64,
}

/// Supervision for one segment, stored `[t * n_classes + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTarget {
    pub triplets: Vec<FrameTriplet>,
    pub start_frame: usize,
    pub t_len: usize,
    pub n_classes: usize,
}

impl SegmentTarget {
    pub fn get(&self, t: usize, c: usize) -> FrameTriplet {
        self.triplets[t * self.n_classes + c]
    }

    pub fn zeros(start_frame: usize, t_len: usize, n_classes: usize) -> Self {
        Self {
            triplets: vec![FrameTriplet::default(); t_len * n_classes],
            start_frame,
            t_len,
            n_classes,
        }
    }
}

/// Event extents in frames, inclusive on both ends, merged per class.
pub fn event_frames(ann: &RecordingAnnotation, hop_s: f64) -> Vec<(usize, i64, i64)> {
    let mut frames: Vec<(usize, i64, i64)> = ann
        .events
        .iter()
        .map(|e| {
            (
                e.class_id,
                time_to_frame(e.onset_s, hop_s),
                time_to_frame(e.offset_s, hop_s),
            )
        })
        .collect();
    frames.sort();
    let mut merged: Vec<(usize, i64, i64)> = Vec::with_capacity(frames.len());
    for (c, o, f) in frames {
        match merged.last_mut() {
            Some(last) if last.0 == c && o <= last.2 => last.2 = last.2.max(f),
            _ => merged.push((c, o, f)),
        }
    }
    merged
}

/// Renders the triplet targets for frames `start_frame .. start_frame + t_len`.
/// Frames at or beyond `n_frames` (padding) stay all-zero.
pub fn render_segment_target(
    ann: &RecordingAnnotation,
    start_frame: usize,
    t_len: usize,
    hop_s: f64,
    n_classes: usize,
    n_frames: usize,
) -> SegmentTarget {
    let mut target = SegmentTarget::zeros(start_frame, t_len, n_classes);
    let scale = t_len as f64;
    for (c, onset, offset) in event_frames(ann, hop_s) {
        if c >= n_classes {
            continue;
        }
        let lo = onset.max(start_frame as i64);
        let hi = offset
            .min((start_frame + t_len) as i64 - 1)
            .min(n_frames as i64 - 1);
        for n in lo..=hi {
            let t = (n - start_frame as i64) as usize;
            target.triplets[t * n_classes + c] = FrameTriplet {
                y: 1.0,
                p: ((n - onset) as f64 / scale).min(1.0),
                q: ((offset - n) as f64 / scale).min(1.0),
            };
        }
    }
    target
}

/// Segment start frames for every recording, given its frame count.
pub fn sample_training_segments(
    recordings: &[(String, usize)],
    t_len: usize,
    stride: usize,
) -> Vec<(String, usize)> {
    assert!(stride >= 1, "segment stride must be positive");
    let mut out = Vec::new();
    for (id, n_frames) in recordings {
        if *n_frames <= t_len {
            out.push((id.clone(), 0));
            continue;
        }
        let mut start = 0;
        while start + t_len <= *n_frames {
            out.push((id.clone(), start));
            start += stride;
        }
    }
    out
}
