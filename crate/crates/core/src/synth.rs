//! Deterministic synthetic corpora: class-specific harmonic templates mixed
//! into pink noise with exact annotations.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{format_annotations, EventInstance, LabelMap, RecordingAnnotation, Split};
use crate::audio::{hz_to_mel, mel_to_hz, write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::trainer::mix_seed;

pub const MAX_CLASSES: usize = 16;
const FADE_S: f64 = 0.01;
const GRID_S: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub recording_s: f64,
    /// 1 gives isolated events; larger values allow that many to overlap.
    pub max_polyphony: usize,
    pub events_per_recording: (usize, usize),
    pub event_duration_s: (f64, f64),
    pub snr_db: (f64, f64),
    /// Minimum silence between two events of the same class (between any
    /// two events when isolated).
    pub min_gap_s: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_train: 12,
            n_val: 4,
            n_test: 4,
            recording_s: 20.0,
            max_polyphony: 1,
            events_per_recording: (5, 8),
            event_duration_s: (0.4, 1.6),
            snr_db: (6.0, 12.0),
            min_gap_s: 0.5,
            max_attempts: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return bad(format!("n_classes must be in 1..={MAX_CLASSES}"));
        }
        if self.max_polyphony == 0 {
            return bad("max_polyphony must be at least 1".into());
        }
        let (lo, hi) = self.event_duration_s;
        if !(0.2..=3.0).contains(&lo) || !(lo..=3.0).contains(&hi) {
            return bad("event durations must lie in [0.2, 3] s".into());
        }
        if self.events_per_recording.0 > self.events_per_recording.1 {
            return bad("events_per_recording range is reversed".into());
        }
        if self.snr_db.0 > self.snr_db.1 || !(self.recording_s > hi) {
            return bad("snr range reversed or recording shorter than an event".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> LabelMap {
        LabelMap::new(
            (0..self.n_classes)
                .map(|c| format!("class{c:02}"))
                .collect(),
        )
    }

    pub fn splits(&self) -> Vec<(Split, usize)> {
        [
            (Split::Train, self.n_train),
            (Split::Val, self.n_val),
            (Split::Test, self.n_test),
        ]
        .into_iter()
        .flat_map(|(s, n)| (0..n).map(move |i| (s, i)))
        .collect()
    }
}

fn quantize(v: f64) -> f64 {
    (v / GRID_S).round() * GRID_S
}

/// Fundamental of class `c`: classes sit evenly spaced on the mel scale.
pub fn class_f0(c: usize, n_classes: usize) -> f64 {
    let lo = hz_to_mel(150.0);
    let spacing = (3450.0 / n_classes.saturating_sub(1).max(1) as f64).min(600.0);
    mel_to_hz(lo + spacing * c as f64)
}

/// Class-distinctive signal: a three-partial harmonic stack with class
/// specific amplitude modulation plus resonant noise at the fundamental,
/// peak-normalized with 10 ms fades.
pub fn make_template(
    class_id: usize,
    duration_s: f64,
    seed: u64,
    n_classes: usize,
) -> Result<Waveform> {
    if !(0.2..=3.0).contains(&duration_s) {
        return Err(Error::InvalidDuration(duration_s));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class_id as u64));
    let f0 = class_f0(class_id, n_classes) * rng.random_range(0.98..1.02);
    let am_rate = 2.0 + 1.5 * class_id as f64;
    // the same partials for every class, so centroids stay ordered
    let top = class_f0(n_classes.max(1) - 1, n_classes) * 1.02;
    let partials: Vec<(f64, f64)> = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25)]
        .into_iter()
        .filter(|(k, _)| *k == 1.0 || k * top < 0.45 * sr)
        .collect();
    let phases: Vec<f64> = partials
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();

    // two-pole resonator centred on f0
    let r: f64 = 0.995;
    let w0 = 2.0 * PI * f0 / sr;
    let (a1, a2) = (2.0 * r * w0.cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let mut v = 0.0;
        for ((k, amp), ph) in partials.iter().zip(&phases) {
            v += amp * (2.0 * PI * k * f0 * t + ph).sin();
        }
        v *= 1.0 + 0.3 * (2.0 * PI * am_rate * t).sin();
        let x: f64 = rng.random_range(-1.0..1.0);
        let y = x * (1.0 - r) + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        samples.push(v + 2.0 * y);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fade = ((FADE_S * sr) as usize).min(n / 2);
    for (i, s) in samples.iter_mut().enumerate() {
        let g = if i < fade {
            i as f64 / fade as f64
        } else if i >= n - fade {
            (n - 1 - i) as f64 / fade as f64
        } else {
            1.0
        };
        *s *= g / peak;
    }
    Ok(Waveform::new(samples, SAMPLE_RATE))
}

/// Pink noise via Paul Kellet's filter, scaled to unit RMS.
pub fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.random_range(-1.0..1.0);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        out.push(b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362);
        b[6] = w * 0.115926;
    }
    let rms = rms(&out).max(1e-12);
    out.iter_mut().for_each(|v| *v /= rms);
    out
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Largest number of intervals simultaneously active (half-open).
pub fn max_concurrency(events: &[EventInstance]) -> usize {
    let mut points: Vec<(f64, i32)> = events
        .iter()
        .flat_map(|e| [(e.onset_s, 1), (e.offset_s, -1)])
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut cur, mut best) = (0i32, 0i32);
    for (_, d) in points {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}

fn admissible(cfg: &SynthConfig, placed: &[EventInstance], cand: &EventInstance) -> bool {
    let gap = cfg.min_gap_s - 1e-9;
    for e in placed {
        let apart = cand.onset_s >= e.offset_s + gap || e.onset_s >= cand.offset_s + gap;
        if (cfg.max_polyphony == 1 || e.class_id == cand.class_id) && !apart {
            return false;
        }
    }
    if cfg.max_polyphony > 1 {
        let mut all = placed.to_vec();
        all.push(*cand);
        if max_concurrency(&all) > cfg.max_polyphony {
            return false;
        }
    }
    true
}

/// One recording of the given split and index.
pub fn synthesize_recording(
    cfg: &SynthConfig,
    split: Split,
    index: usize,
) -> Result<(Waveform, RecordingAnnotation)> {
    cfg.validate()?;
    let split_key = match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    };
    let rec_seed = mix_seed(mix_seed(cfg.seed, split_key), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(rec_seed);
    let id = format!("{}_{index:03}", split.as_str());
    let (lo, hi) = cfg.events_per_recording;
    let n_events = rng.random_range(lo..=hi);
    let mut events: Vec<EventInstance> = Vec::with_capacity(n_events);
    let mut snrs = Vec::with_capacity(n_events);
    for k in 0..n_events {
        // cycle through classes from a random offset to keep them balanced
        let class_id = (k + rng.random_range(0..cfg.n_classes)) % cfg.n_classes;
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let dur = quantize(rng.random_range(cfg.event_duration_s.0..=cfg.event_duration_s.1));
            let onset = quantize(rng.random_range(0.0..=(cfg.recording_s - dur)));
            let cand = EventInstance {
                class_id,
                onset_s: onset,
                offset_s: quantize(onset + dur),
            };
            if admissible(cfg, &events, &cand) {
                events.push(cand);
                snrs.push(rng.random_range(cfg.snr_db.0..=cfg.snr_db.1));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementFailure(format!(
                "{id}: could not place event {k} after {} attempts",
                cfg.max_attempts
            )));
        }
    }

    let sr = SAMPLE_RATE as f64;
    let n = (cfg.recording_s * sr).round() as usize;
    let mut mix = pink_noise(n, &mut rng);
    for (k, (e, snr)) in events.iter().zip(&snrs).enumerate() {
        let tpl = make_template(
            e.class_id,
            e.offset_s - e.onset_s,
            mix_seed(rec_seed, k as u64),
            cfg.n_classes,
        )?;
        let gain = 10f64.powf(snr / 20.0) / rms(&tpl.samples).max(1e-12);
        let start = (e.onset_s * sr).round() as usize;
        for (i, v) in tpl.samples.iter().enumerate() {
            if let Some(m) = mix.get_mut(start + i) {
                *m += gain * v;
            }
        }
    }
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    mix.iter_mut().for_each(|v| *v *= 0.9 / peak);

    events.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.class_id.cmp(&b.class_id))
    });
    Ok((
        Waveform::new(mix, SAMPLE_RATE),
        RecordingAnnotation {
            recording_id: id,
            events,
            duration_s: cfg.recording_s,
        },
    ))
}

/// Writes `labels.txt`, `manifest.tsv`, `audio/*.wav` and `annotations/*.txt`.
pub fn emit_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["audio", "annotations"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let labels = cfg.class_names();
    let write =
        |path: &Path, text: &str| std::fs::write(path, text).map_err(|e| Error::io(path, e));
    write(&out.join("labels.txt"), &labels.to_text())?;
    let mut manifest = String::new();
    for (split, i) in cfg.splits() {
        let (wave, ann) = synthesize_recording(cfg, split, i)?;
        let wav = format!("audio/{}.wav", ann.recording_id);
        let txt = format!("annotations/{}.txt", ann.recording_id);
        write_wav(out.join(&wav), &wave)?;
        write(&out.join(&txt), &format_annotations(&ann, &labels))?;
        manifest.push_str(&format!("{wav}\t{txt}\t{}\n", split.as_str()));
    }
    let path = out.join("manifest.tsv");
    write(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{load_annotations, load_manifest, render_segment_target};
    use crate::audio::{build_mel_filterbank, compute_logmel, SpectrogramConfig};

    fn small(polyphony: usize) -> SynthConfig {
        SynthConfig {
            n_train: 2,
            n_val: 1,
            n_test: 1,
            recording_s: 8.0,
            events_per_recording: (4, 6),
            max_polyphony: polyphony,
            ..Default::default()
        }
    }

    #[test]
    fn template_is_deterministic_and_checked() {
        let a = make_template(1, 0.5, 9, 4).unwrap();
        assert_eq!(a, make_template(1, 0.5, 9, 4).unwrap());
        assert_eq!(a.samples.len(), 22050);
        assert!(a.samples.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a.samples[0], 0.0);
        assert!(matches!(
            make_template(0, 0.05, 0, 4),
            Err(Error::InvalidDuration(_))
        ));
    }

    /// Energy-weighted mean mel-filter index.
    fn centroid(w: &Waveform) -> f64 {
        let cfg = SpectrogramConfig::default();
        let fb = build_mel_filterbank(&cfg, SAMPLE_RATE).unwrap();
        let spec = compute_logmel(w, &cfg, &fb, "t").unwrap();
        let mut energy = vec![0.0; spec.n_mels];
        for n in 0..spec.n_frames {
            for (m, e) in energy.iter_mut().enumerate() {
                *e += spec.get(m, n).exp();
            }
        }
        let total: f64 = energy.iter().sum();
        energy
            .iter()
            .enumerate()
            .map(|(m, e)| m as f64 * e)
            .sum::<f64>()
            / total
    }

    #[test]
    fn class_centroids_are_separated() {
        for n_classes in [4, 16] {
            let cents: Vec<f64> = (0..n_classes)
                .map(|c| centroid(&make_template(c, 1.0, 3, n_classes).unwrap()))
                .collect();
            for c in 1..n_classes {
                assert!(cents[c] - cents[c - 1] > 2.0, "{n_classes}: {cents:?}");
            }
        }
    }

    #[test]
    fn isolated_regime_never_overlaps() {
        let cfg = small(1);
        for i in 0..4 {
            let (wave, ann) = synthesize_recording(&cfg, Split::Train, i).unwrap();
            assert_eq!(wave.samples.len(), 8 * 44100);
            assert_eq!(max_concurrency(&ann.events), 1);
            for e in &ann.events {
                assert!(e.onset_s >= 0.0 && e.offset_s <= cfg.recording_s + 1e-9);
                assert!(((e.onset_s * 100.0).round() - e.onset_s * 100.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn overlapping_regime_overlaps_within_bound() {
        let cfg = SynthConfig {
            max_polyphony: 3,
            events_per_recording: (8, 12),
            ..Default::default()
        };
        let mut any = false;
        for i in 0..cfg.n_train {
            let (_, ann) = synthesize_recording(&cfg, Split::Train, i).unwrap();
            let k = max_concurrency(&ann.events);
            assert!(k <= 3);
            any |= k >= 2;
        }
        assert!(any);
    }

    #[test]
    fn impossible_density_fails_placement() {
        let cfg = SynthConfig {
            recording_s: 2.0,
            events_per_recording: (6, 6),
            max_attempts: 50,
            ..small(1)
        };
        assert!(matches!(
            synthesize_recording(&cfg, Split::Train, 0),
            Err(Error::PlacementFailure(_))
        ));
    }

    #[test]
    fn targets_recover_boundaries() {
        let cfg = small(1);
        let (_, ann) = synthesize_recording(&cfg, Split::Val, 0).unwrap();
        let hop = 0.02;
        let n_frames = 400;
        let t_len = 400;
        let tgt = render_segment_target(&ann, 0, t_len, hop, cfg.n_classes, n_frames);
        for e in &ann.events {
            let mid = (((e.onset_s + e.offset_s) / 2.0) / hop).round() as usize;
            let tr = tgt.get(mid, e.class_id);
            assert_eq!(tr.y, 1.0);
            let onset = mid as f64 - tr.p * t_len as f64;
            let offset = mid as f64 + tr.q * t_len as f64;
            assert!((onset * hop - e.onset_s).abs() <= hop + 1e-9);
            assert!((offset * hop - e.offset_s).abs() <= hop + 1e-9);
        }
    }

    #[test]
    fn envelope_follows_annotation() {
        // event energy rises above the noise floor at the annotated onset
        let cfg = SynthConfig {
            snr_db: (20.0, 20.0),
            ..small(1)
        };
        let (wave, ann) = synthesize_recording(&cfg, Split::Train, 1).unwrap();
        let spec_cfg = SpectrogramConfig::default();
        let fb = build_mel_filterbank(&spec_cfg, SAMPLE_RATE).unwrap();
        let spec = compute_logmel(&wave, &spec_cfg, &fb, "x").unwrap();
        let f0 = |c| fb.nearest_filter(class_f0(c, cfg.n_classes));
        for e in &ann.events {
            let m = f0(e.class_id);
            let on = (e.onset_s / 0.02).round() as usize;
            let inside = spec.get(m, on + 3);
            let before = spec.get(m, on.saturating_sub(3));
            assert!(inside > before + 1.0, "{e:?}: {before} -> {inside}");
        }
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let cfg = small(2);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let manifest = emit_dataset(&cfg, a.path()).unwrap();
        emit_dataset(&cfg, b.path()).unwrap();
        let entries = load_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 4);
        let labels = LabelMap::load(a.path().join("labels.txt")).unwrap();
        assert_eq!(labels.len(), 4);
        for e in &entries {
            load_annotations(&e.annotation_path, &labels).unwrap();
            let other = b.path().join(e.audio_path.strip_prefix(a.path()).unwrap());
            assert_eq!(
                std::fs::read(&e.audio_path).unwrap(),
                std::fs::read(other).unwrap()
            );
        }
        let ids: std::collections::HashSet<_> =
            entries.iter().map(|e| e.recording_id.clone()).collect();
        assert_eq!(ids.len(), entries.len());
        assert_eq!(
            std::fs::read(a.path().join("manifest.tsv")).unwrap(),
            std::fs::read(b.path().join("manifest.tsv")).unwrap()
        );
    }
}
