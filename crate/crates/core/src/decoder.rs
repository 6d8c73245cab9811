//! Confidence accumulation over sliding segments, run extraction, and the
//! median-filter baseline decode.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotation::{EventInstance, LabelMap};
use crate::error::{Error, Result};
use crate::model::{predict, segment_input, ModelConfig, ModelParams, PredictionSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Hop between test segments in frames; `None` means T (no overlap).
    pub segment_hop: Option<usize>,
    /// Use p̂ for both ROI bounds instead of p̂ before / q̂ after.
    pub symmetric_roi: bool,
    /// Segments per inference batch.
    pub batch_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            segment_hop: None,
            symmetric_roi: false,
            batch_size: 8,
        }
    }
}

impl DecoderConfig {
    pub fn hop(&self, t_len: usize) -> usize {
        self.segment_hop.unwrap_or(t_len).max(1)
    }
}

/// Per-class score per frame, stored `[c * n_frames + n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTrack {
    pub n_classes: usize,
    pub n_frames: usize,
    pub scores: Vec<f64>,
    pub normalized: bool,
}

impl ConfidenceTrack {
    pub fn zeros(n_classes: usize, n_frames: usize) -> Self {
        Self {
            n_classes,
            n_frames,
            scores: vec![0.0; n_classes * n_frames],
            normalized: false,
        }
    }

    pub fn class(&self, c: usize) -> &[f64] {
        &self.scores[c * self.n_frames..(c + 1) * self.n_frames]
    }

    pub fn get(&self, c: usize, n: usize) -> f64 {
        self.scores[c * self.n_frames + n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedEvent {
    pub class_id: usize,
    /// First and last frame, inclusive.
    pub onset_frame: usize,
    pub offset_frame: usize,
    pub peak_score: f64,
}

impl DetectedEvent {
    pub fn to_instance(&self, hop_s: f64) -> EventInstance {
        EventInstance {
            class_id: self.class_id,
            onset_s: self.onset_frame as f64 * hop_s,
            offset_s: self.offset_frame as f64 * hop_s,
        }
    }
}

/// Frame range whose confidence step `t` of a segment starting at `start`
/// supports, clipped to the recording.
pub fn roi(
    start: usize,
    t: usize,
    p_hat: f64,
    q_hat: f64,
    t_len: usize,
    n_frames: usize,
    symmetric: bool,
) -> Option<(usize, usize)> {
    let scale = t_len as f64;
    let centre = (start + t) as i64;
    let before = (p_hat * scale).round() as i64;
    let after = if symmetric {
        before
    } else {
        (q_hat * scale).round() as i64
    };
    let lo = (centre - before).max(0);
    let hi = (centre + after).min(n_frames as i64 - 1);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Adds one segment's gated activity likelihoods over their ROIs.
pub fn segment_contribution(
    track: &mut ConfidenceTrack,
    pred: &PredictionSequence,
    start: usize,
    alpha: &[f64],
    symmetric: bool,
) {
    let n_frames = track.n_frames;
    for t in 0..pred.t_len {
        if start + t >= n_frames {
            break;
        }
        for (c, &a) in alpha.iter().enumerate().take(pred.n_classes) {
            let y = pred.y(t, c);
            if y <= a {
                continue;
            }
            if let Some((lo, hi)) = roi(
                start,
                t,
                pred.p(t, c),
                pred.q(t, c),
                pred.t_len,
                n_frames,
                symmetric,
            ) {
                for s in &mut track.scores[c * n_frames + lo..=c * n_frames + hi] {
                    *s += y;
                }
            }
        }
    }
}

/// Raw track of one model: the sum of all segment contributions.
pub fn accumulate_confidence(
    segments: &[(usize, PredictionSequence)],
    n_frames: usize,
    n_classes: usize,
    alpha: &[f64],
    symmetric: bool,
) -> ConfidenceTrack {
    let mut track = ConfidenceTrack::zeros(n_classes, n_frames);
    for (start, pred) in segments {
        segment_contribution(&mut track, pred, *start, alpha, symmetric);
    }
    track
}

/// Element-wise mean of raw tracks from several models.
pub fn average_tracks(tracks: &[ConfidenceTrack]) -> Result<ConfidenceTrack> {
    let first = tracks.first().ok_or(Error::EmptyDataset)?;
    let mut out = ConfidenceTrack::zeros(first.n_classes, first.n_frames);
    for t in tracks {
        if t.scores.len() != out.scores.len() {
            return Err(Error::ShapeMismatch(
                "confidence tracks differ in size".into(),
            ));
        }
        for (o, v) in out.scores.iter_mut().zip(&t.scores) {
            *o += v;
        }
    }
    let k = tracks.len() as f64;
    out.scores.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// Divides each class by its maximum; all-zero classes stay zero.
pub fn normalize_confidence(track: &ConfidenceTrack) -> ConfidenceTrack {
    let mut out = track.clone();
    for c in 0..track.n_classes {
        let row = &mut out.scores[c * track.n_frames..(c + 1) * track.n_frames];
        let max = row.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v /= max);
        }
    }
    out.normalized = true;
    out
}

/// Maximal runs of frames with `score >= beta` (and nonzero) in one row.
pub fn runs_above(row: &[f64], beta: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let mut cur: Option<(usize, f64)> = None;
    for (n, &v) in row.iter().enumerate() {
        let on = v >= beta && v > 0.0;
        match (on, cur) {
            (true, None) => cur = Some((n, v)),
            (true, Some((s, peak))) => cur = Some((s, peak.max(v))),
            (false, Some((s, peak))) => {
                out.push((s, n - 1, peak));
                cur = None;
            }
            (false, None) => {}
        }
    }
    if let Some((s, peak)) = cur {
        out.push((s, row.len() - 1, peak));
    }
    out
}

pub fn extract_events(track: &ConfidenceTrack, beta: &[f64]) -> Vec<DetectedEvent> {
    let mut out = Vec::new();
    for (c, &b) in beta.iter().enumerate().take(track.n_classes) {
        for (on, off, peak) in runs_above(track.class(c), b) {
            out.push(DetectedEvent {
                class_id: c,
                onset_frame: on,
                offset_frame: off,
                peak_score: peak,
            });
        }
    }
    out.sort_by_key(|e| (e.onset_frame, e.class_id));
    out
}

/// Majority filter of a binary sequence with zero padding at both ends.
pub fn median_filter_binary(bits: &[bool], window: usize) -> Result<Vec<bool>> {
    if window.is_multiple_of(2) {
        return Err(Error::EvenWindow(window));
    }
    let half = window / 2;
    let mut prefix = Vec::with_capacity(bits.len() + 1);
    prefix.push(0usize);
    for &b in bits {
        prefix.push(prefix.last().unwrap() + b as usize);
    }
    Ok((0..bits.len())
        .map(|n| {
            let lo = n.saturating_sub(half);
            let hi = (n + half + 1).min(bits.len());
            prefix[hi] - prefix[lo] > half
        })
        .collect())
}

/// Frame-wise likelihoods `[n * C + c]` → binarize by α, smooth, take runs.
pub fn baseline_decode(
    framewise: &[f64],
    n_classes: usize,
    alpha: &[f64],
    windows: &[usize],
) -> Result<Vec<DetectedEvent>> {
    let n_frames = framewise.len() / n_classes.max(1);
    let mut out = Vec::new();
    for c in 0..n_classes {
        let bits: Vec<bool> = (0..n_frames)
            .map(|n| framewise[n * n_classes + c] > alpha[c])
            .collect();
        let smooth = median_filter_binary(&bits, windows[c])?;
        let row: Vec<f64> = (0..n_frames)
            .map(|n| {
                if smooth[n] {
                    framewise[n * n_classes + c]
                } else {
                    0.0
                }
            })
            .collect();
        let on: Vec<f64> = smooth.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        for (s, e, _) in runs_above(&on, 1.0) {
            let peak = row[s..=e].iter().copied().fold(0.0, f64::max);
            out.push(DetectedEvent {
                class_id: c,
                onset_frame: s,
                offset_frame: e,
                peak_score: peak,
            });
        }
    }
    out.sort_by_key(|e| (e.onset_frame, e.class_id));
    Ok(out)
}

/// Model outputs for every test segment of one recording.
#[derive(Debug, Clone)]
pub struct RecordingPredictions {
    pub n_frames: usize,
    pub n_classes: usize,
    /// One list of (start frame, prediction) per model.
    pub per_model: Vec<Vec<(usize, PredictionSequence)>>,
}

impl RecordingPredictions {
    /// CV-averaged raw track (averaged before normalization).
    pub fn raw_track(&self, alpha: &[f64], symmetric: bool) -> Result<ConfidenceTrack> {
        let tracks: Vec<ConfidenceTrack> = self
            .per_model
            .iter()
            .map(|segs| {
                accumulate_confidence(segs, self.n_frames, self.n_classes, alpha, symmetric)
            })
            .collect();
        average_tracks(&tracks)
    }

    /// Frame-wise activity `[n * C + c]`, averaged over models; each frame
    /// is taken from the first segment covering it.
    pub fn framewise(&self) -> Vec<f64> {
        let (n_frames, c_n) = (self.n_frames, self.n_classes);
        let mut out = vec![0.0; n_frames * c_n];
        for segs in &self.per_model {
            let mut seen = vec![false; n_frames];
            for (start, pred) in segs {
                for t in 0..pred.t_len {
                    let n = start + t;
                    if n >= n_frames || seen[n] {
                        continue;
                    }
                    seen[n] = true;
                    for c in 0..c_n {
                        out[n * c_n + c] += pred.y(t, c);
                    }
                }
            }
        }
        let k = self.per_model.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}

/// Runs each model over segments starting at 0, hop, 2·hop, …; the last
/// partial segment is zero-padded.
pub fn predict_recording(
    cfg: &ModelConfig,
    models: &[&ModelParams],
    features: &[f64],
    dec: &DecoderConfig,
) -> Result<RecordingPredictions> {
    let n_frames = features.len() / cfg.n_mels;
    if n_frames == 0 {
        return Err(Error::TooShort {
            samples: 0,
            window: cfg.context_frames,
        });
    }
    let hop = dec.hop(cfg.context_frames);
    let starts: Vec<usize> = (0..n_frames).step_by(hop).collect();
    let mut per_model = Vec::with_capacity(models.len());
    for params in models {
        let mut segs = Vec::with_capacity(starts.len());
        for chunk in starts.chunks(dec.batch_size.max(1)) {
            let inputs: Vec<f64> = chunk
                .iter()
                .flat_map(|&s| segment_input(features, cfg.n_mels, s, cfg.context_frames))
                .collect();
            let preds = predict(cfg, params, &inputs, chunk.len())?;
            segs.extend(chunk.iter().copied().zip(preds));
        }
        per_model.push(segs);
    }
    Ok(RecordingPredictions {
        n_frames,
        n_classes: cfg.n_classes,
        per_model,
    })
}

/// Detected events of the proposed decoder for one recording.
pub fn decode(
    preds: &RecordingPredictions,
    alpha: &[f64],
    beta: &[f64],
    symmetric: bool,
) -> Result<(ConfidenceTrack, Vec<DetectedEvent>)> {
    let norm = normalize_confidence(&preds.raw_track(alpha, symmetric)?);
    let events = extract_events(&norm, beta);
    Ok((norm, events))
}

pub fn confidence_csv(track: &ConfidenceTrack, hop_s: f64, labels: &LabelMap) -> String {
    let mut out = String::from("time_s,class,score\n");
    for c in 0..track.n_classes {
        for n in 0..track.n_frames {
            let _ = writeln!(
                out,
                "{:.3},{},{:.6}",
                n as f64 * hop_s,
                labels.name(c),
                track.get(c, n)
            );
        }
    }
    out
}

pub fn detections_csv(
    rows: &[(String, Vec<DetectedEvent>)],
    hop_s: f64,
    labels: &LabelMap,
) -> String {
    let mut out = String::from("recording_id,class,onset_s,offset_s,peak\n");
    for (id, events) in rows {
        for e in events {
            let inst = e.to_instance(hop_s);
            let _ = writeln!(
                out,
                "{id},{},{:.3},{:.3},{:.6}",
                labels.name(e.class_id),
                inst.onset_s,
                inst.offset_s,
                e.peak_score
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(t_len: usize, c: usize, triples: &[(f64, f64, f64)]) -> PredictionSequence {
        PredictionSequence::new(
            t_len,
            c,
            triples.iter().flat_map(|&(y, p, q)| [y, p, q]).collect(),
        )
    }

    /// Direct evaluation of the summation, frame by frame.
    fn brute_force(
        segs: &[(usize, PredictionSequence)],
        n_frames: usize,
        n_classes: usize,
        alpha: &[f64],
    ) -> Vec<f64> {
        let mut out = vec![0.0; n_classes * n_frames];
        for c in 0..n_classes {
            for n in 0..n_frames {
                let mut acc = 0.0;
                for (m, pred) in segs {
                    for t in 0..pred.t_len {
                        let y = pred.y(t, c);
                        if m + t >= n_frames || y <= alpha[c] {
                            continue;
                        }
                        let scale = pred.t_len as f64;
                        let lo = (m + t) as i64 - (pred.p(t, c) * scale).round() as i64;
                        let hi = (m + t) as i64 + (pred.q(t, c) * scale).round() as i64;
                        if lo <= n as i64 && n as i64 <= hi {
                            acc += y;
                        }
                    }
                }
                out[c * n_frames + n] = acc;
            }
        }
        out
    }

    #[test]
    fn hand_traced_segment() {
        // distances in frames p = [1,0,2,1], q = [2,1,0,3] with T = 4
        let pred = seq(
            4,
            1,
            &[
                (0.9, 0.25, 0.5),
                (0.4, 0.0, 0.25),
                (0.8, 0.5, 0.0),
                (0.2, 0.25, 0.75),
            ],
        );
        // first frame of the segment is 11
        let track = accumulate_confidence(&[(11, pred)], 20, 1, &[0.5], false);
        let expected: Vec<f64> = (0..20)
            .map(|n| match n {
                10 => 0.9,
                11..=13 => 0.9 + 0.8,
                _ => 0.0,
            })
            .collect();
        assert_eq!(track.scores, expected);
    }

    #[test]
    fn gating_and_degenerate_roi() {
        let pred = seq(3, 1, &[(0.3, 0.5, 0.5), (0.6, 0.0, 0.0), (0.2, 0.0, 0.0)]);
        let track = accumulate_confidence(&[(2, pred.clone())], 8, 1, &[0.5], false);
        assert_eq!(track.scores, vec![0.0, 0.0, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0]);
        let none = accumulate_confidence(&[(2, pred)], 8, 1, &[0.95], false);
        assert!(none.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_roi_variant() {
        let pred = seq(
            4,
            1,
            &[
                (0.9, 0.25, 0.75),
                (0.0, 0.0, 0.0),
                (0.0, 0.0, 0.0),
                (0.0, 0.0, 0.0),
            ],
        );
        let asym = accumulate_confidence(&[(4, pred.clone())], 12, 1, &[0.5], false);
        let sym = accumulate_confidence(&[(4, pred)], 12, 1, &[0.5], true);
        assert_eq!(asym.class(0).iter().filter(|&&v| v > 0.0).count(), 5);
        assert_eq!(sym.class(0).iter().filter(|&&v| v > 0.0).count(), 3);
    }

    #[test]
    fn single_segment_track_is_its_contribution() {
        let pred = seq(2, 1, &[(0.7, 0.0, 0.5), (0.9, 0.5, 0.0)]);
        let mut t = ConfidenceTrack::zeros(1, 2);
        segment_contribution(&mut t, &pred, 0, &[0.0], false);
        assert_eq!(t, accumulate_confidence(&[(0, pred)], 2, 1, &[0.0], false));
    }

    #[test]
    fn averaging_and_normalizing() {
        let a = ConfidenceTrack {
            n_classes: 2,
            n_frames: 2,
            scores: vec![1.0, 3.4, 0.0, 0.0],
            normalized: false,
        };
        let b = ConfidenceTrack {
            n_classes: 2,
            n_frames: 2,
            scores: vec![3.0, 0.6, 0.0, 0.0],
            normalized: false,
        };
        let avg = average_tracks(&[a.clone(), b]).unwrap();
        assert_eq!(avg.scores, vec![2.0, 2.0, 0.0, 0.0]);
        let n = normalize_confidence(&a);
        assert_eq!(n.get(0, 1), 1.0);
        assert_eq!(n.class(1), &[0.0, 0.0]);
        assert!(n.normalized);
    }

    #[test]
    fn run_extraction() {
        let t = ConfidenceTrack {
            n_classes: 1,
            n_frames: 6,
            scores: vec![0.0, 0.2, 0.7, 0.8, 0.6, 0.1],
            normalized: true,
        };
        let ev = extract_events(&t, &[0.5]);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].onset_frame + 1, ev[0].offset_frame + 1), (3, 5));
        assert_eq!(ev[0].peak_score, 0.8);
        let all = extract_events(&t, &[0.0]);
        assert_eq!(all.len(), 1);
        assert_eq!((all[0].onset_frame, all[0].offset_frame), (1, 5));
        assert!(extract_events(&t, &[1.01]).is_empty());
    }

    #[test]
    fn median_filter_examples() {
        let bits: Vec<bool> = [0, 1, 0, 1, 1, 1, 0, 1, 0]
            .iter()
            .map(|&b| b == 1)
            .collect();
        let out = median_filter_binary(&bits, 3).unwrap();
        let as_int: Vec<u8> = out.iter().map(|&b| b as u8).collect();
        assert_eq!(as_int, vec![0, 0, 1, 1, 1, 1, 1, 0, 0]);
        assert_eq!(median_filter_binary(&bits, 1).unwrap(), bits);
        assert!(matches!(
            median_filter_binary(&bits, 4),
            Err(Error::EvenWindow(4))
        ));

        let framewise: Vec<f64> = bits.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect();
        let ev = baseline_decode(&framewise, 1, &[0.5], &[3]).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].onset_frame + 1, ev[0].offset_frame + 1), (3, 7));
        assert!(baseline_decode(&[0.0; 9], 1, &[0.5], &[3])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn framewise_takes_first_cover() {
        let a = seq(2, 1, &[(0.1, 0.0, 0.0), (0.2, 0.0, 0.0)]);
        let b = seq(2, 1, &[(0.3, 0.0, 0.0), (0.4, 0.0, 0.0)]);
        let rp = RecordingPredictions {
            n_frames: 3,
            n_classes: 1,
            per_model: vec![vec![(0, a), (1, b)]],
        };
        assert_eq!(rp.framewise(), vec![0.1, 0.2, 0.4]);
    }

    fn arb_case() -> impl Strategy<
        Value = (
            usize,
            usize,
            Vec<f64>,
            Vec<(usize, PredictionSequence)>,
            usize,
        ),
    > {
        (1usize..=16, 1usize..=3, 1usize..=5).prop_flat_map(|(t_len, c, n_seg)| {
            let n_frames = t_len * n_seg + 3;
            (
                Just(t_len),
                Just(c),
                prop::collection::vec(0.0f64..1.0, c),
                prop::collection::vec(
                    (
                        0..n_frames,
                        prop::collection::vec(0.0f64..1.0, t_len * c * 3),
                    ),
                    n_seg,
                ),
                Just(n_frames),
            )
                .prop_map(move |(t, c, alpha, segs, n)| {
                    let segs = segs
                        .into_iter()
                        .map(|(m, v)| (m, PredictionSequence::new(t, c, v)))
                        .collect();
                    (t, c, alpha, segs, n)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_brute_force((_t, c, alpha, segs, n) in arb_case()) {
            let track = accumulate_confidence(&segs, n, c, &alpha, false);
            prop_assert_eq!(track.scores, brute_force(&segs, n, c, &alpha));
        }

        #[test]
        fn order_independent_up_to_rounding((_t, c, alpha, segs, n) in arb_case()) {
            let fwd = accumulate_confidence(&segs, n, c, &alpha, false);
            let mut rev_segs = segs.clone();
            rev_segs.reverse();
            let rev = accumulate_confidence(&rev_segs, n, c, &alpha, false);
            for (a, b) in fwd.scores.iter().zip(&rev.scores) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_alpha_never_increases((_t, c, alpha, segs, n) in arb_case(), bump in 0.0f64..0.5) {
            let low = accumulate_confidence(&segs, n, c, &alpha, false);
            let higher: Vec<f64> = alpha.iter().map(|a| a + bump).collect();
            let high = accumulate_confidence(&segs, n, c, &higher, false);
            for (h, l) in high.scores.iter().zip(&low.scores) {
                prop_assert!(*h <= *l + 1e-12);
            }
        }

        #[test]
        fn normalization_preserves_order(scores in prop::collection::vec(0.0f64..5.0, 1..40)) {
            let n = scores.len();
            let t = ConfidenceTrack { n_classes: 1, n_frames: n, scores: scores.clone(), normalized: false };
            let norm = normalize_confidence(&t);
            prop_assert!(norm.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for i in 0..n {
                for j in 0..n {
                    if scores[i] < scores[j] {
                        prop_assert!(norm.scores[i] < norm.scores[j]);
                    }
                }
            }
        }

        #[test]
        fn events_respect_threshold(scores in prop::collection::vec(0.0f64..1.0, 1..60), beta in 0.0f64..1.0, bump in 0.0f64..0.5) {
            let n = scores.len();
            let t = ConfidenceTrack { n_classes: 1, n_frames: n, scores: scores.clone(), normalized: true };
            let ev = extract_events(&t, &[beta]);
            for e in &ev {
                prop_assert!(e.onset_frame <= e.offset_frame);
                for s in &scores[e.onset_frame..=e.offset_frame] {
                    prop_assert!(*s >= beta);
                }
                if e.onset_frame > 0 {
                    prop_assert!(scores[e.onset_frame - 1] < beta || scores[e.onset_frame - 1] == 0.0);
                }
                if e.offset_frame + 1 < n {
                    prop_assert!(scores[e.offset_frame + 1] < beta || scores[e.offset_frame + 1] == 0.0);
                }
            }
            // a higher threshold can split a run, so event counts are not
            // monotone; the covered frames are
            let covered = |evs: &[DetectedEvent]| {
                let mut v = vec![false; n];
                for e in evs {
                    v[e.onset_frame..=e.offset_frame].iter_mut().for_each(|x| *x = true);
                }
                v
            };
            let lo = covered(&ev);
            let hi = covered(&extract_events(&t, &[beta + bump]));
            prop_assert!(hi.iter().zip(&lo).all(|(h, l)| !h || *l));
        }

        #[test]
        fn median_filter_matches_sorting(bits in prop::collection::vec(any::<bool>(), 1..50), half in 0usize..6) {
            let w = 2 * half + 1;
            let out = median_filter_binary(&bits, w).unwrap();
            for n in 0..bits.len() {
                let mut win: Vec<u8> = (0..w)
                    .map(|k| {
                        let i = n as i64 + k as i64 - half as i64;
                        if i < 0 || i >= bits.len() as i64 { 0 } else { bits[i as usize] as u8 }
                    })
                    .collect();
                win.sort();
                prop_assert_eq!(out[n], win[half] == 1);
            }
        }
    }
}
