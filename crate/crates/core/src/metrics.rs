//! Event-wise matching, F1 / error rate, and threshold grid searches.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotation::{EventInstance, LabelMap};
use crate::decoder::{baseline_decode, extract_events, normalize_confidence, RecordingPredictions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub onset_collar_s: f64,
    /// Offset tolerance is max(offset_collar_s, offset_ratio · reference duration).
    pub offset_collar_s: f64,
    pub offset_ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            onset_collar_s: 0.2,
            offset_collar_s: 0.2,
            offset_ratio: 0.5,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.onset_collar_s > 0.0)
            || !(self.offset_collar_s > 0.0)
            || !(self.offset_ratio >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "matching collars must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn matches(&self, r: &EventInstance, h: &EventInstance) -> bool {
        let off_tol = self.offset_collar_s.max(self.offset_ratio * r.duration_s());
        r.class_id == h.class_id
            && (r.onset_s - h.onset_s).abs() <= self.onset_collar_s + 1e-9
            && (r.offset_s - h.offset_s).abs() <= off_tol + 1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
}

impl Counts {
    pub fn n_ref(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    /// (fp + fn) / n_ref; with no references the error rate is fp.
    pub fn er(&self) -> f64 {
        let n = self.n_ref();
        if n == 0 {
            self.fp as f64
        } else {
            (self.fp + self.fn_) as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub n_ref: usize,
    pub f1: f64,
    pub er: f64,
}

impl From<Counts> for ClassMetrics {
    fn from(c: Counts) -> Self {
        Self {
            tp: c.tp,
            fn_: c.fn_,
            fp: c.fp,
            n_ref: c.n_ref(),
            f1: c.f1(),
            er: c.er(),
        }
    }
}

fn sorted_class(events: &[EventInstance], c: usize) -> Vec<EventInstance> {
    let mut v: Vec<EventInstance> = events.iter().filter(|e| e.class_id == c).copied().collect();
    v.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.offset_s.total_cmp(&b.offset_s))
    });
    v
}

/// Greedy onset-ordered one-to-one matching of one class: each reference,
/// in onset order, takes the earliest unused hypothesis within the collars.
pub fn match_class(refs: &[EventInstance], hyps: &[EventInstance], cfg: &MatchConfig) -> Counts {
    let mut used = vec![false; hyps.len()];
    let mut tp = 0;
    for r in refs {
        if let Some(j) = (0..hyps.len()).find(|&j| !used[j] && cfg.matches(r, &hyps[j])) {
            used[j] = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fn_: refs.len() - tp,
        fp: hyps.len() - tp,
    }
}

pub fn match_events(
    refs: &[EventInstance],
    hyps: &[EventInstance],
    n_classes: usize,
    cfg: &MatchConfig,
) -> Vec<Counts> {
    (0..n_classes)
        .map(|c| match_class(&sorted_class(refs, c), &sorted_class(hyps, c), cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub average_f1: f64,
    pub average_er: f64,
    pub overall_f1: f64,
    pub overall_er: f64,
}

pub fn aggregate(per_class: &[Counts]) -> Result<Aggregate> {
    if per_class.is_empty() {
        return Err(Error::NoClasses);
    }
    let k = per_class.len() as f64;
    let mut pooled = Counts::default();
    per_class.iter().for_each(|c| pooled.add(c));
    Ok(Aggregate {
        average_f1: per_class.iter().map(Counts::f1).sum::<f64>() / k,
        average_er: per_class.iter().map(Counts::er).sum::<f64>() / k,
        overall_f1: pooled.f1(),
        overall_er: pooled.er(),
    })
}

/// Per-class counts summed over recordings.
pub fn evaluate_corpus(
    pairs: &[(Vec<EventInstance>, Vec<EventInstance>)],
    n_classes: usize,
    cfg: &MatchConfig,
) -> Vec<Counts> {
    let mut total = vec![Counts::default(); n_classes];
    for (r, h) in pairs {
        for (t, c) in total.iter_mut().zip(match_events(r, h, n_classes, cfg)) {
            t.add(&c);
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_class: Vec<ClassMetrics>,
    pub aggregate: Aggregate,
}

pub fn report(counts: &[Counts]) -> Result<Report> {
    Ok(Report {
        per_class: counts.iter().map(|&c| c.into()).collect(),
        aggregate: aggregate(counts)?,
    })
}

pub fn report_table(r: &Report, labels: &LabelMap) -> String {
    let mut out = format!(
        "{:<16} {:>5} {:>5} {:>5} {:>6} {:>8} {:>8}\n",
        "class", "tp", "fn", "fp", "n_ref", "F1%", "ER%"
    );
    for (c, m) in r.per_class.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>5} {:>5} {:>6} {:>8.1} {:>8.1}",
            labels.name(c),
            m.tp,
            m.fn_,
            m.fp,
            m.n_ref,
            100.0 * m.f1,
            100.0 * m.er
        );
    }
    let a = &r.aggregate;
    let _ = writeln!(
        out,
        "{:<16} {:>39.1} {:>8.1}",
        "average",
        100.0 * a.average_f1,
        100.0 * a.average_er
    );
    let _ = writeln!(
        out,
        "{:<16} {:>39.1} {:>8.1}",
        "overall",
        100.0 * a.overall_f1,
        100.0 * a.overall_er
    );
    out
}

pub fn report_csv(r: &Report, labels: &LabelMap) -> String {
    let mut out = String::from("class,tp,fn,fp,n_ref,f1,er\n");
    for (c, m) in r.per_class.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6}",
            labels.name(c),
            m.tp,
            m.fn_,
            m.fp,
            m.n_ref,
            m.f1,
            m.er
        );
    }
    let a = &r.aggregate;
    let _ = writeln!(out, "average,,,,,{:.6},{:.6}", a.average_f1, a.average_er);
    let _ = writeln!(out, "overall,,,,,{:.6},{:.6}", a.overall_f1, a.overall_er);
    out
}

/// Grid `0, step, 2·step, …, 1`.
pub fn grid(step_inverse: usize) -> Vec<f64> {
    (0..=step_inverse)
        .map(|i| i as f64 / step_inverse as f64)
        .collect()
}

pub fn alpha_grid() -> Vec<f64> {
    grid(100)
}

pub fn beta_grid() -> Vec<f64> {
    grid(20)
}

pub fn median_window_grid() -> Vec<usize> {
    (1..=256).step_by(6).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub baseline_alpha: Vec<f64>,
    pub median_windows: Vec<usize>,
}

impl Thresholds {
    pub fn defaults(n_classes: usize) -> Self {
        Self {
            alpha: vec![0.5; n_classes],
            beta: vec![0.5; n_classes],
            baseline_alpha: vec![0.5; n_classes],
            median_windows: vec![1; n_classes],
        }
    }
}

/// A validation recording: model outputs next to its reference events.
pub struct ValRecording<'a> {
    pub preds: &'a RecordingPredictions,
    pub reference: &'a [EventInstance],
}

/// Exhaustive per-class search of (α, β) maximizing validation F1; ties go
/// to the smallest α, then the smallest β. Returns (α, β, best F1) per class.
pub fn tune_thresholds(
    val: &[ValRecording],
    n_classes: usize,
    hop_s: f64,
    cfg: &MatchConfig,
    alphas: &[f64],
    betas: &[f64],
    symmetric: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let refs: Vec<Vec<Vec<EventInstance>>> = val
        .iter()
        .map(|v| {
            (0..n_classes)
                .map(|c| sorted_class(v.reference, c))
                .collect()
        })
        .collect();
    let mut best = vec![(f64::NEG_INFINITY, 0.0, 0.0); n_classes];
    for &a in alphas {
        let tracks = val
            .iter()
            .map(|v| {
                Ok(normalize_confidence(
                    &v.preds.raw_track(&vec![a; n_classes], symmetric)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        for &b in betas {
            let mut counts = vec![Counts::default(); n_classes];
            for (track, rec_refs) in tracks.iter().zip(&refs) {
                let hyps: Vec<EventInstance> = extract_events(track, &vec![b; n_classes])
                    .iter()
                    .map(|e| e.to_instance(hop_s))
                    .collect();
                for c in 0..n_classes {
                    counts[c].add(&match_class(&rec_refs[c], &sorted_class(&hyps, c), cfg));
                }
            }
            for c in 0..n_classes {
                let f = counts[c].f1();
                if f > best[c].0 {
                    best[c] = (f, a, b);
                }
            }
        }
    }
    Ok((
        best.iter().map(|b| b.1).collect(),
        best.iter().map(|b| b.2).collect(),
        best.iter().map(|b| b.0).collect(),
    ))
}

/// Joint per-class search of baseline α and median window. Returns
/// (α, window, best F1) per class.
pub fn tune_median_windows(
    val: &[ValRecording],
    n_classes: usize,
    hop_s: f64,
    cfg: &MatchConfig,
    alphas: &[f64],
    windows: &[usize],
) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    if val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let framewise: Vec<Vec<f64>> = val.iter().map(|v| v.preds.framewise()).collect();
    let refs: Vec<Vec<Vec<EventInstance>>> = val
        .iter()
        .map(|v| {
            (0..n_classes)
                .map(|c| sorted_class(v.reference, c))
                .collect()
        })
        .collect();
    let mut best = vec![(f64::NEG_INFINITY, 0.0, 1usize); n_classes];
    for &a in alphas {
        for &w in windows {
            let mut counts = vec![Counts::default(); n_classes];
            for (fw, rec_refs) in framewise.iter().zip(&refs) {
                let hyps: Vec<EventInstance> =
                    baseline_decode(fw, n_classes, &vec![a; n_classes], &vec![w; n_classes])?
                        .iter()
                        .map(|e| e.to_instance(hop_s))
                        .collect();
                for c in 0..n_classes {
                    counts[c].add(&match_class(&rec_refs[c], &sorted_class(&hyps, c), cfg));
                }
            }
            for c in 0..n_classes {
                let f = counts[c].f1();
                if f > best[c].0 {
                    best[c] = (f, a, w);
                }
            }
        }
    }
    Ok((
        best.iter().map(|b| b.1).collect(),
        best.iter().map(|b| b.2).collect(),
        best.iter().map(|b| b.0).collect(),
    ))
}
