//! End-to-end stages shared by the command-line tool and the tests.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::annotation::{EventInstance, LabelMap, Split};
use crate::audio::Standardizer;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{Corpus, Recording};
use crate::decoder::{
    baseline_decode, decode, detections_csv, predict_recording, DetectedEvent, RecordingPredictions,
};
use crate::error::{Error, Result};
use crate::metrics::{
    alpha_grid, beta_grid, evaluate_corpus, median_window_grid, report, report_csv,
    tune_median_windows, tune_thresholds, Report, Thresholds, ValRecording,
};
use crate::model::ModelParams;
use crate::synth::emit_dataset;
use crate::trainer::{loss_log_csv, train, EpochLog, TrainOutcome};

pub struct Prepared {
    pub labels: LabelMap,
    pub standardizer: Standardizer,
    pub hop_s: f64,
    pub train: Vec<Recording>,
    pub val: Vec<Recording>,
    pub test: Vec<Recording>,
}

impl Prepared {
    pub fn split(&self, split: Split) -> &[Recording] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loads a manifest and standardizes every split with statistics of the
/// training split (or with `standardizer` when given).
pub fn prepare(
    manifest: &Path,
    labels: &LabelMap,
    cfg: &RunConfig,
    standardizer: Option<&Standardizer>,
) -> Result<Prepared> {
    if labels.len() != cfg.model.n_classes {
        return Err(Error::ConfigMismatch(format!(
            "{} labels but the model has {} classes",
            labels.len(),
            cfg.model.n_classes
        )));
    }
    let corpus = Corpus::load(manifest, labels, &cfg.spectrogram)?;
    let st = match standardizer {
        Some(s) => s.clone(),
        None => corpus.fit_standardizer()?,
    };
    Ok(Prepared {
        labels: labels.clone(),
        hop_s: corpus.hop_s,
        train: corpus.prepare(Split::Train, &st)?,
        val: corpus.prepare(Split::Val, &st)?,
        test: corpus.prepare(Split::Test, &st)?,
        standardizer: st,
    })
}

pub fn make_checkpoint(
    cfg: &RunConfig,
    labels: &LabelMap,
    st: &Standardizer,
    params: ModelParams,
    thresholds: Thresholds,
) -> Checkpoint {
    Checkpoint {
        model: cfg.model.clone(),
        spectrogram: cfg.spectrogram.clone(),
        class_names: labels.names.clone(),
        standardizer: st.clone(),
        thresholds,
        params,
    }
}

pub fn predict_all(
    cfg: &RunConfig,
    models: &[&ModelParams],
    recs: &[Recording],
) -> Result<Vec<RecordingPredictions>> {
    recs.iter()
        .map(|r| predict_recording(&cfg.model, models, &r.features, &cfg.decoder))
        .collect()
}

/// Grid-searches the proposed decoder's (α, β) and the baseline's
/// (α, median window) on validation recordings.
pub fn tune(
    cfg: &RunConfig,
    preds: &[RecordingPredictions],
    recs: &[Recording],
    hop_s: f64,
) -> Result<(Thresholds, Vec<f64>, Vec<f64>)> {
    let val: Vec<ValRecording> = preds
        .iter()
        .zip(recs)
        .map(|(p, r)| ValRecording {
            preds: p,
            reference: &r.annotation.events,
        })
        .collect();
    let c = cfg.model.n_classes;
    let (alpha, beta, f1) = tune_thresholds(
        &val,
        c,
        hop_s,
        &cfg.matching,
        &alpha_grid(),
        &beta_grid(),
        cfg.decoder.symmetric_roi,
    )?;
    let (baseline_alpha, median_windows, f1_base) = tune_median_windows(
        &val,
        c,
        hop_s,
        &cfg.matching,
        &alpha_grid(),
        &median_window_grid(),
    )?;
    Ok((
        Thresholds {
            alpha,
            beta,
            baseline_alpha,
            median_windows,
        },
        f1,
        f1_base,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Proposed,
    Baseline,
}

pub fn detect(
    cfg: &RunConfig,
    preds: &RecordingPredictions,
    th: &Thresholds,
    kind: DecoderKind,
) -> Result<Vec<DetectedEvent>> {
    match kind {
        DecoderKind::Proposed => {
            Ok(decode(preds, &th.alpha, &th.beta, cfg.decoder.symmetric_roi)?.1)
        }
        DecoderKind::Baseline => baseline_decode(
            &preds.framewise(),
            preds.n_classes,
            &th.baseline_alpha,
            &th.median_windows,
        ),
    }
}

pub fn evaluate_events(
    cfg: &RunConfig,
    recs: &[Recording],
    hyps: &[Vec<DetectedEvent>],
    hop_s: f64,
) -> Result<Report> {
    let pairs: Vec<(Vec<EventInstance>, Vec<EventInstance>)> = recs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            (
                r.annotation.events.clone(),
                h.iter().map(|e| e.to_instance(hop_s)).collect(),
            )
        })
        .collect();
    report(&evaluate_corpus(&pairs, cfg.model.n_classes, &cfg.matching))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitResult {
    pub split: &'static str,
    pub decoder: DecoderKind,
    pub report: Report,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub test_overall_f1_proposed: f64,
    pub test_overall_f1_baseline: f64,
    pub test_average_f1_proposed: f64,
    pub test_average_f1_baseline: f64,
    pub proposed_at_least_baseline: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub thresholds: Thresholds,
    pub val_f1_proposed: Vec<f64>,
    pub val_f1_baseline: Vec<f64>,
    pub results: Vec<SplitResult>,
    pub comparison: Comparison,
}

impl ExperimentSummary {
    pub fn result(&self, split: &str, decoder: DecoderKind) -> Option<&Report> {
        self.results
            .iter()
            .find(|r| r.split == split && r.decoder == decoder)
            .map(|r| &r.report)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Paths written by [`run_experiment`].
pub struct ExperimentFiles {
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
}

/// Synthesizes a corpus, trains, tunes on the validation split and scores
/// both decoders on the training and test splits.
pub fn run_experiment(
    cfg: &RunConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<(ExperimentSummary, ExperimentFiles)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data_dir = out_dir.join("data");
    let manifest = emit_dataset(&cfg.synth, &data_dir)?;
    let labels = cfg.synth.class_names();
    let mut cfg = cfg.clone();
    cfg.model.n_classes = labels.len();
    progress(&format!("dataset written to {}", data_dir.display()));

    let data = prepare(&manifest, &labels, &cfg, None)?;
    let outcome = train(
        &cfg.model,
        &cfg.train,
        &data.train,
        &data.val,
        data.hop_s,
        |e: &EpochLog| {
            progress(&format!(
                "epoch {:>3}  train {:.4}  val {}",
                e.epoch,
                e.train.total,
                e.val.map_or("-".into(), |v| format!("{:.4}", v.total))
            ))
        },
    )?;
    write(&out_dir.join("loss.csv"), loss_log_csv(&outcome.log))?;
    let summary = evaluate_outcome(&cfg, &data, &outcome, out_dir, &mut progress)?;
    let files = ExperimentFiles {
        checkpoint: out_dir.join("model.paed"),
        summary: out_dir.join("run_summary.json"),
    };
    Ok((summary, files))
}

/// Tuning, scoring and artifact writing for a finished training run.
pub fn evaluate_outcome(
    cfg: &RunConfig,
    data: &Prepared,
    outcome: &TrainOutcome,
    out_dir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentSummary> {
    let params = &outcome.best_params;
    let models = [params];
    let val_preds = predict_all(cfg, &models, &data.val)?;
    let (thresholds, val_f1, val_f1_base) = tune(cfg, &val_preds, &data.val, data.hop_s)?;
    progress(&format!("tuned thresholds {thresholds:?}"));
    let ck = make_checkpoint(
        cfg,
        &data.labels,
        &data.standardizer,
        params.clone(),
        thresholds.clone(),
    );
    ck.save(out_dir.join("model.paed"))?;

    let mut results = Vec::new();
    for split in [Split::Train, Split::Test] {
        let recs = data.split(split);
        let preds = predict_all(cfg, &models, recs)?;
        for kind in [DecoderKind::Proposed, DecoderKind::Baseline] {
            let hyps = preds
                .iter()
                .map(|p| detect(cfg, p, &thresholds, kind))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<(String, Vec<DetectedEvent>)> = recs
                .iter()
                .map(|r| r.id.clone())
                .zip(hyps.iter().cloned())
                .collect();
            let tag = format!(
                "{}_{}",
                split.as_str(),
                if kind == DecoderKind::Proposed {
                    "proposed"
                } else {
                    "baseline"
                }
            );
            write(
                &out_dir.join(format!("detections_{tag}.csv")),
                detections_csv(&rows, data.hop_s, &data.labels),
            )?;
            let rep = evaluate_events(cfg, recs, &hyps, data.hop_s)?;
            write(
                &out_dir.join(format!("metrics_{tag}.csv")),
                report_csv(&rep, &data.labels),
            )?;
            progress(&format!(
                "{tag}: average F1 {:.1}% ER {:.1}%, overall F1 {:.1}% ER {:.1}%",
                100.0 * rep.aggregate.average_f1,
                100.0 * rep.aggregate.average_er,
                100.0 * rep.aggregate.overall_f1,
                100.0 * rep.aggregate.overall_er
            ));
            results.push(SplitResult {
                split: split.as_str(),
                decoder: kind,
                report: rep,
            });
        }
    }
    let get = |kind| {
        results
            .iter()
            .find(|r| r.split == "test" && r.decoder == kind)
            .map(|r| r.report.aggregate)
            .expect("test results present")
    };
    let (p, b) = (get(DecoderKind::Proposed), get(DecoderKind::Baseline));
    let summary = ExperimentSummary {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        class_names: data.labels.names.clone(),
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        final_train_loss: outcome.log.last().map(|e| e.train.total),
        best_val_loss: outcome
            .log
            .iter()
            .filter_map(|e| e.val.map(|v| v.total))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))),
        thresholds,
        val_f1_proposed: val_f1,
        val_f1_baseline: val_f1_base,
        results,
        comparison: Comparison {
            test_overall_f1_proposed: p.overall_f1,
            test_overall_f1_baseline: b.overall_f1,
            test_average_f1_proposed: p.average_f1,
            test_average_f1_baseline: b.average_f1,
            proposed_at_least_baseline: p.overall_f1 >= b.overall_f1,
        },
    };
    write(
        &out_dir.join("run_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}
