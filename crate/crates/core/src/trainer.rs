//! Minibatch Adam training with seeded shuffling and dropout, validation
//! tracking and leave-one-recording-out cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{render_segment_target, sample_training_segments, SegmentTarget};
use crate::autodiff::Tensor;
use crate::dataset::Recording;
use crate::error::{Error, Result};
use crate::losses::{loss_and_grad, LossBreakdown};
use crate::model::{init_params, segment_input, Mode, ModelConfig, ModelParams, Net};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Hop between training segments in frames; `None` means T/2.
    pub segment_stride: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 10,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            segment_stride: None,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        if self.segment_stride == Some(0) {
            return bad("segment_stride must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn stride(&self, t_len: usize) -> usize {
        self.segment_stride.unwrap_or((t_len / 2).max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows `params.tensors` order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(Error::MissingGradient(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors.len()
        )));
    }
    for ((name, t), g) in params.tensors.iter().zip(grads) {
        if g.len() != t.len() {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, (_, t)) in params.tensors.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in t.data.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// SplitMix64 finalizer used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A training segment: recording index and start frame.
pub type SegmentRef = (usize, usize);

pub fn segments_for(recordings: &[Recording], t_len: usize, stride: usize) -> Vec<SegmentRef> {
    let lens: Vec<(String, usize)> = recordings
        .iter()
        .enumerate()
        .map(|(i, r)| (i.to_string(), r.n_frames))
        .collect();
    sample_training_segments(&lens, t_len, stride)
        .into_iter()
        .map(|(i, s)| (i.parse().expect("index id"), s))
        .collect()
}

pub struct BatchResult {
    pub loss: LossBreakdown,
    /// Per-parameter gradients (train mode only).
    pub grads: Option<Vec<Vec<f64>>>,
    pub batch_stats: Vec<(String, crate::autodiff::BatchStats)>,
}

pub fn batch_targets(
    cfg: &ModelConfig,
    recordings: &[Recording],
    batch: &[SegmentRef],
    hop_s: f64,
) -> Vec<SegmentTarget> {
    batch
        .iter()
        .map(|&(r, s)| {
            let rec = &recordings[r];
            render_segment_target(
                &rec.annotation,
                s,
                cfg.context_frames,
                hop_s,
                cfg.n_classes,
                rec.n_frames,
            )
        })
        .collect()
}

/// Forward pass, summed loss and (in train mode) parameter gradients for
/// a batch of `[M, T]` inputs.
pub fn run_batch(
    cfg: &ModelConfig,
    params: &ModelParams,
    inputs: &[f64],
    targets: &[SegmentTarget],
    mode: Mode,
) -> Result<BatchResult> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut net = Net::new(cfg, params, targets.len(), mode)?;
    let out = net.forward(inputs)?;
    let preds = net.predictions(out);
    let mut loss = LossBreakdown::default();
    let mut grad = Vec::with_capacity(net.tape.value(out).len());
    for (target, pred) in targets.iter().zip(&preds) {
        let (l, g) = loss_and_grad(target, pred)?;
        loss.accumulate(&l);
        grad.extend(g);
    }
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = match mode {
        Mode::Train { .. } => {
            let root = net.tape.custom_scalar(out, loss.total, grad)?;
            let g = net.tape.backward(root)?;
            let per_param = net
                .param_vars
                .iter()
                .zip(&params.tensors)
                .map(|(v, (name, _))| {
                    g.get(*v)
                        .map(|s| s.to_vec())
                        .ok_or_else(|| Error::MissingGradient(name.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(per_param)
        }
        Mode::Infer => None,
    };
    Ok(BatchResult {
        loss,
        grads,
        batch_stats: std::mem::take(&mut net.batch_stats),
    })
}

pub fn gather_inputs(
    cfg: &ModelConfig,
    recordings: &[Recording],
    batch: &[SegmentRef],
) -> Vec<f64> {
    batch
        .iter()
        .flat_map(|&(r, s)| {
            segment_input(&recordings[r].features, cfg.n_mels, s, cfg.context_frames)
        })
        .collect()
}

/// Mean per-segment loss in infer mode over the given segments.
pub fn evaluate_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    recordings: &[Recording],
    segments: &[SegmentRef],
    hop_s: f64,
    batch_size: usize,
) -> Result<LossBreakdown> {
    if segments.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = LossBreakdown::default();
    for batch in segments.chunks(batch_size.max(1)) {
        let inputs = gather_inputs(cfg, recordings, batch);
        let targets = batch_targets(cfg, recordings, batch, hop_s);
        let res = run_batch(cfg, params, &inputs, &targets, Mode::Infer)?;
        acc.accumulate(&res.loss);
    }
    Ok(scale(acc, 1.0 / segments.len() as f64))
}

fn scale(l: LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown::new(l.class_loss * s, l.dist_loss * s, l.conf_loss * s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-segment train-mode loss over the epoch's steps.
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_class,train_dist,train_conf,train_total,val_class,val_dist,val_conf,val_total\n");
    for e in log {
        let t = &e.train;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            e.epoch, t.class_loss, t.dist_loss, t.conf_loss, t.total
        ));
        match &e.val {
            Some(v) => out.push_str(&format!(
                ",{:.6},{:.6},{:.6},{:.6}\n",
                v.class_loss, v.dist_loss, v.conf_loss, v.total
            )),
            None => out.push_str(",,,,\n"),
        }
    }
    out
}

fn check_finite(params: &ModelParams) -> Result<()> {
    for (name, t) in &params.tensors {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name} after update")));
        }
    }
    Ok(())
}

/// Trains from scratch. The best parameters are those with the lowest
/// validation loss (training loss when there is no validation data).
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Recording],
    val_set: &[Recording],
    hop_s: f64,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let params = init_params(model_cfg, train_cfg.seed)?;
    train_from(
        model_cfg,
        train_cfg,
        params,
        train_set,
        val_set,
        hop_s,
        &mut progress,
    )
}

/// Continues training from existing parameters.
pub fn train_from(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut params: ModelParams,
    train_set: &[Recording],
    val_set: &[Recording],
    hop_s: f64,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    for r in train_set.iter().chain(val_set) {
        if r.n_mels != model_cfg.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "recording {} has {} mel bins, model expects {}",
                r.id, r.n_mels, model_cfg.n_mels
            )));
        }
    }
    let t_len = model_cfg.context_frames;
    let mut segments = segments_for(train_set, t_len, train_cfg.stride(t_len));
    if segments.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val_segments = segments_for(val_set, t_len, t_len);
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best = (f64::INFINITY, params.clone(), None);

    for epoch in 0..train_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed, epoch as u64));
        segments.sort_unstable();
        segments.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for batch in segments.chunks(train_cfg.batch_size) {
            let inputs = gather_inputs(model_cfg, train_set, batch);
            let targets = batch_targets(model_cfg, train_set, batch, hop_s);
            let dropout_seed = mix_seed(train_cfg.seed ^ 0xD80F, adam.step);
            let res = run_batch(
                model_cfg,
                &params,
                &inputs,
                &targets,
                Mode::Train { dropout_seed },
            )?;
            let mut grads = res.grads.expect("train mode yields gradients");
            if let Some(max) = train_cfg.clip_norm {
                let norm = clip_global_norm(&mut grads, max);
                if !norm.is_finite() {
                    return Err(Error::NonFinite(format!("gradient norm at epoch {epoch}")));
                }
            }
            adam_step(&mut params, &grads, &mut adam, train_cfg)?;
            check_finite(&params)?;
            for (name, stats) in &res.batch_stats {
                if let Some(bn) = params.bn.iter_mut().find(|b| &b.name == name) {
                    bn.update(stats);
                }
            }
            acc.accumulate(&res.loss);
        }
        let train_loss = scale(acc, 1.0 / segments.len() as f64);
        let val = if val_segments.is_empty() {
            None
        } else {
            Some(evaluate_loss(
                model_cfg,
                &params,
                val_set,
                &val_segments,
                hop_s,
                train_cfg.batch_size,
            )?)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            train: train_loss,
            val,
        };
        let score = val.map_or(train_loss.total, |v| v.total);
        if score < best.0 {
            best = (score, params.clone(), Some(epoch + 1));
        }
        progress(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        best_params: best.1,
        best_epoch: best.2,
        final_params: params,
        log,
    })
}

/// Leave-one-recording-out: fold k validates on recording k and trains on
/// all others.
pub fn train_cv(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    recordings: &[Recording],
    hop_s: f64,
    mut progress: impl FnMut(usize, &EpochLog),
) -> Result<Vec<TrainOutcome>> {
    if recordings.len() < 2 {
        return Err(Error::TooFewFolds(recordings.len()));
    }
    (0..recordings.len())
        .map(|k| {
            let val = vec![recordings[k].clone()];
            let train_set: Vec<Recording> = recordings
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .map(|(_, r)| r.clone())
                .collect();
            let cfg = TrainConfig {
                seed: mix_seed(train_cfg.seed, k as u64),
                ..train_cfg.clone()
            };
            let params = init_params(model_cfg, cfg.seed)?;
            train_from(model_cfg, &cfg, params, &train_set, &val, hop_s, &mut |e| {
                progress(k, e)
            })
        })
        .collect()
}

/// Flattens per-parameter gradients into tensors with the parameter shapes.
pub fn grads_as_tensors(params: &ModelParams, grads: &[Vec<f64>]) -> Result<Vec<Tensor>> {
    params
        .tensors
        .iter()
        .zip(grads)
        .map(|((_, t), g)| Tensor::new(t.shape.clone(), g.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{EventInstance, RecordingAnnotation};
    use crate::model::BnState;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_mels: 10,
            context_frames: 8,
            n_classes: 2,
            filters: 4,
            hidden: 3,
            pool_sizes: vec![5, 2],
            kernel_size: 5,
            dropout: 0.0,
        }
    }

    fn toy_recording(
        id: &str,
        n_frames: usize,
        seed: u64,
        events: Vec<EventInstance>,
    ) -> Recording {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features: Vec<f64> = (0..n_frames * 10)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        for e in &events {
            let (o, f) = (
                (e.onset_s / 0.02).round() as usize,
                (e.offset_s / 0.02).round() as usize,
            );
            for n in o..=f.min(n_frames - 1) {
                for m in 0..10 {
                    if m % 2 == e.class_id {
                        features[n * 10 + m] += 2.0;
                    }
                }
            }
        }
        Recording {
            id: id.into(),
            features,
            n_frames,
            n_mels: 10,
            annotation: RecordingAnnotation {
                recording_id: id.into(),
                events,
                duration_s: n_frames as f64 * 0.02,
            },
        }
    }

    fn ev(c: usize, on: f64, off: f64) -> EventInstance {
        EventInstance {
            class_id: c,
            onset_s: on,
            offset_s: off,
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 1).unwrap();
        let before = params.clone();
        let mut st = AdamState::new(&params);
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        adam_step(&mut params, &zeros, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ModelParams {
            tensors: vec![("w".into(), Tensor::scalar(0.3))],
            bn: vec![],
        };
        let mut st = AdamState::new(&params);
        let cfg = TrainConfig::default();
        adam_step(&mut params, &[vec![1.0]], &mut st, &cfg).unwrap();
        let moved = 0.3 - params.tensors[0].1.data[0];
        assert!((moved - cfg.lr).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn adam_rejects_missing_gradients() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 1).unwrap();
        let mut st = AdamState::new(&params);
        let err = adam_step(&mut params, &[], &mut st, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(_)));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let n = clip_global_norm(&mut g, 6.5);
        assert_eq!(n, 13.0);
        let after = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 6.5).abs() < 1e-12);
    }

    /// Central differences of the summed loss against backprop, for every
    /// parameter of the tiny network in train mode.
    #[test]
    fn full_network_gradient_check() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 21).unwrap();
        // non-trivial biases so every path is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (_, t) in params.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let recs = vec![
            toy_recording("a", 12, 1, vec![ev(0, 0.02, 0.1), ev(1, 0.06, 0.2)]),
            toy_recording("b", 8, 2, vec![ev(1, 0.0, 0.08)]),
        ];
        let batch = vec![(0, 0), (0, 4), (1, 0)];
        let inputs = gather_inputs(&cfg, &recs, &batch);
        let targets = batch_targets(&cfg, &recs, &batch, 0.02);
        let mode = Mode::Train { dropout_seed: 3 };
        let res = run_batch(&cfg, &params, &inputs, &targets, mode).unwrap();
        let grads = res.grads.unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..params.tensors.len() {
            for j in 0..params.tensors[i].1.len() {
                let orig = params.tensors[i].1.data[j];
                params.tensors[i].1.data[j] = orig + h;
                let up = run_batch(&cfg, &params, &inputs, &targets, mode)
                    .unwrap()
                    .loss
                    .total;
                params.tensors[i].1.data[j] = orig - h;
                let down = run_batch(&cfg, &params, &inputs, &targets, mode)
                    .unwrap()
                    .loss
                    .total;
                params.tensors[i].1.data[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[i][j];
                let abs = (fd - an).abs();
                let rel = abs / fd.abs().max(an.abs()).max(1e-300);
                assert!(
                    abs < 1e-6 || rel < 1e-4,
                    "{}[{j}]: analytic {an} vs fd {fd}",
                    params.tensors[i].0
                );
                worst = worst.max(abs.min(rel));
            }
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = tiny();
        let tc = TrainConfig {
            epochs: 0,
            seed: 4,
            ..Default::default()
        };
        let recs = vec![toy_recording("a", 20, 1, vec![ev(0, 0.1, 0.2)])];
        let out = train(&cfg, &tc, &recs, &[], 0.02, |_| {}).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.final_params, init_params(&cfg, 4).unwrap());
        assert_eq!(out.best_epoch, None);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let err = train(&tiny(), &TrainConfig::default(), &[], &[], 0.02, |_| {}).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn training_is_deterministic_and_updates_bn() {
        let cfg = ModelConfig {
            dropout: 0.25,
            ..tiny()
        };
        let tc = TrainConfig {
            epochs: 2,
            lr: 1e-2,
            seed: 9,
            ..Default::default()
        };
        let recs = vec![
            toy_recording("a", 30, 1, vec![ev(0, 0.1, 0.3)]),
            toy_recording("b", 30, 2, vec![ev(1, 0.2, 0.4)]),
        ];
        let val = vec![toy_recording("v", 16, 3, vec![ev(0, 0.0, 0.1)])];
        let a = train(&cfg, &tc, &recs, &val, 0.02, |_| {}).unwrap();
        let b = train(&cfg, &tc, &recs, &val, 0.02, |_| {}).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.log, b.log);
        assert!(a.final_params.bn.iter().all(|s: &BnState| s.updates > 0));
        assert!(a.log.iter().all(|e| e.val.is_some()));
        let c = train(
            &cfg,
            &TrainConfig { seed: 10, ..tc },
            &recs,
            &val,
            0.02,
            |_| {},
        )
        .unwrap();
        assert_ne!(a.final_params, c.final_params);
    }

    #[test]
    fn overfit_loss_decreases() {
        let cfg = tiny();
        let tc = TrainConfig {
            epochs: 5,
            lr: 3e-3,
            seed: 2,
            segment_stride: Some(8),
            ..Default::default()
        };
        // 20 segments of T = 8
        let recs: Vec<Recording> = (0..5)
            .map(|i| {
                toy_recording(
                    &format!("r{i}"),
                    32,
                    i as u64,
                    vec![ev(i % 2, 0.04 * i as f64, 0.04 * i as f64 + 0.2)],
                )
            })
            .collect();
        assert_eq!(segments_for(&recs, 8, 8).len(), 20);
        let out = train(&cfg, &tc, &recs, &[], 0.02, |_| {}).unwrap();
        for w in out.log.windows(2) {
            assert!(w[1].train.total < w[0].train.total, "{:?}", out.log);
        }
    }

    #[test]
    fn cross_validation_holds_out_each_recording() {
        let cfg = tiny();
        let tc = TrainConfig {
            epochs: 1,
            lr: 1e-3,
            ..Default::default()
        };
        let recs: Vec<Recording> = (0..3)
            .map(|i| toy_recording(&format!("r{i}"), 16, i, vec![ev(0, 0.0, 0.1)]))
            .collect();
        let outs = train_cv(&cfg, &tc, &recs, 0.02, |_, _| {}).unwrap();
        assert_eq!(outs.len(), 3);
        assert!(outs.iter().all(|o| o.log[0].val.is_some()));
        assert!(matches!(
            train_cv(&cfg, &tc, &recs[..1], 0.02, |_, _| {}),
            Err(Error::TooFewFolds(1))
        ));
    }

    #[test]
    fn shuffle_visits_every_segment_once() {
        let mut segs: Vec<SegmentRef> = (0..40).map(|i| (i % 3, i)).collect();
        let orig = segs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(1, 2));
        segs.shuffle(&mut rng);
        assert_ne!(segs, orig);
        segs.sort_unstable();
        let mut sorted = orig;
        sorted.sort_unstable();
        assert_eq!(segs, sorted);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(TrainConfig::default().stride(64), 32);
    }
}
