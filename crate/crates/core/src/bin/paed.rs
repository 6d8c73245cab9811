use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paed::annotation::{load_annotations, parse_annotations, EventInstance, LabelMap, Split};
use paed::audio::{build_mel_filterbank, compute_logmel, load_wav, write_feature_cache};
use paed::checkpoint::Checkpoint;
use paed::config::RunConfig;
use paed::dataset::{prepare_recording, Corpus, Recording};
use paed::decoder::{confidence_csv, decode, detections_csv, predict_recording, DetectedEvent};
use paed::metrics::{evaluate_corpus, report, report_csv, report_table, Thresholds};
use paed::model::ModelParams;
use paed::pipeline::{self, detect, predict_all, tune, DecoderKind};
use paed::synth::emit_dataset;
use paed::trainer::{loss_log_csv, train, train_cv};
use paed::{Error, Result};

#[derive(Parser)]
#[command(
    name = "paed",
    version,
    about = "Polyphonic audio event detection with onset/offset-aware decoding"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; sections not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed of the synth and train sections.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (WAVs, annotations, labels, manifest).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Largest number of simultaneous events (1 = isolated).
        #[arg(long)]
        max_polyphony: Option<usize>,
    },
    /// Compute log-mel feature caches for every manifest entry.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on the manifest's train split, validating on its val split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Leave-one-recording-out over the train split; one model per fold.
        #[arg(long)]
        cv: bool,
    },
    /// Grid-search decoder thresholds on a split and store them in a checkpoint.
    Tune {
        /// One or more checkpoints; several are averaged as an ensemble.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Output checkpoint(s) directory; inputs are never modified.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Detect events and write a detections CSV.
    Detect {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Audio files to process.
        #[arg(long, num_args = 1..)]
        audio: Vec<PathBuf>,
        /// Alternatively, a manifest split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use the thresholded, median-filtered frame-wise decode.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detections CSV against reference annotations.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the normalized confidence track of one recording as CSV.
    ExportConfidence {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize, train, tune and evaluate both decoders in one go.
    Experiment {
        #[arg(long)]
        out_dir: PathBuf,
        /// Start from the laptop-sized settings instead of the full model.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        max_polyphony: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(g: &Global, cmd: &Command) -> Result<RunConfig> {
    let mut cfg = match (&g.config, cmd) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Command::Experiment { desk: true, .. }) => RunConfig::desk(),
        (None, _) => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    match cmd {
        Command::Synth {
            max_polyphony: Some(k),
            ..
        }
        | Command::Experiment {
            max_polyphony: Some(k),
            ..
        } => cfg.synth.max_polyphony = *k,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let cfg = resolve_config(&cli.global, &cli.cmd)?;
    if cli.global.print_config {
        // a closed pipe (e.g. `| head`) is not an error
        let _ = writeln!(std::io::stdout(), "{}", cfg.to_json());
        return Ok(());
    }
    match cli.cmd {
        Command::Synth { out_dir, .. } => {
            let manifest = emit_dataset(&cfg.synth, &out_dir)?;
            println!("{}", manifest.display());
        }
        Command::Features { manifest, out_dir } => cmd_features(&cfg, &manifest, &out_dir)?,
        Command::Train {
            manifest,
            labels,
            out_dir,
            cv,
        } => cmd_train(&cfg, &manifest, &labels, &out_dir, cv)?,
        Command::Tune {
            checkpoint,
            manifest,
            split,
            out_dir,
        } => cmd_tune(&cfg, &checkpoint, &manifest, &split, &out_dir)?,
        Command::Detect {
            checkpoint,
            audio,
            manifest,
            split,
            baseline,
            out,
        } => cmd_detect(
            &cfg,
            &checkpoint,
            &audio,
            manifest.as_deref(),
            &split,
            baseline,
            &out,
        )?,
        Command::Evaluate {
            manifest,
            labels,
            split,
            detections,
            out_dir,
        } => cmd_evaluate(&cfg, &manifest, &labels, &split, &detections, &out_dir)?,
        Command::ExportConfidence {
            checkpoint,
            audio,
            out,
        } => cmd_export_confidence(&checkpoint, &audio, &out)?,
        Command::Experiment { out_dir, .. } => {
            let (summary, files) = pipeline::run_experiment(&cfg, &out_dir, |m| eprintln!("{m}"))?;
            let c = &summary.comparison;
            println!(
                "test overall F1: proposed {:.1}%  baseline {:.1}%",
                100.0 * c.test_overall_f1_proposed,
                100.0 * c.test_overall_f1_baseline
            );
            println!("{}", files.summary.display());
        }
    }
    Ok(())
}

fn need(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.display().to_string()))
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown split '{s}' (train, val, test)")))
}

fn load_labels(path: &Path) -> Result<LabelMap> {
    need(path)?;
    LabelMap::load(path)
}

fn cmd_features(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<()> {
    need(manifest)?;
    mkdir(out_dir)?;
    let entries = paed::annotation::load_manifest(manifest)?;
    let mut fb = None;
    for e in entries {
        let wave = load_wav(&e.audio_path)?;
        let fb = match &fb {
            Some(f) => f,
            None => fb.insert(build_mel_filterbank(&cfg.spectrogram, wave.sample_rate)?),
        };
        let spec = compute_logmel(&wave, &cfg.spectrogram, fb, &e.recording_id)?;
        write_feature_cache(out_dir.join(format!("{}.lmel", e.recording_id)), &spec)?;
    }
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    labels: &Path,
    out_dir: &Path,
    cv: bool,
) -> Result<()> {
    need(manifest)?;
    let labels = load_labels(labels)?;
    let mut cfg = cfg.clone();
    cfg.model.n_classes = labels.len();
    mkdir(out_dir)?;
    let data = pipeline::prepare(manifest, &labels, &cfg, None)?;
    let report = |tag: String| {
        move |e: &paed::trainer::EpochLog| {
            eprintln!(
                "{tag}epoch {:>3}  train {:.4}  val {}",
                e.epoch,
                e.train.total,
                e.val.map_or("-".into(), |v| format!("{:.4}", v.total))
            )
        }
    };
    let th = Thresholds::defaults(labels.len());
    if cv {
        let outs = train_cv(&cfg.model, &cfg.train, &data.train, data.hop_s, |k, e| {
            report(format!("fold {k} "))(e)
        })?;
        for (k, out) in outs.iter().enumerate() {
            let ck = pipeline::make_checkpoint(
                &cfg,
                &labels,
                &data.standardizer,
                out.best_params.clone(),
                th.clone(),
            );
            ck.save(out_dir.join(format!("fold{k:02}.paed")))?;
            write(
                &out_dir.join(format!("loss_fold{k:02}.csv")),
                loss_log_csv(&out.log),
            )?;
        }
    } else {
        let out = train(
            &cfg.model,
            &cfg.train,
            &data.train,
            &data.val,
            data.hop_s,
            report(String::new()),
        )?;
        let best = pipeline::make_checkpoint(
            &cfg,
            &labels,
            &data.standardizer,
            out.best_params,
            th.clone(),
        );
        best.save(out_dir.join("model.paed"))?;
        let last =
            pipeline::make_checkpoint(&cfg, &labels, &data.standardizer, out.final_params, th);
        last.save(out_dir.join("model_final.paed"))?;
        write(&out_dir.join("loss.csv"), loss_log_csv(&out.log))?;
    }
    Ok(())
}

/// Checkpoints that share one model, spectrogram and standardizer.
fn load_ensemble(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    let mut out: Vec<Checkpoint> = Vec::with_capacity(paths.len());
    for p in paths {
        need(p)?;
        let ck = Checkpoint::load(p)?;
        if let Some(first) = out.first() {
            first.ensure_compatible(&ck.model)?;
            if first.spectrogram != ck.spectrogram || first.class_names != ck.class_names {
                return Err(Error::ConfigMismatch(format!(
                    "{} does not match the first checkpoint",
                    p.display()
                )));
            }
        }
        out.push(ck);
    }
    Ok(out)
}

/// The run configuration implied by a checkpoint, keeping the decoder and
/// matching sections of `cfg`.
fn config_for(cfg: &RunConfig, ck: &Checkpoint) -> RunConfig {
    RunConfig {
        model: ck.model.clone(),
        spectrogram: ck.spectrogram.clone(),
        ..cfg.clone()
    }
}

fn split_recordings(
    cfg: &RunConfig,
    ck: &Checkpoint,
    manifest: &Path,
    split: Split,
) -> Result<(Vec<Recording>, f64)> {
    need(manifest)?;
    let labels = LabelMap::new(ck.class_names.clone());
    let corpus = Corpus::load(manifest, &labels, &cfg.spectrogram)?;
    Ok((corpus.prepare(split, &ck.standardizer)?, corpus.hop_s))
}

fn cmd_tune(
    cfg: &RunConfig,
    paths: &[PathBuf],
    manifest: &Path,
    split: &str,
    out_dir: &Path,
) -> Result<()> {
    let cks = load_ensemble(paths)?;
    let cfg = config_for(cfg, &cks[0]);
    let (recs, hop_s) = split_recordings(&cfg, &cks[0], manifest, parse_split(split)?)?;
    if recs.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let models: Vec<&ModelParams> = cks.iter().map(|c| &c.params).collect();
    let preds = predict_all(&cfg, &models, &recs)?;
    let (th, f1, f1_base) = tune(&cfg, &preds, &recs, hop_s)?;
    mkdir(out_dir)?;
    for (ck, path) in cks.iter().zip(paths) {
        let tuned = Checkpoint {
            thresholds: th.clone(),
            ..ck.clone()
        };
        tuned.save(out_dir.join(path.file_name().unwrap_or_default()))?;
    }
    for (c, name) in cks[0].class_names.iter().enumerate() {
        println!(
            "{name}: alpha {:.2} beta {:.2} (F1 {:.1}%)  baseline alpha {:.2} window {} (F1 {:.1}%)",
            th.alpha[c],
            th.beta[c],
            100.0 * f1[c],
            th.baseline_alpha[c],
            th.median_windows[c],
            100.0 * f1_base[c]
        );
    }
    Ok(())
}

fn audio_recordings(ck: &Checkpoint, audio: &[PathBuf]) -> Result<Vec<Recording>> {
    let mut fb = None;
    audio
        .iter()
        .map(|p| {
            need(p)?;
            let wave = load_wav(p)?;
            let fb = match &fb {
                Some(f) => f,
                None => fb.insert(build_mel_filterbank(&ck.spectrogram, wave.sample_rate)?),
            };
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let spec = compute_logmel(&wave, &ck.spectrogram, fb, &id)?;
            let ann = parse_annotations("", &LabelMap::new(ck.class_names.clone()), &id)?;
            prepare_recording(&spec, ann, &ck.standardizer)
        })
        .collect()
}

fn cmd_detect(
    cfg: &RunConfig,
    paths: &[PathBuf],
    audio: &[PathBuf],
    manifest: Option<&Path>,
    split: &str,
    baseline: bool,
    out: &Path,
) -> Result<()> {
    let cks = load_ensemble(paths)?;
    let cfg = config_for(cfg, &cks[0]);
    let (recs, hop_s) = match manifest {
        Some(m) => split_recordings(&cfg, &cks[0], m, parse_split(split)?)?,
        None if !audio.is_empty() => (audio_recordings(&cks[0], audio)?, cfg.spectrogram.hop_s()),
        None => return Err(Error::MissingInput("--audio or --manifest".into())),
    };
    let models: Vec<&ModelParams> = cks.iter().map(|c| &c.params).collect();
    let kind = if baseline {
        DecoderKind::Baseline
    } else {
        DecoderKind::Proposed
    };
    let mut rows: Vec<(String, Vec<DetectedEvent>)> = Vec::with_capacity(recs.len());
    for (r, p) in recs.iter().zip(predict_all(&cfg, &models, &recs)?) {
        rows.push((r.id.clone(), detect(&cfg, &p, &cks[0].thresholds, kind)?));
    }
    let labels = LabelMap::new(cks[0].class_names.clone());
    write(out, detections_csv(&rows, hop_s, &labels))
}

fn read_detections(path: &Path, labels: &LabelMap) -> Result<Vec<(String, EventInstance)>> {
    need(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), i + 1);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(Error::parse(
                loc,
                "expected recording_id,class,onset_s,offset_s[,peak]",
            ));
        }
        let class_id = labels
            .id(f[1])
            .ok_or_else(|| Error::UnknownLabel(f[1].to_string()))?;
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(loc.clone(), format!("bad time '{s}'")))
        };
        out.push((
            f[0].to_string(),
            EventInstance {
                class_id,
                onset_s: num(f[2])?,
                offset_s: num(f[3])?,
            },
        ));
    }
    Ok(out)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    manifest: &Path,
    labels: &Path,
    split: &str,
    detections: &Path,
    out_dir: &Path,
) -> Result<()> {
    need(manifest)?;
    let labels = load_labels(labels)?;
    let split = parse_split(split)?;
    let hyps = read_detections(detections, &labels)?;
    let mut pairs = Vec::new();
    for e in paed::annotation::load_manifest(manifest)?
        .into_iter()
        .filter(|e| e.split == split)
    {
        let refs = load_annotations(&e.annotation_path, &labels)?.events;
        let h: Vec<EventInstance> = hyps
            .iter()
            .filter(|(id, _)| *id == e.recording_id)
            .map(|(_, ev)| *ev)
            .collect();
        pairs.push((refs, h));
    }
    let rep = report(&evaluate_corpus(&pairs, labels.len(), &cfg.matching))?;
    mkdir(out_dir)?;
    print!("{}", report_table(&rep, &labels));
    write(&out_dir.join("metrics.csv"), report_csv(&rep, &labels))?;
    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "split": split.as_str(),
        "detections": detections.display().to_string(),
        "metrics": rep,
    });
    write(
        &out_dir.join("run_summary.json"),
        serde_json::to_string_pretty(&summary).expect("json"),
    )
}

fn cmd_export_confidence(paths: &[PathBuf], audio: &Path, out: &Path) -> Result<()> {
    let cks = load_ensemble(paths)?;
    let rec = audio_recordings(&cks[0], &[audio.to_path_buf()])?.remove(0);
    let models: Vec<&ModelParams> = cks.iter().map(|c| &c.params).collect();
    let preds = predict_recording(&cks[0].model, &models, &rec.features, &Default::default())?;
    let th = &cks[0].thresholds;
    let (track, _) = decode(&preds, &th.alpha, &th.beta, false)?;
    let labels = LabelMap::new(cks[0].class_names.clone());
    write(
        out,
        confidence_csv(&track, cks[0].spectrogram.hop_s(), &labels),
    )
}
