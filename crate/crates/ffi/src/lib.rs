//! C interface to paed: load a checkpoint, run detection on PCM samples,
//! read back events or confidence tracks.
//!
//! Every function returns a [`PaedStatus`]; on failure a description is
//! available from [`paed_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use paed::audio::{build_mel_filterbank, compute_logmel, Waveform};
use paed::checkpoint::Checkpoint;
use paed::decoder::{baseline_decode, decode, predict_recording, DecoderConfig, DetectedEvent};
use paed::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptFile = 4,
    VersionMismatch = 5,
    Config = 6,
    Numeric = 7,
    Internal = 8,
    Panic = 9,
}

/// One detected event, times in seconds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaedEvent {
    pub class_id: u32,
    pub onset_s: f64,
    pub offset_s: f64,
    pub peak: f64,
}

/// A loaded checkpoint.
pub struct PaedModel {
    ck: Checkpoint,
    names: Vec<CString>,
}

pub struct PaedEvents {
    events: Vec<PaedEvent>,
}

/// Normalized confidence, class-major `[class * n_frames + frame]`.
pub struct PaedTrack {
    n_classes: usize,
    n_frames: usize,
    hop_s: f64,
    scores: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> PaedStatus {
    match e {
        Error::Io { .. } | Error::MissingInput(_) => PaedStatus::Io,
        Error::CorruptFile(_) => PaedStatus::CorruptFile,
        Error::VersionMismatch { .. } => PaedStatus::VersionMismatch,
        Error::InvalidConfig(_) | Error::ConfigMismatch(_) | Error::NoRunningStats(_) => {
            PaedStatus::Config
        }
        Error::NonFinite(_) => PaedStatus::Numeric,
        Error::TooShort { .. } | Error::UnsupportedFormat(_) | Error::ShapeMismatch(_) => {
            PaedStatus::InvalidArgument
        }
        _ => PaedStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (PaedStatus, String)>) -> PaedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PaedStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PaedStatus::Panic
        }
    }
}

fn lift(e: Error) -> (PaedStatus, String) {
    (status_of(&e), format!("{}: {e}", e.kind()))
}

fn null(what: &str) -> (PaedStatus, String) {
    (PaedStatus::NullPointer, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn paed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next paed call on the same thread.
#[no_mangle]
pub extern "C" fn paed_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paed_model_load(
    path: *const c_char,
    out: *mut *mut PaedModel,
) -> PaedStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (PaedStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ck = Checkpoint::load(path).map_err(lift)?;
        let names = ck
            .class_names
            .iter()
            .map(|n| CString::new(n.as_str()).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(PaedModel { ck, names }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`paed_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn paed_model_free(model: *mut PaedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of event classes, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn paed_model_num_classes(model: *const PaedModel) -> usize {
    model.as_ref().map_or(0, |m| m.names.len())
}

/// Class name owned by the model; valid while the model lives.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn paed_model_class_name(
    model: *const PaedModel,
    index: usize,
    out: *mut *const c_char,
) -> PaedStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let name = m.names.get(index).ok_or_else(|| {
            (
                PaedStatus::InvalidArgument,
                format!("class index {index} out of range"),
            )
        })?;
        *out = name.as_ptr();
        Ok(())
    })
}

unsafe fn samples<'a>(data: *const f64, len: usize) -> Result<&'a [f64], (PaedStatus, String)> {
    if data.is_null() {
        return Err(null("samples"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

fn run_model(
    m: &PaedModel,
    pcm: &[f64],
    sample_rate: u32,
) -> Result<paed::decoder::RecordingPredictions, (PaedStatus, String)> {
    let ck = &m.ck;
    if pcm.iter().any(|v| !v.is_finite()) {
        return Err((
            PaedStatus::InvalidArgument,
            "samples contain NaN or infinity".into(),
        ));
    }
    let wave = Waveform::new(pcm.to_vec(), sample_rate);
    ck.spectrogram.validate(sample_rate).map_err(lift)?;
    let fb = build_mel_filterbank(&ck.spectrogram, sample_rate).map_err(lift)?;
    let spec = compute_logmel(&wave, &ck.spectrogram, &fb, "ffi").map_err(lift)?;
    let feats = ck.standardizer.apply(&spec).map_err(lift)?;
    predict_recording(&ck.model, &[&ck.params], &feats, &DecoderConfig::default()).map_err(lift)
}

/// Detects events in mono PCM samples in [-1, 1]. `baseline` non-zero
/// selects the median-filter decode.
///
/// # Safety
/// `model` must be live, `samples` must point to `len` values, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn paed_detect(
    model: *const PaedModel,
    samples_ptr: *const f64,
    len: usize,
    sample_rate: u32,
    baseline: i32,
    out: *mut *mut PaedEvents,
) -> PaedStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let pcm = samples(samples_ptr, len)?;
        let preds = run_model(m, pcm, sample_rate)?;
        let th = &m.ck.thresholds;
        let events: Vec<DetectedEvent> = if baseline != 0 {
            baseline_decode(
                &preds.framewise(),
                preds.n_classes,
                &th.baseline_alpha,
                &th.median_windows,
            )
            .map_err(lift)?
        } else {
            decode(&preds, &th.alpha, &th.beta, false).map_err(lift)?.1
        };
        let hop = m.ck.spectrogram.hop_s();
        let events = events
            .iter()
            .map(|e| {
                let i = e.to_instance(hop);
                PaedEvent {
                    class_id: e.class_id as u32,
                    onset_s: i.onset_s,
                    offset_s: i.offset_s,
                    peak: e.peak_score,
                }
            })
            .collect();
        *out = Box::into_raw(Box::new(PaedEvents { events }));
        Ok(())
    })
}

/// # Safety
/// `events` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn paed_events_len(events: *const PaedEvents) -> usize {
    events.as_ref().map_or(0, |e| e.events.len())
}

/// # Safety
/// `events` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn paed_events_get(
    events: *const PaedEvents,
    index: usize,
    out: *mut PaedEvent,
) -> PaedStatus {
    guard(|| {
        let e = events.as_ref().ok_or_else(|| null("events"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = *e.events.get(index).ok_or_else(|| {
            (
                PaedStatus::InvalidArgument,
                format!("event index {index} out of range"),
            )
        })?;
        Ok(())
    })
}

/// # Safety
/// `events` must come from [`paed_detect`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn paed_events_free(events: *mut PaedEvents) {
    if !events.is_null() {
        drop(Box::from_raw(events));
    }
}

/// Normalized per-class confidence track of the proposed decoder.
///
/// # Safety
/// As for [`paed_detect`].
#[no_mangle]
pub unsafe extern "C" fn paed_confidence(
    model: *const PaedModel,
    samples_ptr: *const f64,
    len: usize,
    sample_rate: u32,
    out: *mut *mut PaedTrack,
) -> PaedStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let pcm = samples(samples_ptr, len)?;
        let preds = run_model(m, pcm, sample_rate)?;
        let th = &m.ck.thresholds;
        let (track, _) = decode(&preds, &th.alpha, &th.beta, false).map_err(lift)?;
        *out = Box::into_raw(Box::new(PaedTrack {
            n_classes: track.n_classes,
            n_frames: track.n_frames,
            hop_s: m.ck.spectrogram.hop_s(),
            scores: track.scores,
        }));
        Ok(())
    })
}

/// # Safety
/// `track` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn paed_track_frames(track: *const PaedTrack) -> usize {
    track.as_ref().map_or(0, |t| t.n_frames)
}

/// # Safety
/// `track` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn paed_track_classes(track: *const PaedTrack) -> usize {
    track.as_ref().map_or(0, |t| t.n_classes)
}

/// Seconds between frames, 0 for a null handle.
///
/// # Safety
/// `track` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn paed_track_hop_s(track: *const PaedTrack) -> f64 {
    track.as_ref().map_or(0.0, |t| t.hop_s)
}

/// Borrowed pointer to `classes * frames` scores, class-major; valid while
/// the track lives.
///
/// # Safety
/// `track` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn paed_track_data(
    track: *const PaedTrack,
    out: *mut *const f64,
) -> PaedStatus {
    guard(|| {
        let t = track.as_ref().ok_or_else(|| null("track"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = t.scores.as_ptr();
        Ok(())
    })
}

/// # Safety
/// `track` must come from [`paed_confidence`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn paed_track_free(track: *mut PaedTrack) {
    if !track.is_null() {
        drop(Box::from_raw(track));
    }
}
