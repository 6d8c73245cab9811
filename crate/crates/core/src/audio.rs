//! Waveform loading and log-Mel feature extraction.
//!
//! The front end is fixed to 44.1 kHz input: 40 ms Hamming windows with a
//! 20 ms hop, zero-padded to a 2048-point FFT, projected on 40 unit-peak
//! triangular Mel filters spanning [50, 22050] Hz, then natural-log
//! compressed with a floor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 44_100;

const CACHE_MAGIC: &[u8; 4] = b"LMEL";

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM WAV file, keeping only the first channel.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav(BufReader::new(file), &path.display().to_string())
}

pub fn read_wav<R: Read>(reader: R, name: &str) -> Result<Waveform> {
    let mut reader = hound::WavReader::new(reader).map_err(|e| map_hound(e, name))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat(format!(
            "{name}: only integer PCM is supported"
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!(
            "{name}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
    let mut samples = Vec::with_capacity(reader.len() as usize / channels);
    for (i, s) in reader.samples::<i32>().enumerate() {
        let s = s.map_err(|e| map_hound(e, name))?;
        if i % channels == 0 {
            samples.push(s as f64 * scale);
        }
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

fn map_hound(e: hound::Error, name: &str) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(name, io),
        other => Error::UnsupportedFormat(format!("{name}: {other}")),
    }
}

/// Writes mono 16-bit PCM. Samples are clipped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let name = path.display().to_string();
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, &name))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| map_hound(e, &name))?;
    }
    writer.finalize().map_err(|e| map_hound(e, &name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            fmin_hz: 50.0,
            fmax_hz: 22_050.0,
            win_ms: 40.0,
            hop_ms: 20.0,
            fft_size: 2048,
            log_floor: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_s(&self) -> f64 {
        self.hop_ms / 1000.0
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if (self.hop_ms - self.win_ms / 2.0).abs() > 1e-9 {
            return bad(format!(
                "hop_ms ({}) must be half of win_ms ({})",
                self.hop_ms, self.win_ms
            ));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            return bad(format!(
                "need 0 <= fmin ({}) < fmax ({})",
                self.fmin_hz, self.fmax_hz
            ));
        }
        if self.fmax_hz > sample_rate as f64 / 2.0 {
            return bad(format!("fmax {} exceeds Nyquist", self.fmax_hz));
        }
        if self.fft_size < self.win_samples(sample_rate) {
            return bad(format!(
                "fft_size {} shorter than window of {} samples",
                self.fft_size,
                self.win_samples(sample_rate)
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// Row-major `[n_mels × n_bins]`.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    pub center_freqs_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Index of the filter whose center lies closest to `freq_hz`.
    pub fn nearest_filter(&self, freq_hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.center_freqs_hz.iter().enumerate() {
            if (c - freq_hz).abs() < (self.center_freqs_hz[best] - freq_hz).abs() {
                best = i;
            }
        }
        best
    }
}

pub fn build_mel_filterbank(cfg: &SpectrogramConfig, sample_rate: u32) -> Result<MelFilterbank> {
    cfg.validate(sample_rate)?;
    let n_bins = cfg.fft_size / 2 + 1;
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();

    let center_bins: Vec<i64> = edges[1..=cfg.n_mels]
        .iter()
        .map(|c| (c / bin_hz).round() as i64)
        .collect();
    if center_bins.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(
            "two mel filter centers fall on the same FFT bin".into(),
        ));
    }

    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            *w = rise.min(fall).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "mel filter {m} covers no FFT bin"
            )));
        }
        for w in row.iter_mut() {
            *w /= peak;
        }
    }

    Ok(MelFilterbank {
        weights,
        n_mels: cfg.n_mels,
        n_bins,
        center_freqs_hz: edges[1..=cfg.n_mels].to_vec(),
    })
}

/// Log-Mel spectrogram stored frame-major: `values[n * n_mels + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Vec<f64>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub hop_s: f64,
    pub recording_id: String,
}

impl LogMelSpectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[frame * self.n_mels + mel]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

pub fn frame_count(n_samples: usize, win: usize, hop: usize) -> usize {
    if n_samples < win {
        0
    } else {
        (n_samples - win) / hop + 1
    }
}

pub fn compute_logmel(
    wave: &Waveform,
    cfg: &SpectrogramConfig,
    fb: &MelFilterbank,
    recording_id: &str,
) -> Result<LogMelSpectrogram> {
    let win = cfg.win_samples(wave.sample_rate);
    let hop = cfg.hop_samples(wave.sample_rate);
    if wave.samples.len() < win {
        return Err(Error::TooShort {
            samples: wave.samples.len(),
            window: win,
        });
    }
    if fb.n_bins != cfg.fft_size / 2 + 1 || fb.n_mels != cfg.n_mels {
        return Err(Error::ShapeMismatch(format!(
            "filterbank {}x{} does not match config",
            fb.n_mels, fb.n_bins
        )));
    }
    let n_frames = frame_count(wave.samples.len(), win, hop);
    let window = hamming(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; fb.n_bins];
    let mut values = Vec::with_capacity(n_frames * cfg.n_mels);
    for n in 0..n_frames {
        let start = n * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(wave.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push(e.max(cfg.log_floor).ln());
        }
    }
    Ok(LogMelSpectrogram {
        values,
        n_mels: cfg.n_mels,
        n_frames,
        hop_s: cfg.hop_s(),
        recording_id: recording_id.to_string(),
    })
}

/// Per-mel-bin mean and standard deviation fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

pub fn fit_standardizer(specs: &[&LogMelSpectrogram]) -> Result<Standardizer> {
    let total: usize = specs.iter().map(|s| s.n_frames).sum();
    if total < 2 {
        return Err(Error::EmptyCorpus);
    }
    let n_mels = specs[0].n_mels;
    if specs.iter().any(|s| s.n_mels != n_mels) {
        return Err(Error::ShapeMismatch("mixed mel counts in corpus".into()));
    }
    let mut mean = vec![0.0; n_mels];
    for s in specs {
        for frame in s.values.chunks_exact(n_mels) {
            for (acc, v) in mean.iter_mut().zip(frame) {
                *acc += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut var = vec![0.0; n_mels];
    for s in specs {
        for frame in s.values.chunks_exact(n_mels) {
            for ((acc, v), m) in var.iter_mut().zip(frame).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / total as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(Standardizer { mean, std })
}

impl Standardizer {
    /// Returns standardized features, frame-major like the input.
    pub fn apply(&self, spec: &LogMelSpectrogram) -> Result<Vec<f64>> {
        if spec.n_mels != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "standardizer has {} bins, spectrogram {}",
                self.mean.len(),
                spec.n_mels
            )));
        }
        Ok(spec
            .values
            .chunks_exact(spec.n_mels)
            .flat_map(|frame| {
                frame
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect())
    }
}

pub fn apply_standardizer(st: &Standardizer, spec: &LogMelSpectrogram) -> Result<Vec<f64>> {
    st.apply(spec)
}

/// Writes the feature cache: "LMEL", u32 M, u32 N, u32 reserved, then
/// M·N little-endian f32 in frame-major order.
pub fn write_feature_cache(path: impl AsRef<Path>, spec: &LogMelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CACHE_MAGIC)?;
    write(&(spec.n_mels as u32).to_le_bytes())?;
    write(&(spec.n_frames as u32).to_le_bytes())?;
    write(&0u32.to_le_bytes())?;
    for v in &spec.values {
        write(&(*v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(
    path: impl AsRef<Path>,
    hop_s: f64,
    recording_id: &str,
) -> Result<LogMelSpectrogram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::UnsupportedFormat(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(corrupt("not a feature cache file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (n_mels, n_frames) = (word(4), word(8));
    if bytes.len() != 16 + 4 * n_mels * n_frames {
        return Err(corrupt("payload length does not match header"));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(LogMelSpectrogram {
        values,
        n_mels,
        n_frames,
        hop_s,
        recording_id: recording_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_fb() -> MelFilterbank {
        build_mel_filterbank(&SpectrogramConfig::default(), SAMPLE_RATE).unwrap()
    }

    fn wav_bytes(samples: &[i16], rate: u32) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = std::io::Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut cursor, spec).unwrap();
            for &s in samples {
                w.write_sample(s).unwrap();
            }
            w.finalize().unwrap();
        }
        cursor.into_inner()
    }

    #[test]
    fn silence_wav_loads_as_zeros() {
        let bytes = wav_bytes(&vec![0; 44_100], 44_100);
        let w = read_wav(std::io::Cursor::new(bytes), "silence").unwrap();
        assert_eq!(w.samples.len(), 44_100);
        assert!(w.samples.iter().all(|&s| s == 0.0));
        assert_eq!(w.sample_rate, 44_100);
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let bytes = wav_bytes(&[0; 160], 16_000);
        let err = read_wav(std::io::Cursor::new(bytes), "16k").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
    }

    #[test]
    fn full_scale_square_wave_scaling() {
        let samples: Vec<i16> = (0..100)
            .map(|i| if i % 2 == 0 { i16::MAX } else { i16::MIN })
            .collect();
        let w = read_wav(std::io::Cursor::new(wav_bytes(&samples, 44_100)), "sq").unwrap();
        assert_eq!(w.samples[0], 32767.0 / 32768.0);
        assert_eq!(w.samples[1], -1.0);
        assert!((w.samples[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn stereo_keeps_first_channel() {
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = std::io::Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut cursor, spec).unwrap();
            for i in 0..10i16 {
                w.write_sample(i * 100).unwrap();
                w.write_sample(-1000).unwrap();
            }
            w.finalize().unwrap();
        }
        let w = read_wav(std::io::Cursor::new(cursor.into_inner()), "st").unwrap();
        assert_eq!(w.samples.len(), 10);
        assert_eq!(w.samples[3], 300.0 / 32768.0);
    }

    #[test]
    fn mel_scale_reference_points() {
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_centers_and_rows() {
        let fb = default_fb();
        assert_eq!(fb.n_mels, 40);
        assert!(fb.center_freqs_hz.windows(2).all(|w| w[0] < w[1]));
        assert!(fb.center_freqs_hz[0] > 50.0);
        assert!(*fb.center_freqs_hz.last().unwrap() < 22_050.0);
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let ones = row.iter().filter(|&&w| w == 1.0).count();
            assert_eq!(ones, 1, "row {m}");
            assert!(row.iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn filterbank_covers_every_interior_bin() {
        let cfg = SpectrogramConfig::default();
        let fb = default_fb();
        let bin_hz = SAMPLE_RATE as f64 / cfg.fft_size as f64;
        for k in 0..fb.n_bins {
            let f = k as f64 * bin_hz;
            if f > cfg.fmin_hz && f < cfg.fmax_hz {
                assert!(
                    (0..fb.n_mels).any(|m| fb.row(m)[k] > 0.0),
                    "bin {k} uncovered"
                );
            }
        }
    }

    #[test]
    fn collapsing_centers_are_rejected() {
        let cfg = SpectrogramConfig {
            n_mels: 40,
            fmin_hz: 50.0,
            fmax_hz: 300.0,
            ..Default::default()
        };
        assert!(matches!(
            build_mel_filterbank(&cfg, SAMPLE_RATE),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_invariants() {
        let cfg = SpectrogramConfig {
            hop_ms: 10.0,
            ..Default::default()
        };
        assert!(cfg.validate(SAMPLE_RATE).is_err());
        let cfg = SpectrogramConfig {
            fft_size: 1024,
            ..Default::default()
        };
        assert!(cfg.validate(SAMPLE_RATE).is_err());
        let cfg = SpectrogramConfig {
            fmax_hz: 30_000.0,
            ..Default::default()
        };
        assert!(cfg.validate(SAMPLE_RATE).is_err());
        assert!(SpectrogramConfig::default().validate(SAMPLE_RATE).is_ok());
    }

    #[test]
    fn one_second_has_49_frames_and_silence_hits_floor() {
        let cfg = SpectrogramConfig::default();
        let w = Waveform::new(vec![0.0; 44_100], SAMPLE_RATE);
        let spec = compute_logmel(&w, &cfg, &default_fb(), "s").unwrap();
        assert_eq!(spec.n_frames, (44_100 - 1764) / 882 + 1);
        assert_eq!(spec.n_frames, 49);
        let floor = 1e-10f64.ln();
        assert!(spec.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_waveform() {
        let w = Waveform::new(vec![0.0; 1000], SAMPLE_RATE);
        let err = compute_logmel(&w, &SpectrogramConfig::default(), &default_fb(), "x");
        assert!(matches!(err, Err(Error::TooShort { .. })));
    }

    #[test]
    fn pure_tone_peaks_at_nearest_filter() {
        let cfg = SpectrogramConfig::default();
        let fb = default_fb();
        let samples = (0..44_100)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 44_100.0).sin() * 0.5)
            .collect();
        let spec = compute_logmel(&Waveform::new(samples, SAMPLE_RATE), &cfg, &fb, "tone").unwrap();
        let expected = fb.nearest_filter(1000.0);
        for n in 0..spec.n_frames {
            let frame = spec.frame(n);
            let argmax = (0..frame.len())
                .max_by(|&a, &b| frame[a].partial_cmp(&frame[b]).unwrap())
                .unwrap();
            assert_eq!(argmax, expected, "frame {n}");
        }
    }

    #[test]
    fn features_are_deterministic_and_monotone_in_gain() {
        let cfg = SpectrogramConfig::default();
        let fb = default_fb();
        let samples: Vec<f64> = (0..20_000)
            .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
            .collect();
        let quiet = Waveform::new(samples.clone(), SAMPLE_RATE);
        let loud = Waveform::new(samples.iter().map(|s| s * 1.7).collect(), SAMPLE_RATE);
        let a = compute_logmel(&quiet, &cfg, &fb, "a").unwrap();
        let b = compute_logmel(&quiet, &cfg, &fb, "a").unwrap();
        assert_eq!(a, b);
        let c = compute_logmel(&loud, &cfg, &fb, "a").unwrap();
        assert!(a.values.iter().zip(&c.values).all(|(x, y)| y >= x));
    }

    fn spec_from(values: Vec<f64>, n_mels: usize) -> LogMelSpectrogram {
        LogMelSpectrogram {
            n_frames: values.len() / n_mels,
            values,
            n_mels,
            hop_s: 0.02,
            recording_id: "r".into(),
        }
    }

    #[test]
    fn standardizer_hand_values() {
        let a = spec_from(vec![1.0], 1);
        let b = spec_from(vec![3.0], 1);
        let st = fit_standardizer(&[&a, &b]).unwrap();
        assert_eq!(st.mean, vec![2.0]);
        assert_eq!(st.std, vec![1.0]);
    }

    #[test]
    fn standardizer_constant_bin_and_zero_mean() {
        let values: Vec<f64> = (0..200)
            .flat_map(|i| [-23.025850929940457, (i as f64 * 0.37).sin() * 4.0 + 2.0])
            .collect();
        let spec = spec_from(values, 2);
        let st = fit_standardizer(&[&spec]).unwrap();
        assert_eq!(st.std[0], STD_FLOOR);
        let out = st.apply(&spec).unwrap();
        let mut mean1 = 0.0;
        for frame in out.chunks_exact(2) {
            assert!(frame[0].abs() < 1e-6);
            mean1 += frame[1];
        }
        assert!((mean1 / 200.0).abs() < 1e-6);
    }

    #[test]
    fn standardizer_needs_two_frames() {
        let a = spec_from(vec![1.0, 2.0], 2);
        assert!(matches!(fit_standardizer(&[&a]), Err(Error::EmptyCorpus)));
        assert!(matches!(fit_standardizer(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn feature_cache_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.lmel");
        let spec = spec_from(vec![0.5, -1.25, 3.0, 4.0, 5.5, -6.0], 3);
        write_feature_cache(&path, &spec).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"LMEL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), -1.25);
        let back = read_feature_cache(&path, 0.02, "r").unwrap();
        assert_eq!(back, spec);
    }
}
