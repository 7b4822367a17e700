//! Feature engineering: raw audio to unified time-frequency maps.
//!
//! An utterance goes through three steps: log power magnitude spectra via
//! a 512-point FFT (257 bins, all frames kept, no voice activity
//! detection), mean normalization over a 3-second sliding window, and
//! length unification by tiling the map to a fixed number of frames.
//!
//! Values are stored as f32, matching the on-disk `.afnf` format exactly;
//! intermediate arithmetic runs in f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{AfnError, Result};
use crate::leio;
use crate::tensor::{Shape, Tensor};

/// Expected input sample rate.
pub const SAMPLE_RATE: u32 = 16_000;
/// FFT size; the only size yielding the 257-bin log spectrum.
pub const FFT_SIZE: usize = 512;
/// Number of frequency bins, FFT_SIZE / 2 + 1.
pub const LOGSPEC_BINS: usize = 257;
/// Analysis window length in milliseconds.
pub const WIN_MS: f64 = 25.0;
/// Frame hop in milliseconds.
pub const HOP_MS: f64 = 10.0;
/// Sliding mean-normalization window in seconds.
pub const NORM_WINDOW_S: f64 = 3.0;
/// Default unified map length in frames (training-set maximum at paper scale).
pub const DEFAULT_TARGET_T: usize = 1091;
/// Floor inside the log so silent frames stay finite.
pub const LOG_FLOOR: f64 = 1e-10;

const AFNF_MAGIC: [u8; 4] = *b"AFNF";
const AFNF_VERSION: u32 = 1;

/// Mono audio, samples normalized to [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AfnError::Audio("empty waveform".into()));
        }
        if !samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0) {
            return Err(AfnError::Audio("waveform samples must be finite and in [-1, 1]".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    /// Reads a 16-bit PCM mono WAV file at the expected sample rate.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path)
            .map_err(|e| AfnError::Audio(format!("{}: {}", path.display(), e)))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(AfnError::Audio(format!("{}: expected mono, got {} channels", path.display(), spec.channels)));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(AfnError::Audio(format!(
                "{}: expected {} Hz, got {}",
                path.display(),
                SAMPLE_RATE,
                spec.sample_rate
            )));
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(AfnError::Audio(format!("{}: expected 16-bit PCM", path.display())));
        }
        let samples: std::result::Result<Vec<i16>, _> = reader.into_samples::<i16>().collect();
        let samples = samples.map_err(|e| AfnError::Audio(format!("{}: {}", path.display(), e)))?;
        let samples: Vec<f32> = samples.into_iter().map(|s| s as f32 / 32768.0).collect();
        Waveform::new(samples, SAMPLE_RATE)
    }

    /// Writes the waveform as 16-bit PCM mono WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer =
            hound::WavWriter::create(path, spec).map_err(|e| AfnError::Audio(format!("{}: {}", path.display(), e)))?;
        for &s in &self.samples {
            let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| AfnError::Audio(e.to_string()))?;
        }
        writer.finalize().map_err(|e| AfnError::Audio(e.to_string()))?;
        Ok(())
    }
}

/// An F x T log-power-spectrogram matrix for one utterance, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub utt_id: String,
    pub f: usize,
    pub t: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(utt_id: impl Into<String>, f: usize, t: usize, data: Vec<f32>) -> Result<Self> {
        if f == 0 || t == 0 {
            return Err(AfnError::InvalidArgument("feature map dims must be positive".into()));
        }
        if data.len() != f * t {
            return Err(AfnError::ShapeMismatch(format!(
                "feature map data length {} != {}x{}",
                data.len(),
                f,
                t
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AfnError::NonFinite("feature map".into()));
        }
        Ok(FeatureMap { utt_id: utt_id.into(), f, t, data })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.t + col]
    }

    /// Widens to a (1, 1, F, T) tensor for the model.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: Shape::new(1, 1, self.f, self.t),
            data: self.data.iter().map(|&v| v as f64).collect(),
            requires_grad: false,
        }
    }

    pub fn write_afnf(&self, path: &Path) -> Result<()> {
        write_afnf(path, self.f, self.t, &self.data)
    }

    /// Reads an `.afnf` file; the utterance id is the file stem.
    pub fn read_afnf(path: &Path) -> Result<Self> {
        let utt_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let bad = |reason: String| AfnError::Format { path: path.to_path_buf(), reason };
        let magic = leio::read_magic(&mut r).map_err(|_| bad("truncated header".into()))?;
        if magic != AFNF_MAGIC {
            return Err(bad("bad magic, not an AFNF file".into()));
        }
        let version = leio::read_u32(&mut r).map_err(|_| bad("truncated header".into()))?;
        if version != AFNF_VERSION {
            return Err(bad(format!("unsupported version {}", version)));
        }
        let f = leio::read_u32(&mut r).map_err(|_| bad("truncated header".into()))? as usize;
        let t = leio::read_u32(&mut r).map_err(|_| bad("truncated header".into()))? as usize;
        let numel = f.checked_mul(t).ok_or_else(|| bad("dimension overflow".into()))?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(leio::read_f32(&mut r).map_err(|_| bad("truncated data".into()))?);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        FeatureMap::new(utt_id, f, t, data)
    }
}

fn write_afnf(path: &Path, f: usize, t: usize, data: &[f32]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&AFNF_MAGIC)?;
    leio::write_u32(&mut w, AFNF_VERSION)?;
    leio::write_u32(&mut w, f as u32)?;
    leio::write_u32(&mut w, t as u32)?;
    for &v in data {
        leio::write_f32(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-length map fed to the network: every column t equals the source
/// column t mod T.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedMap {
    pub utt_id: String,
    pub f: usize,
    pub t: usize,
    pub data: Vec<f32>,
}

impl UnifiedMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: Shape::new(1, 1, self.f, self.t),
            data: self.data.iter().map(|&v| v as f64).collect(),
            requires_grad: false,
        }
    }

    pub fn write_afnf(&self, path: &Path) -> Result<()> {
        write_afnf(path, self.f, self.t, &self.data)
    }

    /// Reinterprets an already-unified feature map, validating its length.
    pub fn from_feature_map(map: FeatureMap, target_t: usize) -> Result<Self> {
        if map.t != target_t {
            return Err(AfnError::ShapeMismatch(format!(
                "{}: expected {} frames, file has {}",
                map.utt_id, target_t, map.t
            )));
        }
        Ok(UnifiedMap { utt_id: map.utt_id, f: map.f, t: map.t, data: map.data })
    }
}

/// Log power magnitude spectrogram: per frame, Hamming window, FFT,
/// log(|X|^2 + floor). All frames are kept. `fft_size` must be 512 so the
/// spectrum has 257 bins.
pub fn stft_logspec(wave: &Waveform, utt_id: &str, fft_size: usize, win_ms: f64, hop_ms: f64) -> Result<FeatureMap> {
    if wave.sample_rate != SAMPLE_RATE {
        return Err(AfnError::Audio(format!(
            "expected {} Hz input, got {}",
            SAMPLE_RATE, wave.sample_rate
        )));
    }
    if fft_size / 2 + 1 != LOGSPEC_BINS {
        return Err(AfnError::InvalidArgument(format!(
            "fft_size {} does not yield {} bins",
            fft_size, LOGSPEC_BINS
        )));
    }
    let win_len = ((wave.sample_rate as f64) * win_ms / 1000.0).round() as usize;
    let hop = ((wave.sample_rate as f64) * hop_ms / 1000.0).round() as usize;
    if win_len > fft_size {
        return Err(AfnError::InvalidArgument(format!("window {} exceeds fft size {}", win_len, fft_size)));
    }
    if wave.samples.len() < win_len {
        return Err(AfnError::Audio(format!(
            "waveform too short: {} samples < one {}-sample frame",
            wave.samples.len(),
            win_len
        )));
    }
    let num_frames = 1 + (wave.samples.len() - win_len) / hop;

    // symmetric Hamming window
    let window: Vec<f64> = (0..win_len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win_len - 1) as f64).cos())
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];

    let bins = LOGSPEC_BINS;
    let mut data = vec![0.0f32; bins * num_frames];
    for frame in 0..num_frames {
        let start = frame * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = if i < win_len { wave.samples[start + i] as f64 * window[i] } else { 0.0 };
            *c = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (bin, c) in buf.iter().take(bins).enumerate() {
            let power = c.re * c.re + c.im * c.im;
            data[bin * num_frames + frame] = (power + LOG_FLOOR).ln() as f32;
        }
    }
    FeatureMap::new(utt_id, bins, num_frames, data)
}

/// Number of frames in the sliding normalization window: rounded from
/// seconds at the given hop, bumped to odd so the window centers exactly.
pub fn norm_window_frames(window_s: f64, hop_ms: f64) -> usize {
    let mut frames = (window_s * 1000.0 / hop_ms).round() as usize;
    if frames % 2 == 0 {
        frames += 1;
    }
    frames.max(1)
}

/// Subtracts the per-bin mean over a centered window, truncated at the
/// utterance edges. Utterances shorter than the window use the full
/// utterance as the window (global per-bin mean).
pub fn sliding_mean_normalize(map: &FeatureMap, window_s: f64, hop_ms: f64) -> Result<FeatureMap> {
    let wf = norm_window_frames(window_s, hop_ms);
    let (f, t) = (map.f, map.t);
    let mut out = vec![0.0f32; f * t];
    if wf >= t {
        for row in 0..f {
            let base = row * t;
            let mut acc = 0.0f64;
            for col in 0..t {
                acc += map.data[base + col] as f64;
            }
            let mean = acc / t as f64;
            for col in 0..t {
                out[base + col] = (map.data[base + col] as f64 - mean) as f32;
            }
        }
    } else {
        let half = wf / 2;
        for row in 0..f {
            let base = row * t;
            // prefix[i] = sum of the first i values of this row
            let mut prefix = Vec::with_capacity(t + 1);
            prefix.push(0.0f64);
            let mut acc = 0.0f64;
            for col in 0..t {
                acc += map.data[base + col] as f64;
                prefix.push(acc);
            }
            for col in 0..t {
                let lo = col.saturating_sub(half);
                let hi = (col + half).min(t - 1);
                let mean = (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64;
                out[base + col] = (map.data[base + col] as f64 - mean) as f32;
            }
        }
    }
    FeatureMap::new(map.utt_id.clone(), f, t, out)
}

/// Tiles (or truncates) the map to exactly `target_t` frames: output
/// column t equals input column t mod T.
pub fn unify_length(map: &FeatureMap, target_t: usize) -> Result<UnifiedMap> {
    if target_t == 0 {
        return Err(AfnError::InvalidArgument("target_t must be positive".into()));
    }
    let (f, t) = (map.f, map.t);
    let mut data = vec![0.0f32; f * target_t];
    for row in 0..f {
        let src = &map.data[row * t..(row + 1) * t];
        let dst = &mut data[row * target_t..(row + 1) * target_t];
        for (col, v) in dst.iter_mut().enumerate() {
            *v = src[col % t];
        }
    }
    Ok(UnifiedMap { utt_id: map.utt_id.clone(), f, t: target_t, data })
}

/// Full pipeline with the standard parameters: logspec, 3-second sliding
/// mean normalization, unification to `target_t` frames.
pub fn wav_to_unified(path: &Path, utt_id: &str, target_t: usize) -> Result<UnifiedMap> {
    let wave = Waveform::read_wav(path)?;
    let spec = stft_logspec(&wave, utt_id, FFT_SIZE, WIN_MS, HOP_MS)?;
    let normed = sliding_mean_normalize(&spec, NORM_WINDOW_S, HOP_MS)?;
    unify_length(&normed, target_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine_wave(freq: f64, secs: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples: Vec<f32> = (0..n)
            .map(|i| (0.8 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn logspec_has_257_rows() {
        let map = stft_logspec(&sine_wave(440.0, 0.1), "u", FFT_SIZE, WIN_MS, HOP_MS).unwrap();
        assert_eq!(map.f, 257);
        assert!(map.t >= 1);
    }

    #[test]
    fn zero_waveform_hits_log_floor() {
        let wave = Waveform::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        let map = stft_logspec(&wave, "z", FFT_SIZE, WIN_MS, HOP_MS).unwrap();
        let expect = LOG_FLOOR.ln() as f32;
        assert!(map.data.iter().all(|&v| v == expect));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        // 1 kHz at 16 kHz with a 512-point FFT lands on bin 32
        let map = stft_logspec(&sine_wave(1000.0, 0.2), "s", FFT_SIZE, WIN_MS, HOP_MS).unwrap();
        for col in 0..map.t {
            let mut best_bin = 0;
            let mut best = f32::NEG_INFINITY;
            for row in 0..map.f {
                if map.at(row, col) > best {
                    best = map.at(row, col);
                    best_bin = row;
                }
            }
            assert_eq!(best_bin, 32, "frame {}", col);
        }
    }

    #[test]
    fn too_short_and_wrong_rate_rejected() {
        let short = Waveform::new(vec![0.1; 100], SAMPLE_RATE).unwrap();
        assert!(stft_logspec(&short, "x", FFT_SIZE, WIN_MS, HOP_MS).is_err());
        let wrong = Waveform::new(vec![0.1; 8000], 8000).unwrap();
        assert!(stft_logspec(&wrong, "x", FFT_SIZE, WIN_MS, HOP_MS).is_err());
    }

    #[test]
    fn shift_by_one_hop_shifts_frames() {
        let wave = sine_wave(700.0, 0.15);
        let hop = (SAMPLE_RATE as f64 * HOP_MS / 1000.0) as usize;
        let mut shifted_samples = vec![0.0f32; hop];
        shifted_samples.extend_from_slice(&wave.samples);
        let shifted = Waveform::new(shifted_samples, SAMPLE_RATE).unwrap();

        let a = stft_logspec(&wave, "a", FFT_SIZE, WIN_MS, HOP_MS).unwrap();
        let b = stft_logspec(&shifted, "b", FFT_SIZE, WIN_MS, HOP_MS).unwrap();
        assert_eq!(b.t, a.t + 1);
        for row in 0..a.f {
            for col in 0..a.t {
                assert_eq!(a.at(row, col), b.at(row, col + 1), "row {} col {}", row, col);
            }
        }
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        let map = FeatureMap::new("c", 5, 40, vec![3.7; 200]).unwrap();
        let out = sliding_mean_normalize(&map, NORM_WINDOW_S, HOP_MS).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_covering_utterance_subtracts_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = 50; // well below the 301-frame window
        let data: Vec<f32> = (0..3 * t).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let map = FeatureMap::new("g", 3, t, data).unwrap();
        let out = sliding_mean_normalize(&map, NORM_WINDOW_S, HOP_MS).unwrap();
        for row in 0..3 {
            let mean: f64 = (0..t).map(|c| map.at(row, c) as f64).sum::<f64>() / t as f64;
            for col in 0..t {
                let expect = (map.at(row, col) as f64 - mean) as f32;
                assert!((out.at(row, col) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sliding_mean_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (f, t) = (257, 500);
        let data: Vec<f32> = (0..f * t).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let map = FeatureMap::new("r", f, t, data.clone()).unwrap();
        let wf = norm_window_frames(NORM_WINDOW_S, HOP_MS);
        assert_eq!(wf, 301);
        let out = sliding_mean_normalize(&map, NORM_WINDOW_S, HOP_MS).unwrap();
        let wide: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        let expect = oracle::sliding_mean_reference(&wide, f, t, wf);
        for i in 0..f * t {
            assert!((out.data[i] as f64 - expect[i]).abs() < 1e-5, "index {}", i);
        }
    }

    #[test]
    fn unify_identity_and_tiling() {
        let map = FeatureMap::new("u", 2, 4, vec![0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]).unwrap();
        let same = unify_length(&map, 4).unwrap();
        assert_eq!(same.data, map.data);

        let one = FeatureMap::new("o", 3, 1, vec![7.0, 8.0, 9.0]).unwrap();
        let tiled = unify_length(&one, 1091).unwrap();
        assert_eq!(tiled.t, 1091);
        for row in 0..3 {
            assert!(tiled.data[row * 1091..(row + 1) * 1091].iter().all(|&v| v == one.data[row]));
        }
    }

    #[test]
    fn unify_modular_indexing() {
        let t = 400;
        let data: Vec<f32> = (0..t).map(|c| c as f32).collect();
        let map = FeatureMap::new("m", 1, t, data).unwrap();
        let uni = unify_length(&map, 1091).unwrap();
        assert_eq!(uni.data[400], 0.0);
        assert_eq!(uni.data[1090], 290.0);
        // truncation is the same rule
        let cut = unify_length(&map, 100).unwrap();
        assert_eq!(cut.data[99], 99.0);
    }

    #[test]
    fn afnf_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..6 * 9).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let map = FeatureMap::new("utt1", 6, 9, data).unwrap();
        let path = dir.path().join("utt1.afnf");
        map.write_afnf(&path).unwrap();
        let back = FeatureMap::read_afnf(&path).unwrap();
        assert_eq!(back, map);
        let bytes1 = std::fs::read(&path).unwrap();
        back.write_afnf(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn afnf_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.afnf");
        let map = FeatureMap::new("bad", 2, 2, vec![1.0; 4]).unwrap();
        map.write_afnf(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(FeatureMap::read_afnf(&path), Err(AfnError::Format { .. })));

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(FeatureMap::read_afnf(&path), Err(AfnError::Format { .. })));
    }

    #[test]
    fn wav_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let wave = sine_wave(300.0, 0.05);
        let path = dir.path().join("w.wav");
        wave.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back.samples.len(), wave.samples.len());
        for (a, b) in back.samples.iter().zip(&wave.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }

        std::fs::write(&path, b"not a wav").unwrap();
        assert!(matches!(Waveform::read_wav(&path), Err(AfnError::Audio(_))));
    }
}
