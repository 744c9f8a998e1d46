//! Audio I/O and the log-mel front end.
//!
//! The same [`MelFrontEnd`] produces spectrogen training targets and vocoder
//! conditioning, so every parameter comes from [`AudioConfig`]. Frames are
//! centered: the signal is reflect-padded by `n_fft / 2` on both sides and
//! a clip of `n` samples yields `1 + n / hop` frames.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::config::AudioConfig;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid WAV file {path}: {message}")]
    Wav { path: String, message: String },
    #[error("unsupported sample format in {path}: {bits}-bit {format}")]
    UnsupportedFormat {
        path: String,
        bits: u16,
        format: &'static str,
    },
    #[error("too short: {samples} samples, need at least one hop ({hop})")]
    TooShort { samples: usize, hop: usize },
    #[error("sample rate {got} Hz does not match configured {expected} Hz")]
    RateMismatch { got: u32, expected: u32 },
    #[error("empty audio clip")]
    Empty,
    #[error("feature cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// Original rate when the file was resampled on load.
    pub resampled_from: Option<u32>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            samples,
            sample_rate,
            resampled_from: None,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-mel frames, row-major `[n_frames × n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn from_rows(frames: Vec<f32>, n_mels: usize) -> Self {
        assert!(n_mels > 0 && frames.len() % n_mels == 0);
        Self {
            n_frames: frames.len() / n_mels,
            frames,
            n_mels,
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f32 {
        self.frames[t * self.n_mels + m]
    }
}

fn wav_err(path: &Path, e: impl std::fmt::Display) -> AudioError {
    AudioError::Wav {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads a PCM WAV file as mono. Channels are averaged; integer samples are
/// divided by `2^(bits-1)`. When `target_rate` differs from the file's rate
/// the clip is linearly resampled and the original rate recorded.
pub fn load_wav(path: &Path, target_rate: Option<u32>) -> Result<AudioClip, AudioError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.display().to_string(),
            source,
        },
        other => wav_err(path, other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedFormat {
                path: path.display().to_string(),
                bits,
                format: match fmt {
                    hound::SampleFormat::Int => "int",
                    hound::SampleFormat::Float => "float",
                },
            })
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let mut clip = AudioClip::new(mono, spec.sample_rate)?;
    if let Some(rate) = target_rate {
        if rate != spec.sample_rate {
            clip = resample_linear(&clip, rate);
        }
    }
    Ok(clip)
}

/// Number of samples in a WAV file's data chunk and its rate, from the header only.
pub fn wav_header(path: &Path) -> Result<(u64, u32), AudioError> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    Ok((reader.duration() as u64, reader.spec().sample_rate))
}

/// Linear-interpolation resampler.
pub fn resample_linear(clip: &AudioClip, rate: u32) -> AudioClip {
    let ratio = clip.sample_rate as f64 / rate as f64;
    let n_out = ((clip.samples.len() as f64) / ratio).round().max(1.0) as usize;
    let last = clip.samples.len() - 1;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64) as f32;
            clip.samples[i0] * (1.0 - frac) + clip.samples[i1] * frac
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: rate,
        resampled_from: Some(clip.sample_rate),
    }
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

/// Drops leading and trailing hop-sized blocks whose RMS is below `threshold_db` dBFS.
pub fn trim_silence(clip: &AudioClip, threshold_db: f64, hop: usize) -> AudioClip {
    let thresh = 10f64.powf(threshold_db / 20.0);
    let loud = |block: &[f32]| {
        let rms = (block.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / block.len() as f64).sqrt();
        rms >= thresh
    };
    let blocks: Vec<&[f32]> = clip.samples.chunks(hop.max(1)).collect();
    let Some(first) = blocks.iter().position(|b| loud(b)) else {
        return clip.clone();
    };
    let last = blocks.iter().rposition(|b| loud(b)).expect("first exists");
    let start = first * hop;
    let end = ((last + 1) * hop).min(clip.samples.len());
    AudioClip {
        samples: clip.samples[start..end].to_vec(),
        sample_rate: clip.sample_rate,
        resampled_from: clip.resampled_from,
    }
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

/// Slaney-scale triangular filters with area normalization, `[n_mels × (n_fft/2 + 1)]`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let (mmin, mmax) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let mel_f: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mmin + (mmax - mmin) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|i| {
            let (lo, mid, hi) = (mel_f[i], mel_f[i + 1], mel_f[i + 2]);
            let enorm = 2.0 / (hi - lo);
            fft_freqs
                .iter()
                .map(|&f| {
                    let lower = (f - lo) / (mid - lo);
                    let upper = (hi - f) / (hi - mid);
                    lower.min(upper).max(0.0) * enorm
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into a signal of length `n` under repeated reflection (no edge repeat).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Frame count for a centered STFT of `n_samples`.
pub fn frame_count(n_samples: usize, hop: usize) -> usize {
    1 + n_samples / hop
}

/// Precomputed window, FFT plan and filterbank.
pub struct MelFrontEnd {
    config: AudioConfig,
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontEnd")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .field("n_mels", &self.config.n_mels)
            .finish()
    }
}

impl MelFrontEnd {
    pub fn new(config: &AudioConfig) -> Self {
        let n_fft = config.n_fft();
        let dense = mel_filterbank(config.sample_rate, n_fft, config.n_mels, config.fmin, config.fmax);
        // Sparse rows: most filter weights are zero.
        let filters = dense
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .enumerate()
                    .filter(|(_, w)| *w != 0.0)
                    .collect()
            })
            .collect();
        Self {
            config: config.clone(),
            n_fft,
            hop: config.hop_length(),
            window: hann_window(n_fft),
            filters,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        }
    }

    pub fn config(&self) -> &AudioConfig {
        &self.config
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    fn check(&self, clip: &AudioClip) -> Result<(), AudioError> {
        if clip.sample_rate != self.config.sample_rate {
            return Err(AudioError::RateMismatch {
                got: clip.sample_rate,
                expected: self.config.sample_rate,
            });
        }
        if clip.samples.len() < self.hop {
            return Err(AudioError::TooShort {
                samples: clip.samples.len(),
                hop: self.hop,
            });
        }
        Ok(())
    }

    /// Magnitude STFT, `[n_frames][n_fft/2 + 1]`.
    pub fn magnitude_stft(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>, AudioError> {
        self.check(clip)?;
        let n = clip.samples.len();
        let pad = (self.n_fft / 2) as isize;
        let n_frames = frame_count(n, self.hop);
        let n_bins = self.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let start = (t * self.hop) as isize - pad;
            for (k, slot) in buf.iter_mut().enumerate() {
                let s = clip.samples[reflect_index(start + k as isize, n)] as f64;
                *slot = Complex::new(s * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.push(buf[..n_bins].iter().map(|c| c.norm()).collect());
        }
        Ok(out)
    }

    /// Mel energies before clamping and log, `[n_frames][n_mels]`.
    pub fn mel_linear(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>, AudioError> {
        Ok(self
            .magnitude_stft(clip)?
            .iter()
            .map(|mag| {
                self.filters
                    .iter()
                    .map(|row| row.iter().map(|&(k, w)| w * mag[k]).sum())
                    .collect()
            })
            .collect())
    }

    /// Log-mel spectrogram: `ln(max(mel, eps))`.
    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram, AudioError> {
        let eps = self.config.eps;
        let frames = self
            .mel_linear(clip)?
            .into_iter()
            .flat_map(|row| row.into_iter().map(move |v| v.max(eps).ln() as f32))
            .collect();
        Ok(MelSpectrogram::from_rows(frames, self.config.n_mels))
    }
}

/// One-shot convenience wrapper around [`MelFrontEnd`].
pub fn mel_spectrogram(clip: &AudioClip, config: &AudioConfig) -> Result<MelSpectrogram, AudioError> {
    MelFrontEnd::new(config).compute(clip)
}

/// Writes a real-32 matrix with an 8-byte header (rows, cols as u32 LE), row-major.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<(), AudioError> {
    assert_eq!(rows * cols, data.len());
    let io = |source| AudioError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    f.write_all(&(rows as u32).to_le_bytes()).map_err(io)?;
    f.write_all(&(cols as u32).to_le_bytes()).map_err(io)?;
    for v in data {
        f.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>), AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| AudioError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let cache_err = |message: &str| AudioError::Cache {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    if bytes.len() < 8 {
        return Err(cache_err("missing shape header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        return Err(cache_err("payload size does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<(), AudioError> {
    write_matrix(path, mel.n_frames, mel.n_mels, &mel.frames)
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram, AudioError> {
    let (rows, cols, data) = read_matrix(path)?;
    if rows == 0 || cols == 0 {
        return Err(AudioError::Cache {
            path: path.display().to_string(),
            message: "empty matrix".into(),
        });
    }
    Ok(MelSpectrogram::from_rows(data, cols))
}
