//! Versioned toolkit configuration.
//!
//! One JSON document with a section per stage. Every architectural constant
//! lives here as a default so nothing downstream hard-codes it; unknown keys
//! are rejected with their full dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Schema version written to and required from every config file.
pub const CONFIG_VERSION: &str = "1";

/// Environment variable consulted when no `--config` flag is given.
pub const CONFIG_ENV: &str = "COMIX_CONFIG";

/// File name used when echoing the effective config into an output directory.
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("config version must be \"{CONFIG_VERSION}\", got {0:?}")]
    Version(Option<String>),
    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Mel front-end parameters. Spectrogen and vocoder must agree on this
/// section bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub eps: f64,
    /// Leading/trailing silence trim threshold in dBFS; `None` disables trimming.
    pub trim_db: Option<f64>,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            frame_ms: 50.0,
            hop_ms: 12.0,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            eps: 1e-5,
            trim_db: None,
        }
    }
}

impl AudioConfig {
    /// Window length in samples. Ties round to even, so 50 ms at 22050 Hz
    /// (1102.5 samples) gives 1102.
    pub fn win_length(&self) -> usize {
        (self.sample_rate as f64 * self.frame_ms / 1000.0).round_ties_even() as usize
    }

    /// Hop length in samples (265 at the defaults).
    pub fn hop_length(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round_ties_even() as usize
    }

    /// FFT size; equal to the window length.
    pub fn n_fft(&self) -> usize {
        self.win_length()
    }

    /// Natural log of the clamp floor, the value every silent bin takes.
    pub fn log_floor(&self) -> f32 {
        (self.eps as f32).ln()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.sample_rate == 0 {
            return invalid("audio.sample_rate", "must be positive");
        }
        if self.hop_length() == 0 || self.win_length() < self.hop_length() {
            return invalid("audio.hop_ms", "hop must be ≥ 1 sample and ≤ the window");
        }
        if self.n_mels == 0 {
            return invalid("audio.n_mels", "must be positive");
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return invalid("audio.fmax", "need 0 ≤ fmin < fmax ≤ sample_rate / 2");
        }
        if !(self.eps > 0.0) {
            return invalid("audio.eps", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub n_conv: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    /// Total Bi-LSTM width; each direction gets half.
    pub bilstm_units: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            n_conv: 3,
            conv_filters: 512,
            conv_kernel: 5,
            bilstm_units: 512,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_lstm: usize,
    pub lstm_units: usize,
    pub prenet: Vec<usize>,
    pub prenet_dropout: f64,
    pub postnet_layers: usize,
    pub postnet_filters: usize,
    pub postnet_kernel: usize,
    pub attn_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub gate_threshold: f64,
    pub max_steps: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_lstm: 2,
            lstm_units: 1024,
            prenet: vec![256, 256],
            prenet_dropout: 0.5,
            postnet_layers: 5,
            postnet_filters: 512,
            postnet_kernel: 5,
            attn_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            gate_threshold: 0.5,
            max_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerConfig {
    /// Dimension of the extractor's embedding (x-vector size).
    pub embed_dim: usize,
    /// Shortest clip the extractor accepts, in seconds.
    pub min_clip_s: f64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            min_clip_s: 1.0,
        }
    }
}

/// Initialization of the invertible 1x1 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inv1x1Init {
    Identity,
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveglowConfig {
    pub n_flows: usize,
    pub group_size: usize,
    pub early_every: usize,
    pub early_size: usize,
    pub wn_layers: usize,
    pub wn_channels: usize,
    pub wn_kernel: usize,
    pub sigma_train: f64,
    pub sigma_infer: f64,
    pub inv1x1_init: Inv1x1Init,
    /// Training segment length in samples; rounded down to a multiple of `group_size`.
    pub segment_length: usize,
}

impl Default for WaveglowConfig {
    fn default() -> Self {
        Self {
            n_flows: 12,
            group_size: 8,
            early_every: 4,
            early_size: 2,
            wn_layers: 8,
            wn_channels: 256,
            wn_kernel: 3,
            sigma_train: 1.0,
            sigma_infer: 0.7,
            inv1x1_init: Inv1x1Init::Identity,
            segment_length: 16000,
        }
    }
}

impl WaveglowConfig {
    /// Small configuration for CI: 2 flows over groups of 4 samples.
    pub fn desk_scale() -> Self {
        Self {
            n_flows: 2,
            group_size: 4,
            early_every: 4,
            early_size: 2,
            wn_layers: 2,
            wn_channels: 16,
            wn_kernel: 3,
            segment_length: 4240,
            ..Self::default()
        }
    }

    /// Channel count entering each flow, accounting for early outputs.
    pub fn flow_channels(&self) -> Vec<usize> {
        let mut remaining = self.group_size;
        (0..self.n_flows)
            .map(|k| {
                if self.early_every > 0 && k > 0 && k % self.early_every == 0 {
                    remaining -= self.early_size;
                }
                remaining
            })
            .collect()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.n_flows == 0 {
            return invalid("waveglow.n_flows", "must be positive");
        }
        if self.group_size < 2 || self.group_size % 2 != 0 {
            return invalid("waveglow.group_size", "must be even and ≥ 2");
        }
        let mut remaining = self.group_size as isize;
        for k in 1..self.n_flows {
            if self.early_every > 0 && k % self.early_every == 0 {
                remaining -= self.early_size as isize;
                if remaining < 2 || remaining % 2 != 0 {
                    return invalid(
                        "waveglow.early_size",
                        "early outputs must leave an even channel count ≥ 2 for every flow",
                    );
                }
            }
        }
        if self.wn_kernel % 2 == 0 {
            return invalid("waveglow.wn_kernel", "must be odd");
        }
        if !(self.sigma_train > 0.0 && self.sigma_infer >= 0.0) {
            return invalid("waveglow.sigma_train", "sigmas must be non-negative, sigma_train > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Batches are filled up to this many target mel frames.
    pub batch_frames: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Stop after this many evaluations without validation improvement.
    pub patience: usize,
    /// Weight of the diagonal-attention penalty; 0 disables it.
    pub guided_attention_weight: f64,
    /// Width of the diagonal band, as a fraction of the sequence lengths.
    pub guided_attention_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 1e-3,
            lr_finetune: 1e-4,
            weight_decay: 1e-6,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            batch_frames: 8000,
            seed: 1234,
            checkpoint_every: 1000,
            eval_every: 100,
            patience: 10,
            guided_attention_weight: 0.0,
            guided_attention_sigma: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub feature_cache: Option<PathBuf>,
    pub embedding_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolkitConfig {
    pub version: String,
    pub audio: AudioConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub speaker: SpeakerConfig,
    pub waveglow: WaveglowConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION.to_string(),
            audio: AudioConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            speaker: SpeakerConfig::default(),
            waveglow: WaveglowConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn invalid<T>(key: &'static str, reason: &str) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid {
        key,
        reason: reason.to_string(),
    })
}

impl ToolkitConfig {
    /// Parses a config document. Blank input yields the defaults; anything
    /// else must carry `"version": "1"`.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Schema {
                path: ".".into(),
                message: e.to_string(),
            })?;
        match value.get("version") {
            Some(serde_json::Value::String(v)) if v == CONFIG_VERSION => {}
            Some(serde_json::Value::String(v)) => return Err(ConfigError::Version(Some(v.clone()))),
            Some(other) => return Err(ConfigError::Version(Some(other.to_string()))),
            None => return Err(ConfigError::Version(None)),
        }
        let cfg: ToolkitConfig =
            serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.audio.validate()?;
        if self.decoder.n_lstm != 2 {
            return invalid("decoder.n_lstm", "the decoder has exactly two LSTM layers");
        }
        if self.decoder.prenet.is_empty() {
            return invalid("decoder.prenet", "needs at least one layer");
        }
        if self.decoder.postnet_layers < 2 {
            return invalid("decoder.postnet_layers", "needs at least two layers");
        }
        if self.encoder.bilstm_units % 2 != 0 {
            return invalid("encoder.bilstm_units", "must be even (split across two directions)");
        }
        if self.encoder.conv_kernel % 2 == 0
            || self.decoder.postnet_kernel % 2 == 0
            || self.decoder.location_kernel % 2 == 0
        {
            return invalid("encoder.conv_kernel", "convolution kernels must be odd");
        }
        if !(self.train.guided_attention_weight >= 0.0 && self.train.guided_attention_sigma > 0.0) {
            return invalid("train.guided_attention_weight", "weight must be ≥ 0 and sigma > 0");
        }
        if self.speaker.min_clip_s < 0.0 {
            return invalid("speaker.min_clip_s", "must be ≥ 0");
        }
        self.waveglow.validate()
    }

    /// Writes the effective config as `effective_config.json` inside `dir`.
    pub fn echo_to(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.to_json_string())?;
        Ok(path)
    }
}

/// Loads a config file.
pub fn load_config(path: &Path) -> Result<ToolkitConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ToolkitConfig::from_json_str(&text)
}

/// Resolves the config: explicit path, else `$COMIX_CONFIG`, else defaults.
pub fn resolve_config(explicit: Option<&Path>) -> Result<ToolkitConfig, ConfigError> {
    if let Some(p) = explicit {
        return load_config(p);
    }
    match std::env::var_os(CONFIG_ENV) {
        Some(p) if !p.is_empty() => load_config(Path::new(&p)),
        _ => Ok(ToolkitConfig::default()),
    }
}

pub fn save_config(cfg: &ToolkitConfig, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, cfg.to_json_string())
}
