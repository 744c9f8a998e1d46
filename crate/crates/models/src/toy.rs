//! Synthetic speech for desk-scale runs: each character is a fixed-length
//! chord with character-specific frequencies, so text-to-frame alignment is
//! exactly diagonal and learnable in minutes on a CPU.

use std::path::Path;

use comix_core::audiofe::{write_wav, AudioClip};
use comix_core::config::{DecoderConfig, EncoderConfig, ToolkitConfig, WaveglowConfig};
use comix_core::corpus::{CorpusManifest, Lang, Split, UtteranceRecord};
use rand::RngCore;

use crate::error::{io_err, Result};

pub const DEVANAGARI_ALPHABET: [char; 6] = ['क', 'म', 'ल', 'न', 'स', 'त'];
pub const ROMAN_ALPHABET: [char; 6] = ['k', 'm', 'l', 'n', 's', 't'];

/// Samples per character, in hops.
pub const HOPS_PER_CHAR: usize = 2;

/// The default config with model widths shrunk for CPU training.
pub fn toy_config() -> ToolkitConfig {
    let mut cfg = ToolkitConfig::default();
    cfg.encoder = EncoderConfig {
        embed_dim: 32,
        n_conv: 3,
        conv_filters: 32,
        conv_kernel: 5,
        bilstm_units: 32,
        dropout: 0.5,
    };
    cfg.decoder = DecoderConfig {
        n_lstm: 2,
        lstm_units: 64,
        prenet: vec![32, 32],
        prenet_dropout: 0.5,
        postnet_layers: 5,
        postnet_filters: 32,
        postnet_kernel: 5,
        attn_dim: 32,
        location_filters: 8,
        location_kernel: 15,
        gate_threshold: 0.5,
        max_steps: 200,
    };
    cfg.speaker.embed_dim = 16;
    cfg.waveglow = WaveglowConfig::desk_scale();
    cfg.train.batch_frames = 400;
    cfg.train.checkpoint_every = 100;
    cfg.train.eval_every = 50;
    cfg.train.guided_attention_weight = 5.0;
    cfg.speaker.min_clip_s = 0.0;
    cfg
}

/// Random strings of `MIN_CHARS..=MAX_CHARS` characters from `alphabet`.
pub fn sentences(alphabet: &[char], n: usize, seed: u64) -> Vec<String> {
    sentences_with(alphabet, n, seed, MIN_CHARS, MAX_CHARS)
}

pub const MIN_CHARS: usize = 3;
pub const MAX_CHARS: usize = 7;

pub fn sentences_with(alphabet: &[char], n: usize, seed: u64, min: usize, max: usize) -> Vec<String> {
    let mut rng = comix_core::rng::seeded(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = min + (rng.next_u64() % (max - min + 1) as u64) as usize;
        let s: String = (0..len)
            .map(|_| alphabet[(rng.next_u64() % alphabet.len() as u64) as usize])
            .collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Renders `text` as a sequence of chords. `speaker` shifts every pitch.
pub fn render(text: &str, alphabet: &[char], speaker: usize, cfg: &ToolkitConfig) -> AudioClip {
    render_with(text, alphabet, speaker, HOPS_PER_CHAR, cfg)
}

pub fn render_with(text: &str, alphabet: &[char], speaker: usize, hops: usize, cfg: &ToolkitConfig) -> AudioClip {
    let sr = cfg.audio.sample_rate as f64;
    let seg = hops * cfg.audio.hop_length();
    let ramp = (0.005 * sr) as usize;
    let shift = 1.0 + 0.12 * speaker as f64;
    let mut samples = Vec::with_capacity(seg * text.chars().count());
    for c in text.chars() {
        let k = alphabet.iter().position(|&a| a == c).unwrap_or(0) as f64;
        let f1 = (300.0 + 220.0 * k) * shift;
        let f2 = (1500.0 + 610.0 * k) * shift;
        for n in 0..seg {
            let t = n as f64 / sr;
            let env = (n.min(seg - 1 - n) as f64 / ramp as f64).min(1.0);
            let v = 0.35 * (2.0 * std::f64::consts::PI * f1 * t).sin() + 0.15 * (2.0 * std::f64::consts::PI * f2 * t).sin();
            samples.push((env * v) as f32);
        }
    }
    AudioClip::new(samples, cfg.audio.sample_rate).expect("synthetic samples are in range")
}

/// Writes one WAV per sentence and returns the manifest. Ids are
/// `{prefix}{speaker}_{index}`; Roman alphabets produce English records.
pub fn write_corpus(
    dir: &Path,
    prefix: &str,
    alphabet: &[char],
    speakers: usize,
    per_speaker: usize,
    seed: u64,
    cfg: &ToolkitConfig,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let roman = alphabet.iter().all(|c| c.is_ascii_alphabetic());
    let texts = sentences(alphabet, per_speaker, seed);
    let mut records = Vec::new();
    for s in 0..speakers {
        for (i, text) in texts.iter().enumerate() {
            let id = format!("{prefix}{s}_{i:03}");
            let clip = render(text, alphabet, s, cfg);
            let file = format!("{id}.wav");
            write_wav(&dir.join(&file), &clip)?;
            records.push(UtteranceRecord {
                id,
                audio_path: file,
                text: text.clone(),
                source_lang: if roman { Lang::En } else { Lang::Hi },
                speaker_id: format!("{prefix}spk{s}"),
                duration_s: clip.duration_s(),
                split: Split::Train,
            });
        }
    }
    let from = vec![format!("toy:{prefix}")];
    Ok(if roman {
        CorpusManifest::new_roman(records, cfg.audio.sample_rate, from)?
    } else {
        CorpusManifest::new(records, cfg.audio.sample_rate, from)?
    })
}
