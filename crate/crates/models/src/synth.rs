//! Text to waveform: normalization, spectrogram prediction, vocoding and
//! diagnostics export.

use std::path::{Path, PathBuf};

use candle_core::DType;
use comix_core::audiofe::{load_wav, write_matrix, write_wav, AudioClip};
use comix_core::evalkit::TestItem;
use comix_core::textnorm::normalize;
use comix_core::{MelSpectrogram, ToolkitConfig, TransliterationProvider};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{check_audio_compat, Checkpoint, CheckpointMeta};
use crate::error::{io_err, ModelError, Result};
use crate::nn::ForwardCtx;
use crate::recipes::ExtractorSpec;
use crate::speaker::{clip_key, lookup, ClipRef, SpeakerExtractor, SpeakerPolicy, SpeakerQuery};
use crate::spectrogen::{Batch, Example, Tacotron};
use crate::vocab::VocabKind;
use crate::waveglow::Waveglow;

#[derive(Debug, Clone)]
pub enum SpeakerArg {
    Id(String),
    RefAudio(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub sigma: f64,
    pub max_steps: usize,
    pub gate_threshold: f64,
    /// Mixed with each utterance id to seed prenet dropout and vocoder noise.
    pub seed: u64,
}

impl SynthOptions {
    pub fn from_config(cfg: &ToolkitConfig) -> Self {
        Self {
            sigma: cfg.waveglow.sigma_infer,
            max_steps: cfg.decoder.max_steps,
            gate_threshold: cfg.decoder.gate_threshold,
            seed: 0,
        }
    }
}

/// One synthesized utterance and what produced it.
#[derive(Debug, Clone)]
pub struct SynthResult {
    pub id: String,
    pub devanagari: String,
    pub clip: AudioClip,
    /// Decoder output after silence padding to a whole number of vocoder groups.
    pub mel: MelSpectrogram,
    /// Frames the decoder emitted before padding.
    pub decoder_frames: usize,
    /// Latent samples drawn for the vocoder.
    pub latent_count: usize,
    /// `[decoder step][character]`
    pub alignment: Vec<Vec<f32>>,
    pub truncated: bool,
}

pub struct Synthesizer {
    taco: Tacotron,
    taco_meta: CheckpointMeta,
    vocoder: Waveglow,
    provider: TransliterationProvider,
    extractor: Option<Box<dyn SpeakerExtractor>>,
    hop: usize,
    log_floor: f32,
    sample_rate: u32,
}

fn utterance_seed(seed: u64, id: &str, salt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl Synthesizer {
    /// Loads both checkpoints; their audio sections must agree exactly.
    pub fn load(taco: &Path, vocoder: &Path, provider: TransliterationProvider, extractor: Option<ExtractorSpec>) -> Result<Self> {
        let tc = Checkpoint::load(taco)?;
        let vc = Checkpoint::load(vocoder)?;
        check_audio_compat(&tc.meta.config.audio, &vc.meta.config.audio)?;
        let model = tc.tacotron()?;
        if model.spec().n_mels != vc.meta.config.audio.n_mels {
            return Err(ModelError::AudioConfigMismatch(format!(
                "spectrogram model predicts {} mel channels, vocoder expects {}",
                model.spec().n_mels,
                vc.meta.config.audio.n_mels
            )));
        }
        let extractor = match (&tc.meta.speaker, extractor) {
            (Some(m), None) if m.policy == SpeakerPolicy::AudioEmbed => {
                if m.extractor.starts_with("stub") {
                    let seed = m
                        .extractor
                        .split("-seed")
                        .nth(1)
                        .and_then(|s| s.split('-').next())
                        .and_then(|s| s.parse().ok())
                        .unwrap_or(0);
                    Some(ExtractorSpec::Stub { seed }.open(tc.meta.config.speaker.embed_dim)?)
                } else {
                    None
                }
            }
            (_, Some(spec)) => Some(spec.open(tc.meta.config.speaker.embed_dim)?),
            _ => None,
        };
        if let (Some(m), Some(x)) = (&tc.meta.speaker, &extractor) {
            if m.policy == SpeakerPolicy::AudioEmbed && x.version() != m.extractor {
                return Err(ModelError::Speaker(format!(
                    "model was trained with extractor {:?}, got {:?}",
                    m.extractor,
                    x.version()
                )));
            }
        }
        let cfg = &tc.meta.config;
        Ok(Self {
            hop: cfg.audio.hop_length(),
            log_floor: cfg.audio.log_floor(),
            sample_rate: cfg.audio.sample_rate,
            vocoder: vc.waveglow()?,
            taco: model,
            taco_meta: tc.meta,
            provider,
            extractor,
        })
    }

    pub fn config(&self) -> &ToolkitConfig {
        &self.taco_meta.config
    }

    pub fn tacotron(&self) -> &Tacotron {
        &self.taco
    }

    fn speaker_vector(&self, speaker: Option<&SpeakerArg>) -> Result<Option<Vec<f32>>> {
        let meta = self.taco_meta.speaker.as_ref();
        match (meta, speaker) {
            (None, None) => Ok(None),
            (None, Some(_)) => Err(ModelError::Speaker("model is single-speaker".into())),
            (Some(m), None) => Err(ModelError::Speaker(format!(
                "multi-speaker model ({}) needs {}",
                m.policy,
                match m.policy {
                    SpeakerPolicy::AvgEmbed => "a speaker id",
                    SpeakerPolicy::AudioEmbed => "reference audio",
                }
            ))),
            (Some(m), Some(arg)) => {
                let min_clip = self.taco_meta.config.speaker.min_clip_s;
                let extractor: &dyn SpeakerExtractor = match (&self.extractor, m.policy) {
                    (Some(x), _) => x.as_ref(),
                    (None, SpeakerPolicy::AvgEmbed) => &NoExtractor,
                    (None, SpeakerPolicy::AudioEmbed) => {
                        return Err(ModelError::Speaker("audio-embed synthesis needs an extractor".into()))
                    }
                };
                let e = match arg {
                    SpeakerArg::Id(id) => lookup(m.policy, SpeakerQuery::Id(id), m.table.as_ref(), extractor, min_clip)?,
                    SpeakerArg::RefAudio(p) => {
                        let clip = load_wav(p, Some(self.sample_rate))?;
                        let key = clip_key(&clip);
                        let r = ClipRef {
                            key: &key,
                            clip: &clip,
                            path: Some(p),
                        };
                        lookup(m.policy, SpeakerQuery::Audio(r), m.table.as_ref(), extractor, min_clip)?
                    }
                };
                Ok(Some(e.vector))
            }
        }
    }

    /// Characters the spectrogram model sees for `text`.
    pub fn model_text(&self, text: &str) -> Result<String> {
        Ok(match self.taco.vocab().kind() {
            VocabKind::Devanagari => normalize(text, &self.provider)?.devanagari,
            VocabKind::Roman => text.to_string(),
        })
    }

    pub fn synthesize(&self, id: &str, text: &str, speaker: Option<&SpeakerArg>, opts: &SynthOptions) -> Result<SynthResult> {
        let devanagari = self.model_text(text)?;
        if devanagari.trim().is_empty() {
            return Err(ModelError::Synthesis(format!("{text:?} is empty after normalization")));
        }
        let ids = self.taco.vocab().encode(&devanagari)?;
        let spk = self.speaker_vector(speaker)?;
        let n_mels = self.taco.spec().n_mels;
        let batch = Batch::new(
            &[Example {
                ids,
                mel: None,
                speaker: spk,
            }],
            n_mels,
            self.log_floor,
            DType::F32,
        )?;
        let mut ctx = ForwardCtx::eval(utterance_seed(opts.seed, id, "decoder"));
        let out = self.taco.infer(&batch, opts.max_steps, opts.gate_threshold, &mut ctx)?;
        let alignment = out.alignment(0, batch.text_lens[0])?;
        let mut mel = out.mel(0)?;
        let decoder_frames = mel.n_frames;

        // Pad with silence so frames × hop is a whole number of groups.
        let g = self.vocoder.config().group_size;
        let unit = g / gcd(self.hop, g);
        let padded = decoder_frames.div_ceil(unit) * unit;
        mel.frames.resize(padded * n_mels, self.log_floor);
        mel.n_frames = padded;

        let mut vctx = ForwardCtx::eval(utterance_seed(opts.seed, id, "vocoder"));
        let samples = self.vocoder.synthesize(&mel, opts.sigma, &mut vctx)?;
        let latent_count = samples.len();
        let samples: Vec<f32> = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(SynthResult {
            id: id.to_string(),
            devanagari,
            clip: AudioClip::new(samples, self.sample_rate)?,
            mel,
            decoder_frames,
            latent_count,
            alignment,
            truncated: out.truncated[0],
        })
    }
}

struct NoExtractor;

impl SpeakerExtractor for NoExtractor {
    fn version(&self) -> String {
        "none".into()
    }
    fn dim(&self) -> usize {
        0
    }
    fn embed(&self, _: ClipRef<'_>) -> Result<crate::speaker::SpeakerEmbedding> {
        Err(ModelError::Speaker("no extractor configured".into()))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn heatmap(rows: usize, cols: usize, value: impl Fn(usize, usize) -> f32) -> image::GrayImage {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for r in 0..rows {
        for c in 0..cols {
            let v = value(r, c);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    image::GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        // Row 0 at the bottom.
        let v = value(rows - 1 - y as usize, x as usize);
        image::Luma([((v - lo) / span * 255.0).round() as u8])
    })
}

/// Files written for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub id: String,
    pub wav: PathBuf,
    pub samples: usize,
    pub duration_s: f64,
    pub mel_frames: usize,
    pub decoder_frames: usize,
    pub truncated: bool,
}

/// Writes `{id}.wav`, `{id}.mel.png`, `{id}.align.png` and the raw
/// matrices `{id}.mel.bin` (frames × mels) and `{id}.align.bin`
/// (steps × characters).
pub fn write_outputs(r: &SynthResult, dir: &Path) -> Result<ItemReport> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = r.id.replace(['/', '\\'], "_");
    let wav = dir.join(format!("{stem}.wav"));
    write_wav(&wav, &r.clip)?;
    let mel = &r.mel;
    write_matrix(&dir.join(format!("{stem}.mel.bin")), mel.n_frames, mel.n_mels, &mel.frames)?;
    let steps = r.alignment.len();
    let chars = r.alignment.first().map_or(0, Vec::len);
    let flat: Vec<f32> = r.alignment.iter().flatten().copied().collect();
    write_matrix(&dir.join(format!("{stem}.align.bin")), steps, chars, &flat)?;
    let png_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: image::ImageError| ModelError::Synthesis(format!("{}: {e}", p.display()))
    };
    let mel_png = dir.join(format!("{stem}.mel.png"));
    heatmap(mel.n_mels, mel.n_frames, |m, t| mel.get(t, m))
        .save(&mel_png)
        .map_err(png_err(&mel_png))?;
    if steps > 0 && chars > 0 {
        let al_png = dir.join(format!("{stem}.align.png"));
        heatmap(chars, steps, |c, t| r.alignment[t][c])
            .save(&al_png)
            .map_err(png_err(&al_png))?;
    }
    Ok(ItemReport {
        id: r.id.clone(),
        wav,
        samples: r.clip.samples.len(),
        duration_s: r.clip.duration_s(),
        mel_frames: mel.n_frames,
        decoder_frames: r.decoder_frames,
        truncated: r.truncated,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub items: Vec<ItemReport>,
    /// `(id, error)`
    pub failures: Vec<(String, String)>,
}

impl BatchReport {
    pub fn truncated(&self) -> Vec<&str> {
        self.items.iter().filter(|i| i.truncated).map(|i| i.id.as_str()).collect()
    }
}

/// Synthesizes every item into `dir`; a failing item is recorded and the
/// batch continues. Writes `report.json`.
pub fn batch_synthesize(
    synth: &Synthesizer,
    items: &[TestItem],
    speaker: Option<&SpeakerArg>,
    opts: &SynthOptions,
    dir: &Path,
) -> Result<BatchReport> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut report = BatchReport::default();
    for item in items {
        match synth
            .synthesize(&item.id, &item.text, speaker, opts)
            .and_then(|r| write_outputs(&r, dir))
        {
            Ok(r) => report.items.push(r),
            Err(e) => report.failures.push((item.id.clone(), e.to_string())),
        }
    }
    let p = dir.join("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(io_err(&p))?;
    Ok(report)
}
