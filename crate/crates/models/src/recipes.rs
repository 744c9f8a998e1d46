//! Training recipes: pre-training stages, fine-tuning with frozen
//! prefixes, checkpoint surgery and the experiment matrix.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use comix_core::audiofe::{load_wav, mel_spectrogram, read_mel, write_mel, AudioClip};
use comix_core::corpus::{load_manifest, load_roman_manifest, resolve_path, CorpusManifest, Split, UtteranceRecord};
use comix_core::{MelSpectrogram, ToolkitConfig};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, check_audio_compat, Checkpoint, CheckpointMeta, ProvenanceEntry, SpeakerMeta};
use crate::error::{io_err, ModelError, Result};
use crate::nn::{hex, matches_any, ForwardCtx, ParamStore};
use crate::speaker::{
    build_table, EmbeddingCache, EmbeddingTable, ExternalExtractor, RecordEmbedder, SpeakerExtractor, SpeakerPolicy,
    StubExtractor,
};
use crate::spectrogen::{guided_attention_loss, Batch, Example, Tacotron, TacotronSpec};
use crate::train::{OptimizerSpec, Trainer};
use crate::vocab::VocabKind;
use crate::waveglow::{nll_loss, Waveglow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    /// Roman-script English data, from scratch.
    EngPretrain,
    /// All Devanagari data pooled across speakers, single-speaker topology.
    MixPretrain,
    /// Target data starting from a pre-trained checkpoint.
    Finetune,
}

impl Stage {
    pub fn vocab(self) -> VocabKind {
        match self {
            Stage::EngPretrain => VocabKind::Roman,
            _ => VocabKind::Devanagari,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExtractorSpec {
    Stub { seed: u64 },
    External { command: String },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Stub { seed: 0 }
    }
}

impl ExtractorSpec {
    pub fn open(&self, dim: usize) -> Result<Box<dyn SpeakerExtractor>> {
        Ok(match self {
            ExtractorSpec::Stub { seed } => Box::new(StubExtractor { seed: *seed, dim }),
            ExtractorSpec::External { command } => Box::new(ExternalExtractor::new(command, dim)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSpec {
    pub name: String,
    pub stage: Stage,
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    /// Parameter-name prefixes that receive no updates.
    #[serde(default)]
    pub freeze: Vec<String>,
    /// Parameter-name prefixes re-initialized instead of copied from `init_from`.
    #[serde(default)]
    pub drop_on_load: Vec<String>,
    pub manifest: PathBuf,
    /// Base for relative audio paths; defaults to the manifest's directory.
    #[serde(default)]
    pub audio_root: Option<PathBuf>,
    /// `None` trains the single-speaker topology.
    #[serde(default)]
    pub speaker_policy: Option<SpeakerPolicy>,
    #[serde(default)]
    pub extractor: ExtractorSpec,
    /// Precomputed table for AVG_EMBED; built from the manifest when absent.
    #[serde(default)]
    pub speaker_table: Option<PathBuf>,
    pub optimizer: OptimizerSpec,
    pub max_steps: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RecipeSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Finetune && self.init_from.is_none() {
            return Err(ModelError::Recipe(format!("{}: FINETUNE requires init_from", self.name)));
        }
        if self.stage == Stage::EngPretrain && self.speaker_policy.is_some() {
            return Err(ModelError::Recipe(format!(
                "{}: English pre-training uses the single-speaker topology",
                self.name
            )));
        }
        if self.init_from.is_none() && !self.drop_on_load.is_empty() {
            return Err(ModelError::Recipe(format!("{}: drop_on_load without init_from", self.name)));
        }
        if self.speaker_table.is_some() && self.speaker_policy != Some(SpeakerPolicy::AvgEmbed) {
            return Err(ModelError::Recipe(format!("{}: speaker_table only applies to AVG_EMBED", self.name)));
        }
        Ok(())
    }

    fn root(&self) -> PathBuf {
        self.audio_root
            .clone()
            .or_else(|| self.manifest.parent().map(Path::to_path_buf))
            .unwrap_or_default()
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join(FINAL_CHECKPOINT)
    }
}

pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub copied: Vec<String>,
    /// Checkpoint entries discarded by `drop_on_load`.
    pub dropped: Vec<String>,
    /// Target parameters left at their fresh initialization.
    pub fresh: Vec<String>,
    /// Checkpoint entries with no counterpart in the target.
    pub unused: Vec<String>,
}

/// Copies matching parameters from `ck` into `store`. Names under
/// `drop_on_load` and names absent from the checkpoint keep their fresh
/// values; any other shape disagreement is an error.
pub fn surgery_load(ck: &Checkpoint, store: &ParamStore, drop_on_load: &[String]) -> Result<SurgeryReport> {
    for p in drop_on_load {
        if !ck.tensors.keys().any(|k| k.starts_with(p.as_str())) {
            return Err(ModelError::UnmatchedPrefix {
                field: "drop_on_load",
                prefix: p.clone(),
            });
        }
    }
    let mut report = SurgeryReport::default();
    for name in store.names() {
        if matches_any(name, drop_on_load) {
            report.fresh.push(name.to_string());
            continue;
        }
        let Some((shape, _)) = ck.tensors.get(name) else {
            report.fresh.push(name.to_string());
            continue;
        };
        let want = store.shape(name).expect("listed name");
        if *shape != want {
            return Err(ModelError::SurgeryShape {
                name: name.to_string(),
                found: shape.clone(),
                expected: want,
            });
        }
        store.assign(name, &ck.tensor(name)?)?;
        report.copied.push(name.to_string());
    }
    for name in ck.tensors.keys() {
        if matches_any(name, drop_on_load) {
            report.dropped.push(name.clone());
        } else if !store.contains(name) {
            report.unused.push(name.clone());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mel_pre: f64,
    pub mel_post: f64,
    pub stop: f64,
    pub guided: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub recipe: String,
    pub steps: Vec<StepLog>,
    /// `(step, mean validation loss)`.
    pub validation: Vec<(usize, f64)>,
    pub wall_clock_s: f64,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub frozen_digest_before: Option<String>,
    pub frozen_digest_after: Option<String>,
    pub surgery: Option<SurgeryReport>,
    pub stopped_early: bool,
}

/// Log-mel features for one record, via the on-disk cache when configured.
pub fn record_mel(r: &UtteranceRecord, root: &Path, cfg: &ToolkitConfig) -> Result<MelSpectrogram> {
    let cache = cfg.paths.feature_cache.as_ref().map(|dir| {
        let key = hex(&Sha256::digest(serde_json::to_string(&cfg.audio).expect("audio config serializes")));
        dir.join(&key[..16]).join(format!("{}.mel", r.id.replace(['/', '\\'], "_")))
    });
    if let Some(p) = cache.as_ref().filter(|p| p.exists()) {
        if let Ok(m) = read_mel(p) {
            return Ok(m);
        }
    }
    let clip = load_wav(&resolve_path(root, &r.audio_path), Some(cfg.audio.sample_rate))?;
    let mel = mel_spectrogram(&clip, &cfg.audio)?;
    if let Some(p) = cache {
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
        }
        write_mel(&p, &mel)?;
    }
    Ok(mel)
}

fn load_recipe_manifest(spec: &RecipeSpec, cfg: &ToolkitConfig) -> Result<CorpusManifest> {
    let m = match spec.stage {
        Stage::EngPretrain => load_roman_manifest(&spec.manifest, cfg.audio.sample_rate)?,
        _ => load_manifest(&spec.manifest, cfg.audio.sample_rate)?,
    };
    if m.records.is_empty() {
        return Err(ModelError::Recipe(format!("{}: manifest has no records", spec.name)));
    }
    Ok(m)
}

/// Groups `order` into batches of at most `max_frames` target frames
/// (always at least one item).
fn frame_batches(order: &[usize], frames: &[usize], max_frames: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut longest = 0;
    for &i in order {
        let l = longest.max(frames[i]);
        if !cur.is_empty() && l * (cur.len() + 1) > max_frames {
            out.push(std::mem::take(&mut cur));
            longest = frames[i];
        } else {
            longest = l;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64
}

/// Runs one recipe to completion and writes checkpoints plus `report.json`
/// into `spec.out_dir`.
pub fn run_recipe(spec: &RecipeSpec, cfg: &ToolkitConfig) -> Result<TrainReport> {
    spec.validate()?;
    cfg.validate()?;
    let started = Instant::now();
    let manifest = load_recipe_manifest(spec, cfg)?;
    let root = spec.root();

    let model_spec = TacotronSpec::from_config(cfg, spec.stage.vocab(), spec.speaker_policy.is_some());
    let model = Tacotron::new(model_spec, DType::F32, spec.seed)?;

    let mut provenance = Vec::new();
    let mut init_digest = None;
    let surgery = match &spec.init_from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.expect_kind(checkpoint::ModelKind::Tacotron)?;
            check_audio_compat(&ck.meta.config.audio, &cfg.audio)?;
            provenance = ck.meta.provenance.clone();
            init_digest = Some(ck.digest.clone());
            Some(surgery_load(&ck, model.store(), &spec.drop_on_load)?)
        }
        None => None,
    };
    for p in &spec.freeze {
        if !model.store().names().any(|n| n.starts_with(p.as_str())) {
            return Err(ModelError::UnmatchedPrefix {
                field: "freeze",
                prefix: p.clone(),
            });
        }
    }
    provenance.push(ProvenanceEntry {
        recipe: spec.name.clone(),
        stage: serde_json::to_value(spec.stage)?.as_str().unwrap_or_default().to_string(),
        init_from: spec.init_from.as_ref().map(|p| p.display().to_string()),
        init_digest,
        manifest: Some(spec.manifest.display().to_string()),
        seed: spec.seed,
        steps: 0,
    });

    // Speaker conditioning.
    let mut speaker_meta = None;
    let mut speaker_vecs: Vec<Option<Vec<f32>>> = vec![None; manifest.records.len()];
    if let Some(policy) = spec.speaker_policy {
        let extractor = spec.extractor.open(cfg.speaker.embed_dim)?;
        let embedder = RecordEmbedder {
            root: &root,
            sample_rate: cfg.audio.sample_rate,
            extractor: extractor.as_ref(),
            cache: cfg
                .paths
                .embedding_cache
                .as_ref()
                .map(|d| EmbeddingCache::new(d, &extractor.version())),
            min_clip_s: cfg.speaker.min_clip_s,
        };
        let table = match policy {
            SpeakerPolicy::AvgEmbed => {
                let t = match &spec.speaker_table {
                    Some(p) => EmbeddingTable::load(p)?,
                    None => build_table(&manifest, &embedder)?.0,
                };
                for (slot, r) in speaker_vecs.iter_mut().zip(&manifest.records) {
                    *slot = Some(t.get(&r.speaker_id)?.vector);
                }
                Some(t)
            }
            SpeakerPolicy::AudioEmbed => {
                for (slot, r) in speaker_vecs.iter_mut().zip(&manifest.records) {
                    *slot = Some(embedder.embed(r)?.vector);
                }
                None
            }
        };
        speaker_meta = Some(SpeakerMeta {
            policy,
            extractor: extractor.version(),
            table,
        });
    }

    let mut examples = Vec::with_capacity(manifest.records.len());
    for (r, spk) in manifest.records.iter().zip(speaker_vecs) {
        examples.push(Example {
            ids: model.vocab().encode(&r.text)?,
            mel: Some(record_mel(r, &root, cfg)?),
            speaker: spk,
        });
    }
    let train_idx: Vec<usize> = (0..examples.len())
        .filter(|&i| manifest.records[i].split == Split::Train)
        .collect();
    let val_idx: Vec<usize> = (0..examples.len())
        .filter(|&i| manifest.records[i].split == Split::Val)
        .collect();
    if train_idx.is_empty() {
        return Err(ModelError::Recipe(format!("{}: no TRAIN records", spec.name)));
    }
    let frames: Vec<usize> = examples.iter().map(|e| e.mel.as_ref().expect("loaded").n_frames).collect();

    std::fs::create_dir_all(&spec.out_dir).map_err(io_err(&spec.out_dir))?;
    cfg.echo_to(&spec.out_dir).map_err(io_err(&spec.out_dir))?;
    let mut meta = CheckpointMeta::tacotron(cfg, model.spec());
    meta.speaker = speaker_meta;
    meta.provenance = provenance;

    let frozen_before = if spec.freeze.is_empty() {
        None
    } else {
        Some(model.store().digest(&spec.freeze)?)
    };
    let mut trainer = Trainer::new(model.store(), &spec.freeze, &spec.optimizer)?;
    let floor = cfg.audio.log_floor();
    let n_mels = cfg.audio.n_mels;
    let mut rng = comix_core::rng::seeded(spec.seed);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut steps = Vec::with_capacity(spec.max_steps);
    let mut validation = Vec::new();
    let mut checkpoints = Vec::new();
    let (mut best, mut since_best, mut stopped_early) = (f64::INFINITY, 0usize, false);
    let save_at = |step: usize, meta: &mut CheckpointMeta, path: &Path| -> Result<()> {
        meta.step = step;
        meta.provenance.last_mut().expect("own entry").steps = step;
        checkpoint::save(path, model.store(), meta)?;
        Ok(())
    };

    let mut step = 0;
    while step < spec.max_steps {
        if queue.is_empty() {
            let mut order = train_idx.clone();
            comix_core::rng::shuffle(&mut order, &mut rng);
            queue = frame_batches(&order, &frames, cfg.train.batch_frames);
            queue.reverse();
        }
        let idx = queue.pop().expect("refilled");
        let items: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
        let batch = Batch::new(&items, n_mels, floor, DType::F32)?;
        let mut ctx = ForwardCtx::train(step_seed(spec.seed, step)).with_frozen(spec.freeze.clone());
        let (out, terms) = model.forward_loss(&batch, &mut ctx)?;
        let [mel_pre, mel_post, stop, _] = terms.values()?;
        let mut total = terms.total.clone();
        let mut guided = 0.0;
        if cfg.train.guided_attention_weight > 0.0 {
            let g = guided_attention_loss(&out, &batch.text_lens, cfg.train.guided_attention_sigma)?;
            guided = g.to_scalar::<f32>()? as f64;
            total = total.add(&(g * cfg.train.guided_attention_weight)?)?;
        }
        let total_v = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grad_norm = trainer.step(&total)?;
        steps.push(StepLog {
            step,
            mel_pre,
            mel_post,
            stop,
            guided,
            total: total_v,
            grad_norm,
        });
        step += 1;

        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 && step < spec.max_steps {
            let p = spec.out_dir.join(format!("step_{step:06}.safetensors"));
            save_at(step, &mut meta, &p)?;
            checkpoints.push(p);
        }
        if !val_idx.is_empty() && cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0 {
            let v = validation_loss(&model, &examples, &val_idx, cfg)?;
            validation.push((step, v));
            if v < best {
                best = v;
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.train.patience > 0 && since_best >= cfg.train.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let final_path = spec.final_checkpoint();
    save_at(step, &mut meta, &final_path)?;
    checkpoints.push(final_path.clone());
    let frozen_after = if spec.freeze.is_empty() {
        None
    } else {
        Some(model.store().digest(&spec.freeze)?)
    };
    if frozen_before != frozen_after {
        return Err(ModelError::Recipe(format!("{}: frozen parameters changed during training", spec.name)));
    }
    let report = TrainReport {
        recipe: spec.name.clone(),
        steps,
        validation,
        wall_clock_s: started.elapsed().as_secs_f64(),
        checkpoints,
        final_checkpoint: final_path,
        frozen_digest_before: frozen_before,
        frozen_digest_after: frozen_after,
        surgery,
        stopped_early,
    };
    let rp = spec.out_dir.join(REPORT_FILE);
    std::fs::write(&rp, serde_json::to_string_pretty(&report)?).map_err(io_err(&rp))?;
    Ok(report)
}

fn validation_loss(model: &Tacotron, examples: &[Example], idx: &[usize], cfg: &ToolkitConfig) -> Result<f64> {
    let frames: Vec<usize> = examples.iter().map(|e| e.mel.as_ref().map_or(0, |m| m.n_frames)).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for group in frame_batches(idx, &frames, cfg.train.batch_frames) {
        let items: Vec<Example> = group.iter().map(|&i| examples[i].clone()).collect();
        let batch = Batch::new(&items, cfg.audio.n_mels, cfg.audio.log_floor(), DType::F32)?;
        let (_, terms) = model.forward_loss(&batch, &mut ForwardCtx::eval(0))?;
        sum += terms.values()?[3] * group.len() as f64;
        n += group.len();
    }
    Ok(sum / n as f64)
}

/// Manifests the experiment matrix draws on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixManifests {
    /// Roman-script English corpus for English pre-training.
    pub english: PathBuf,
    /// Every speaker's Devanagari data (Hindi plus transliterated English).
    pub pooled: PathBuf,
    /// The primary speaker, Hindi plus English.
    pub primary: PathBuf,
    /// The primary speaker's Hindi-language records only.
    pub primary_hindi: PathBuf,
    /// Duration-targeted subset of the primary speaker (3 h).
    pub primary_3h: PathBuf,
}

impl MatrixManifests {
    fn check(&self) -> Result<()> {
        for (field, p) in [
            ("english", &self.english),
            ("pooled", &self.pooled),
            ("primary", &self.primary),
            ("primary_hindi", &self.primary_hindi),
            ("primary_3h", &self.primary_3h),
        ] {
            if !p.is_file() {
                return Err(ModelError::Recipe(format!("manifest `{field}` not found: {}", p.display())));
            }
        }
        Ok(())
    }
}

pub const ENG_PRETRAIN_NAME: &str = "eng-pretrain";
pub const MIX_PRETRAIN_NAME: &str = "mix-pretrain";

fn base(name: &str, stage: Stage, manifest: &Path, out: &Path, cfg: &ToolkitConfig) -> RecipeSpec {
    RecipeSpec {
        name: name.to_string(),
        stage,
        init_from: None,
        freeze: Vec::new(),
        drop_on_load: Vec::new(),
        manifest: manifest.to_path_buf(),
        audio_root: None,
        speaker_policy: None,
        extractor: ExtractorSpec::default(),
        speaker_table: None,
        optimizer: OptimizerSpec::from_train_config(&cfg.train, stage == Stage::Finetune),
        max_steps: 0,
        seed: cfg.train.seed,
        out_dir: out.join(name),
    }
}

/// The two pre-training runs every fine-tune starts from: English from
/// scratch, then pooled Devanagari data initialized from it.
pub fn plan_pretraining(m: &MatrixManifests, out: &Path, cfg: &ToolkitConfig, max_steps: usize) -> Result<Vec<RecipeSpec>> {
    m.check()?;
    let mut eng = base(ENG_PRETRAIN_NAME, Stage::EngPretrain, &m.english, out, cfg);
    eng.max_steps = max_steps;
    let mut mix = base(MIX_PRETRAIN_NAME, Stage::MixPretrain, &m.pooled, out, cfg);
    mix.init_from = Some(eng.final_checkpoint());
    mix.drop_on_load = vec!["encoder.embedding".into()];
    mix.max_steps = max_steps;
    Ok(vec![eng, mix])
}

/// Frozen prefixes for decoder-only fine-tuning of a given topology.
pub fn decoder_only_freeze(multi_speaker: bool) -> Vec<String> {
    let mut f = vec!["encoder.".to_string()];
    if multi_speaker {
        f.push("speaker.".into());
    }
    f
}

/// Fine-tuning specs for the MOS/CMOS grid (4 model types × 2 warm starts)
/// followed by the 4 low-resource adaptation rows.
pub fn plan_paper_matrix(m: &MatrixManifests, out: &Path, cfg: &ToolkitConfig, max_steps: usize) -> Result<Vec<RecipeSpec>> {
    let pre = plan_pretraining(m, out, cfg, max_steps)?;
    let eng_ck = pre[0].final_checkpoint();
    let mix_ck = pre[1].final_checkpoint();

    let eng_warm = |name: &str, manifest: &Path, policy: Option<SpeakerPolicy>| {
        let mut s = base(name, Stage::Finetune, manifest, out, cfg);
        s.init_from = Some(eng_ck.clone());
        s.drop_on_load = vec!["encoder.embedding".into()];
        s.speaker_policy = policy;
        s.max_steps = max_steps;
        s
    };
    let mix_warm = |name: &str, manifest: &Path, policy: Option<SpeakerPolicy>, frozen: bool| {
        let mut s = base(name, Stage::Finetune, manifest, out, cfg);
        s.init_from = Some(mix_ck.clone());
        s.speaker_policy = policy;
        if frozen {
            s.freeze = decoder_only_freeze(policy.is_some());
        }
        s.max_steps = max_steps;
        s
    };

    let rows: [(&str, &Path, Option<SpeakerPolicy>); 4] = [
        ("single-hi", &m.primary_hindi, None),
        ("single-hien", &m.primary, None),
        ("multi-audio-hien", &m.pooled, Some(SpeakerPolicy::AudioEmbed)),
        ("multi-avg-hien", &m.pooled, Some(SpeakerPolicy::AvgEmbed)),
    ];
    let mut specs = Vec::with_capacity(12);
    for (row, manifest, policy) in rows {
        specs.push(eng_warm(&format!("{row}.eng-warmstart"), manifest, policy));
        specs.push(mix_warm(&format!("{row}.mix-warmstart"), manifest, policy, true));
    }
    specs.push(eng_warm("adapt.eng-warmstart.3h", &m.primary_3h, None));
    specs.push(mix_warm("adapt.mix-warmstart.3h", &m.primary_3h, None, false));
    specs.push(mix_warm("adapt.mix-warmstart.frozen.3h", &m.primary_3h, None, true));
    specs.push(mix_warm("adapt.mix-warmstart.frozen.15h", &m.primary, None, true));
    Ok(specs)
}

/// Vocoder training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderSpec {
    pub name: String,
    pub manifest: PathBuf,
    #[serde(default)]
    pub audio_root: Option<PathBuf>,
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    pub optimizer: OptimizerSpec,
    pub max_steps: usize,
    /// Segments per step.
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderReport {
    pub recipe: String,
    /// Per-step NLL.
    pub losses: Vec<f64>,
    pub wall_clock_s: f64,
    pub final_checkpoint: PathBuf,
}

/// A training segment and the mel computed from it.
pub fn vocoder_segment(clip: &AudioClip, start: usize, len: usize, cfg: &ToolkitConfig) -> Result<(Vec<f32>, MelSpectrogram)> {
    let mut seg: Vec<f32> = clip.samples.iter().skip(start).take(len).copied().collect();
    seg.resize(len, 0.0);
    let mel = mel_spectrogram(&AudioClip::new(seg.clone(), clip.sample_rate)?, &cfg.audio)?;
    Ok((seg, mel))
}

pub fn train_vocoder(spec: &VocoderSpec, cfg: &ToolkitConfig) -> Result<VocoderReport> {
    cfg.validate()?;
    let started = Instant::now();
    if spec.batch_size == 0 {
        return Err(ModelError::Recipe(format!("{}: batch_size must be ≥ 1", spec.name)));
    }
    let manifest = load_manifest(&spec.manifest, cfg.audio.sample_rate)
        .or_else(|_| load_roman_manifest(&spec.manifest, cfg.audio.sample_rate))?;
    let root = spec
        .audio_root
        .clone()
        .or_else(|| spec.manifest.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let model = Waveglow::new(&cfg.waveglow, &cfg.audio, DType::F32, spec.seed)?;
    let mut provenance = Vec::new();
    let mut init_digest = None;
    if let Some(p) = &spec.init_from {
        let ck = Checkpoint::load(p)?;
        ck.expect_kind(checkpoint::ModelKind::Waveglow)?;
        check_audio_compat(&ck.meta.config.audio, &cfg.audio)?;
        ck.apply_exact(model.store())?;
        provenance = ck.meta.provenance.clone();
        init_digest = Some(ck.digest.clone());
    }
    let clips: Vec<AudioClip> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| load_wav(&resolve_path(&root, &r.audio_path), Some(cfg.audio.sample_rate)))
        .collect::<std::result::Result<_, _>>()?;
    if clips.is_empty() {
        return Err(ModelError::Recipe(format!("{}: no TRAIN records", spec.name)));
    }
    let g = cfg.waveglow.group_size;
    let hop = cfg.audio.hop_length();
    let seg_len = cfg.waveglow.segment_length / g * g;
    if seg_len == 0 {
        return Err(ModelError::Recipe("segment_length is shorter than one group".into()));
    }
    let mut trainer = Trainer::new(model.store(), &[], &spec.optimizer)?;
    let mut rng = comix_core::rng::seeded(spec.seed);
    let mut losses = Vec::with_capacity(spec.max_steps);
    for _ in 0..spec.max_steps {
        let mut audio = Vec::new();
        let mut mels = Vec::new();
        for _ in 0..spec.batch_size {
            let clip = &clips[(rng.next_u64() % clips.len() as u64) as usize];
            let slack = clip.samples.len().saturating_sub(seg_len) / hop;
            let start = (rng.next_u64() % (slack as u64 + 1)) as usize * hop;
            let (seg, mel) = vocoder_segment(clip, start, seg_len, cfg)?;
            audio.extend(seg);
            mels.extend(mel.frames);
        }
        let b = spec.batch_size;
        let frames = mels.len() / (b * cfg.audio.n_mels);
        let audio = candle_core::Tensor::from_vec(audio, (b, seg_len), &candle_core::Device::Cpu)?;
        let mel = candle_core::Tensor::from_vec(mels, (b, frames, cfg.audio.n_mels), &candle_core::Device::Cpu)?;
        let out = model.forward(&audio, &mel)?;
        let loss = nll_loss(&out, cfg.waveglow.sigma_train)?;
        losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        trainer.step(&loss)?;
    }
    let mut meta = CheckpointMeta::waveglow(cfg);
    provenance.push(ProvenanceEntry {
        recipe: spec.name.clone(),
        stage: "VOCODER".into(),
        init_from: spec.init_from.as_ref().map(|p| p.display().to_string()),
        init_digest,
        manifest: Some(spec.manifest.display().to_string()),
        seed: spec.seed,
        steps: spec.max_steps,
    });
    meta.provenance = provenance;
    meta.step = spec.max_steps;
    std::fs::create_dir_all(&spec.out_dir).map_err(io_err(&spec.out_dir))?;
    cfg.echo_to(&spec.out_dir).map_err(io_err(&spec.out_dir))?;
    let final_checkpoint = spec.out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_checkpoint, model.store(), &meta)?;
    let report = VocoderReport {
        recipe: spec.name.clone(),
        losses,
        wall_clock_s: started.elapsed().as_secs_f64(),
        final_checkpoint,
    };
    let rp = spec.out_dir.join(REPORT_FILE);
    std::fs::write(&rp, serde_json::to_string_pretty(&report)?).map_err(io_err(&rp))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrogen::tests::tiny_spec;

    #[test]
    fn batches_respect_frame_budget() {
        let frames = vec![10, 30, 20, 50, 5];
        let b = frame_batches(&[0, 1, 2, 3, 4], &frames, 60);
        assert_eq!(b, vec![vec![0, 1], vec![2], vec![3], vec![4]]);
        let all: usize = b.iter().map(Vec::len).sum();
        assert_eq!(all, 5);
        assert_eq!(frame_batches(&[3], &frames, 1), vec![vec![3]]);
    }

    fn saved(spec: TacotronSpec, seed: u64, dir: &Path) -> (Tacotron, Checkpoint) {
        let m = Tacotron::new(spec, DType::F32, seed).unwrap();
        let meta = CheckpointMeta::tacotron(&ToolkitConfig::default(), m.spec());
        let p = dir.join(format!("ck{seed}.safetensors"));
        checkpoint::save(&p, m.store(), &meta).unwrap();
        (m, Checkpoint::load(&p).unwrap())
    }

    #[test]
    fn surgery_identity_and_vocab_swap() {
        let dir = tempfile::tempdir().unwrap();
        let mut roman = tiny_spec(None);
        roman.vocab = VocabKind::Roman;
        let (src, ck) = saved(roman.clone(), 1, dir.path());

        let same = Tacotron::new(roman, DType::F32, 2).unwrap();
        let rep = surgery_load(&ck, same.store(), &[]).unwrap();
        assert!(rep.fresh.is_empty());
        assert_eq!(same.store().digest(&[]).unwrap(), src.store().digest(&[]).unwrap());

        let target = Tacotron::new(tiny_spec(None), DType::F32, 3).unwrap();
        let fresh_emb = target.store().digest(&["encoder.embedding".into()]).unwrap();
        let err = surgery_load(&ck, target.store(), &[]).unwrap_err();
        assert!(err.to_string().contains("encoder.embedding.weight"), "{err}");

        let drop = vec!["encoder.embedding".to_string()];
        let rep = surgery_load(&ck, target.store(), &drop).unwrap();
        assert_eq!(rep.fresh, vec!["encoder.embedding.weight".to_string()]);
        assert_eq!(rep.dropped, vec!["encoder.embedding.weight".to_string()]);
        assert_eq!(rep.copied.len() + rep.fresh.len(), target.store().len());
        assert_eq!(target.store().digest(&drop).unwrap(), fresh_emb);
        for name in &rep.copied {
            assert_eq!(
                target.store().get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                src.store().get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
        assert!(matches!(
            surgery_load(&ck, target.store(), &["nothing.".into()]),
            Err(ModelError::UnmatchedPrefix { .. })
        ));
    }

    #[test]
    fn single_to_multi_speaker_leaves_fusion_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let (_, ck) = saved(tiny_spec(None), 1, dir.path());
        let target = Tacotron::new(tiny_spec(Some(4)), DType::F32, 2).unwrap();
        let rep = surgery_load(&ck, target.store(), &[]).unwrap();
        assert!(!rep.fresh.is_empty());
        assert!(rep.fresh.iter().all(|n| n.starts_with("speaker.")));
    }

    #[test]
    fn finetune_requires_init() {
        let cfg = ToolkitConfig::default();
        let m = base("x", Stage::Finetune, Path::new("m.jsonl"), Path::new("out"), &cfg);
        assert!(m.validate().is_err());
        let json = serde_json::to_value(&m).unwrap();
        assert_eq!(json["stage"], "FINETUNE");
        let back: RecipeSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, m);
    }
}
