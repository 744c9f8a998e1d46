//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! test fails if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{anyhow, ensure, Context, Result};
use candle_core::{DType, Device, Tensor};
use comix_core::audiofe::{self, AudioClip, MelFrontEnd};
use comix_core::config::AudioConfig;
use comix_core::corpus::{save_manifest, CorpusManifest};
use comix_core::evalkit::{self, RatingKind, RatingRecord};
use comix_core::textnorm::normalize;
use comix_core::{ToolkitConfig, TransliterationProvider};
use comix_models::checkpoint::Checkpoint;
use comix_models::nn::ForwardCtx;
use comix_models::recipes::{
    self, decoder_only_freeze, plan_paper_matrix, run_recipe, surgery_load, train_vocoder, ExtractorSpec,
    MatrixManifests, RecipeSpec, Stage, VocoderSpec,
};
use comix_models::speaker::{lookup, SpeakerExtractor, SpeakerPolicy, SpeakerQuery, StubExtractor};
use comix_models::spectrogen::{Batch, Example, Tacotron, TacotronSpec};
use comix_models::toy;
use comix_models::train::OptimizerSpec;
use comix_models::waveglow::Waveglow;
use comix_models::VocabKind;
use rand::RngCore;

struct Shared {
    dir: tempfile::TempDir,
    /// Overfit single-speaker model from criterion 4.
    taco: Option<PathBuf>,
    /// Vocoder trained in criterion 7.
    vocoder: Option<PathBuf>,
    /// Training sentences of the overfit model.
    sentences: Vec<String>,
}

fn uniform(rng: &mut impl RngCore) -> f64 {
    comix_core::rng::unit_f64(rng)
}

fn pick<'a, T>(rng: &mut impl RngCore, items: &'a [T]) -> &'a T {
    &items[(rng.next_u64() % items.len() as u64) as usize]
}

// ---------------------------------------------------------------- 1

/// Any code point from the Latin blocks of Unicode.
fn is_latin_code_point(c: char) -> bool {
    matches!(c,
        'A'..='Z' | 'a'..='z' | '\u{00AA}' | '\u{00BA}'
        | '\u{00C0}'..='\u{00D6}' | '\u{00D8}'..='\u{00F6}' | '\u{00F8}'..='\u{024F}'
        | '\u{1E00}'..='\u{1EFF}' | '\u{2C60}'..='\u{2C7F}' | '\u{A720}'..='\u{A7FF}'
        | '\u{FF21}'..='\u{FF3A}' | '\u{FF41}'..='\u{FF5A}')
}

fn mixed_sentence(rng: &mut impl RngCore) -> String {
    const HI: [&str; 16] = [
        "मेरा", "फ़ोन", "बहुत", "अच्छा", "है", "और", "का", "में", "यह", "नया", "कीमत", "सिर्फ़", "रुपये", "के", "लिए",
        "ऑफ़र",
    ];
    const EN: [&str; 20] = [
        "phone", "EMI", "iPhone", "Samsung", "Galaxy", "offer", "delivery", "free", "cashback", "Flipkart", "OnePlus",
        "USB", "cable", "Redmi", "Note", "Pro", "Max", "smartwatch", "WiFi", "HD",
    ];
    const PUNCT: [&str; 6] = [",", ".", "?", "!", "।", "-"];
    let n = 4 + (rng.next_u64() % 9) as usize;
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let r = uniform(rng);
        let w = if r < 0.4 {
            pick(rng, &HI).to_string()
        } else if r < 0.75 {
            pick(rng, &EN).to_string()
        } else if r < 0.85 {
            (rng.next_u64() % 25_000).to_string()
        } else if r < 0.92 {
            // Latin glued to Devanagari or digits.
            format!("{}{}", pick(rng, &EN), pick(rng, &["का", "5G", "2", "वाला"]))
        } else {
            format!("{}{}", pick(rng, &HI), pick(rng, &PUNCT))
        };
        words.push(w);
    }
    words.join(" ")
}

fn text_pipeline_closure() -> Result<String> {
    let mut rng = comix_core::rng::seeded(2024);
    let corpus: Vec<String> = (0..1000).map(|_| mixed_sentence(&mut rng)).collect();
    let provider = TransliterationProvider::rules_only();
    let started = Instant::now();
    let mut latin_free = 0;
    let mut idempotent = 0;
    for s in &corpus {
        let once = normalize(s, &provider).with_context(|| format!("normalizing {s:?}"))?;
        if !once.devanagari.chars().any(is_latin_code_point) {
            latin_free += 1;
        }
        let twice = normalize(&once.devanagari, &provider)?;
        if twice.devanagari == once.devanagari {
            idempotent += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(latin_free == 1000, "{latin_free}/1000 outputs free of Latin code points");
    ensure!(idempotent == 1000, "{idempotent}/1000 idempotent");
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("1000/1000 Latin-free and idempotent in {secs:.2} s"))
}

// ---------------------------------------------------------------- 2

/// Centered STFT with single reflection padding and a naive DFT.
struct NaiveStft {
    n_fft: usize,
    hop: usize,
}

impl NaiveStft {
    fn padded(&self, x: &[f32]) -> Vec<f64> {
        let p = (self.n_fft / 2) as isize;
        let n = x.len() as isize;
        (-p..n + p)
            .map(|i| {
                let j = if i < 0 {
                    -i
                } else if i >= n {
                    2 * (n - 1) - i
                } else {
                    i
                };
                x[j as usize] as f64
            })
            .collect()
    }

    fn frame_starts(&self, x: &[f32]) -> Vec<usize> {
        let len = self.padded(x).len();
        (0..).map(|t| t * self.hop).take_while(|s| s + self.n_fft <= len).collect()
    }

    fn magnitude(&self, x: &[f32], t: usize) -> Vec<f64> {
        let padded = self.padded(x);
        let start = t * self.hop;
        let n = self.n_fft as f64;
        let frame: Vec<f64> = (0..self.n_fft)
            .map(|k| padded[start + k] * (0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n).cos()))
            .collect();
        (0..=self.n_fft / 2)
            .map(|b| {
                let (mut re, mut im) = (0.0, 0.0);
                for (k, v) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (b * k % self.n_fft) as f64 / n;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }
}

fn random_clip(rng: &mut impl RngCore, len: usize, rate: u32) -> AudioClip {
    let f = 100.0 + 3000.0 * uniform(rng);
    let samples = (0..len)
        .map(|i| {
            let tone = 0.4 * (2.0 * std::f64::consts::PI * f * i as f64 / rate as f64).sin();
            (tone + 0.2 * (uniform(rng) - 0.5)) as f32
        })
        .collect();
    AudioClip::new(samples, rate).expect("in range")
}

fn mel_front_end() -> Result<String> {
    let audio = AudioConfig::default();
    let fe = MelFrontEnd::new(&audio);
    let naive = NaiveStft {
        n_fft: 1102,
        hop: 265,
    };
    ensure!(fe.n_fft() == naive.n_fft && fe.hop() == naive.hop, "window/hop differ from 1102/265");
    let fb = audiofe::mel_filterbank(audio.sample_rate, naive.n_fft, audio.n_mels, audio.fmin, audio.fmax);
    let mut rng = comix_core::rng::seeded(7);
    let mut worst_mag = 0.0f64;
    let mut worst_mel = 0.0f64;
    for _ in 0..50 {
        let len = 600 + (rng.next_u64() % 6000) as usize;
        let clip = random_clip(&mut rng, len, audio.sample_rate);
        let mel = fe.compute(&clip)?;
        let starts = naive.frame_starts(&clip.samples);
        ensure!(mel.n_frames == starts.len(), "{len} samples: {} frames vs {}", mel.n_frames, starts.len());
        let t = (rng.next_u64() % mel.n_frames as u64) as usize;
        let ours = &fe.magnitude_stft(&clip)?[t];
        let theirs = naive.magnitude(&clip.samples, t);
        let scale = theirs.iter().cloned().fold(1e-9, f64::max);
        for (a, b) in ours.iter().zip(&theirs) {
            worst_mag = worst_mag.max((a - b).abs() / scale);
        }
        for (m, row) in fb.iter().enumerate() {
            let e: f64 = row.iter().zip(&theirs).map(|(w, v)| w * v).sum();
            worst_mel = worst_mel.max((e.max(audio.eps).ln() - mel.get(t, m) as f64).abs());
        }
    }
    ensure!(worst_mag < 1e-9, "STFT magnitude differs by {worst_mag:e} (relative)");
    ensure!(worst_mel < 1e-4, "log-mel differs by {worst_mel:e}");

    let silence = fe.compute(&AudioClip::new(vec![0.0; 5000], audio.sample_rate)?)?;
    let floor = (audio.eps as f32).ln();
    ensure!(silence.frames.iter().all(|&v| v == floor), "silence is not ln(eps) everywhere");

    // Prepending k hops of silence shifts interior frames by k.
    let k = 3;
    let clip = random_clip(&mut rng, 5000, audio.sample_rate);
    let mut shifted = vec![0.0f32; k * naive.hop];
    shifted.extend(&clip.samples);
    let a = fe.compute(&clip)?;
    let b = fe.compute(&AudioClip::new(shifted, audio.sample_rate)?)?;
    ensure!(b.n_frames == a.n_frames + k, "shifted clip has {} frames, expected {}", b.n_frames, a.n_frames + k);
    let half = naive.n_fft / 2;
    let mut checked = 0;
    let mut worst_shift = 0.0f32;
    for t in 0..a.n_frames {
        if t * naive.hop < half || t * naive.hop + half > clip.samples.len() {
            continue;
        }
        for m in 0..audio.n_mels {
            worst_shift = worst_shift.max((a.get(t, m) - b.get(t + k, m)).abs());
        }
        checked += 1;
    }
    ensure!(checked > 5 && worst_shift < 1e-5, "shift covariance off by {worst_shift} over {checked} frames");
    Ok(format!(
        "50 clips: frame counts exact, |Δmag| {worst_mag:.1e}, |Δlogmel| {worst_mel:.1e}; silence = {floor}; shift Δ {worst_shift:.1e}"
    ))
}

// ---------------------------------------------------------------- 3

fn gradient_check() -> Result<String> {
    let cfg = toy::toy_config();
    let spec = TacotronSpec {
        encoder: comix_core::config::EncoderConfig {
            embed_dim: 6,
            n_conv: 2,
            conv_filters: 6,
            conv_kernel: 3,
            bilstm_units: 4,
            dropout: 0.5,
        },
        decoder: comix_core::config::DecoderConfig {
            n_lstm: 2,
            lstm_units: 6,
            prenet: vec![5, 5],
            prenet_dropout: 0.5,
            postnet_layers: 3,
            postnet_filters: 5,
            postnet_kernel: 3,
            attn_dim: 4,
            location_filters: 3,
            location_kernel: 3,
            ..cfg.decoder.clone()
        },
        n_mels: 5,
        vocab: VocabKind::Devanagari,
        speaker_dim: None,
    };
    let model = Tacotron::new(spec, DType::F64, 5)?;
    let mut rng = comix_core::rng::seeded(11);
    let target: Vec<f32> = (0..4 * 5).map(|_| (uniform(&mut rng) * 4.0 - 6.0) as f32).collect();
    let example = Example {
        ids: model.vocab().encode("कमल")?,
        mel: Some(comix_core::MelSpectrogram::from_rows(target, 5)),
        speaker: None,
    };
    let batch = Batch::new(&[example], 5, cfg.audio.log_floor(), DType::F64)?;
    // Three characters plus the end-of-sequence symbol.
    ensure!(batch.text_lens == vec![4], "instance has {:?} symbols", batch.text_lens);
    let loss = |m: &Tacotron| -> Result<(f64, Tensor)> {
        let (_, terms) = m.forward_loss(&batch, &mut ForwardCtx::eval(3))?;
        Ok((terms.total.to_scalar::<f64>()?, terms.total))
    };
    let (_, total) = loss(&model)?;
    let grads = total.backward()?;

    let names: Vec<String> = model
        .store()
        .names()
        .filter(|n| model.store().is_trainable(n))
        .map(String::from)
        .collect();
    let mut order: Vec<usize> = (0..names.len()).collect();
    comix_core::rng::shuffle(&mut order, &mut rng);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for &i in order.iter().take(10) {
        let name = &names[i];
        let var = model.store().get(name).expect("listed");
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let j = (rng.next_u64() % original.len() as u64) as usize;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[j],
            None => 0.0,
        };
        let eval_at = |delta: f64| -> Result<f64> {
            let mut v = original.clone();
            v[j] += delta;
            model
                .store()
                .assign(name, &Tensor::from_vec(v, var.dims(), &Device::Cpu)?)?;
            Ok(loss(&model)?.0)
        };
        let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        eval_at(0.0)?;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        lines.push(format!("{name}[{j}] {analytic:.3e}/{numeric:.3e}"));
    }
    ensure!(worst <= 1e-3, "worst relative error {worst:.2e}: {}", lines.join("; "));
    Ok(format!("10 parameters, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn toy_recipe(name: &str, stage: Stage, manifest: &Path, out: &Path, cfg: &ToolkitConfig, steps: usize) -> RecipeSpec {
    RecipeSpec {
        name: name.into(),
        stage,
        init_from: None,
        freeze: Vec::new(),
        drop_on_load: Vec::new(),
        manifest: manifest.to_path_buf(),
        audio_root: None,
        speaker_policy: None,
        extractor: ExtractorSpec::Stub { seed: 0 },
        speaker_table: None,
        optimizer: OptimizerSpec::from_train_config(&cfg.train, stage == Stage::Finetune),
        max_steps: steps,
        seed: 1,
        out_dir: out.join(name),
    }
}

fn write_toy(dir: &Path, prefix: &str, alphabet: &[char], speakers: usize, n: usize, cfg: &ToolkitConfig) -> Result<(PathBuf, CorpusManifest)> {
    let m = toy::write_corpus(dir, prefix, alphabet, speakers, n, 7, cfg)?;
    let p = dir.join("manifest.jsonl");
    save_manifest(&m, &p, None)?;
    Ok((p, m))
}

/// Teacher-forced post-net mel MSE over the whole corpus, dropout off.
fn teacher_forced_mse(model: &Tacotron, examples: &[Example], cfg: &ToolkitConfig) -> Result<f64> {
    let batch = Batch::new(examples, cfg.audio.n_mels, cfg.audio.log_floor(), DType::F32)?;
    let (_, terms) = model.forward_loss(&batch, &mut ForwardCtx::eval(0))?;
    Ok(terms.values()?[1])
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

fn tiny_overfit(shared: &mut Shared) -> Result<String> {
    let mut cfg = toy::toy_config();
    cfg.train.lr_pretrain = 2e-3;
    // About ten utterances per batch.
    cfg.train.batch_frames = 110;
    cfg.train.checkpoint_every = 0;
    let dir = shared.dir.path().join("overfit");
    let (manifest, m) = write_toy(&dir.join("data"), "o", &toy::DEVANAGARI_ALPHABET, 1, 50, &cfg)?;
    let spec = toy_recipe("overfit", Stage::MixPretrain, &manifest, &dir, &cfg, 1600);
    let started = Instant::now();
    let report = run_recipe(&spec, &cfg)?;
    let minutes = started.elapsed().as_secs_f64() / 60.0;

    let init = Tacotron::new(TacotronSpec::from_config(&cfg, VocabKind::Devanagari, false), DType::F32, spec.seed)?;
    let trained = Checkpoint::load(&report.final_checkpoint)?.tacotron()?;
    let examples: Vec<Example> = m
        .records
        .iter()
        .map(|r| {
            Ok(Example {
                ids: trained.vocab().encode(&r.text)?,
                mel: Some(recipes::record_mel(r, &dir.join("data"), &cfg)?),
                speaker: None,
            })
        })
        .collect::<Result<_>>()?;
    let mse0 = teacher_forced_mse(&init, &examples, &cfg)?;
    let mse1 = teacher_forced_mse(&trained, &examples, &cfg)?;
    let ratio = mse1 / mse0;

    let mut monotone = 0usize;
    let mut total = 0usize;
    let mut truncated = 0;
    for (i, r) in m.records.iter().take(5).enumerate() {
        let b = Batch::new(
            &[Example {
                ids: trained.vocab().encode(&r.text)?,
                mel: None,
                speaker: None,
            }],
            cfg.audio.n_mels,
            cfg.audio.log_floor(),
            DType::F32,
        )?;
        let out = trained.infer(&b, cfg.decoder.max_steps, cfg.decoder.gate_threshold, &mut ForwardCtx::eval(i as u64))?;
        if out.truncated[0] {
            truncated += 1;
        }
        let al = out.alignment(0, b.text_lens[0])?;
        let am: Vec<usize> = al.iter().map(|row| argmax(row)).collect();
        monotone += am.windows(2).filter(|w| w[1] >= w[0]).count();
        total += am.len().saturating_sub(1);
    }
    let frac = monotone as f64 / total.max(1) as f64;
    shared.taco = Some(report.final_checkpoint.clone());
    shared.sentences = m.records.iter().take(5).map(|r| r.text.clone()).collect();
    let detail = format!(
        "MSE {mse0:.3} → {mse1:.4} ({:.1}%), {truncated}/5 truncated, monotone argmax {:.1}%, {minutes:.1} min",
        100.0 * ratio,
        100.0 * frac
    );
    ensure!(minutes <= 30.0, "training took {minutes:.1} min: {detail}");
    ensure!(ratio < 0.10, "{detail}");
    ensure!(truncated == 0, "{detail}");
    ensure!(frac >= 0.90, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn speaker_fusion(shared: &Shared) -> Result<String> {
    let cfg = toy::toy_config();
    let dir = shared.dir.path().join("fusion");
    let (manifest, _) = write_toy(&dir.join("data"), "f", &toy::DEVANAGARI_ALPHABET, 2, 10, &cfg)?;
    let mut spec = toy_recipe("fusion", Stage::MixPretrain, &manifest, &dir, &cfg, 60);
    spec.speaker_policy = Some(SpeakerPolicy::AvgEmbed);
    let report = run_recipe(&spec, &cfg)?;
    let ck = Checkpoint::load(&report.final_checkpoint)?;
    let model = ck.tacotron()?;
    let table = ck
        .meta
        .speaker
        .as_ref()
        .and_then(|s| s.table.clone())
        .ok_or_else(|| anyhow!("checkpoint has no speaker table"))?;
    ensure!(table.len() == 2, "table has {} speakers", table.len());
    let x = StubExtractor { seed: 0, dim: cfg.speaker.embed_dim };
    let mels: Vec<Vec<f32>> = ["fspk0", "fspk1"]
        .iter()
        .map(|id| {
            let e = lookup(SpeakerPolicy::AvgEmbed, SpeakerQuery::Id(id), Some(&table), &x, 0.0)?;
            let b = Batch::new(
                &[Example {
                    ids: model.vocab().encode("कमलनसत")?,
                    mel: None,
                    speaker: Some(e.vector),
                }],
                cfg.audio.n_mels,
                cfg.audio.log_floor(),
                DType::F32,
            )?;
            // Gate disabled so both runs produce the same number of frames.
            let out = model.infer(&b, 12, 2.0, &mut ForwardCtx::eval(0))?;
            Ok(out.mel(0)?.frames)
        })
        .collect::<Result<_>>()?;
    let diff = mels[0].iter().zip(&mels[1]).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / mels[0].len() as f64;
    ensure!(diff > 1e-3, "mean abs mel difference {diff:.2e}");
    let err = lookup(SpeakerPolicy::AvgEmbed, SpeakerQuery::Id("ghost"), Some(&table), &x, 0.0)
        .err()
        .ok_or_else(|| anyhow!("unseen speaker was accepted"))?;
    ensure!(
        err.to_string().contains("unseen speaker not supported in avg-embed"),
        "unexpected error: {err}"
    );
    ensure!(x.version().starts_with("stub"), "stub extractor version");
    Ok(format!("mean abs mel difference {diff:.3}; unseen speaker rejected"))
}

// ---------------------------------------------------------------- 6

fn surgery_and_freeze(shared: &Shared) -> Result<String> {
    let cfg = toy::toy_config();
    let dir = shared.dir.path().join("surgery");
    let (en_manifest, _) = write_toy(&dir.join("en"), "e", &toy::ROMAN_ALPHABET, 1, 20, &cfg)?;
    let (hi_manifest, _) = write_toy(&dir.join("hi"), "h", &toy::DEVANAGARI_ALPHABET, 1, 20, &cfg)?;
    let eng = run_recipe(&toy_recipe("eng", Stage::EngPretrain, &en_manifest, &dir, &cfg, 20), &cfg)?;
    let eng_ck = Checkpoint::load(&eng.final_checkpoint)?;

    // Surgery onto the Devanagari topology.
    let target = Tacotron::new(TacotronSpec::from_config(&cfg, VocabKind::Devanagari, false), DType::F32, 99)?;
    let fresh_embedding = target.store().snapshot_f32()?["encoder.embedding.weight"].flatten_all()?.to_vec1::<f32>()?;
    let rep = surgery_load(&eng_ck, target.store(), &["encoder.embedding".to_string()])?;
    ensure!(rep.fresh == vec!["encoder.embedding.weight".to_string()], "fresh set {:?}", rep.fresh);
    let snap = target.store().snapshot_f32()?;
    let mut equal = 0;
    for (name, t) in &snap {
        let values = t.flatten_all()?.to_vec1::<f32>()?;
        if name == "encoder.embedding.weight" {
            ensure!(values == fresh_embedding, "embedding is not the fresh initialization");
            continue;
        }
        let (_, ck_values) = eng_ck.tensors.get(name).ok_or_else(|| anyhow!("{name} missing from checkpoint"))?;
        let same = values.iter().zip(ck_values).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same && values.len() == ck_values.len(), "{name} differs from the checkpoint");
        equal += 1;
    }

    // The chain: mix pre-training, then decoder-only fine-tuning.
    let mut mix = toy_recipe("mix", Stage::MixPretrain, &hi_manifest, &dir, &cfg, 20);
    mix.init_from = Some(eng.final_checkpoint.clone());
    mix.drop_on_load = vec!["encoder.embedding".into()];
    let mix_rep = run_recipe(&mix, &cfg)?;
    let mut ft = toy_recipe("decoder-only", Stage::Finetune, &hi_manifest, &dir, &cfg, 100);
    ft.init_from = Some(mix_rep.final_checkpoint.clone());
    ft.freeze = decoder_only_freeze(false);
    let ft_rep = run_recipe(&ft, &cfg)?;
    ensure!(
        ft_rep.frozen_digest_before.is_some() && ft_rep.frozen_digest_before == ft_rep.frozen_digest_after,
        "frozen digest changed"
    );
    let before = Checkpoint::load(&mix_rep.final_checkpoint)?;
    let after = Checkpoint::load(&ft_rep.final_checkpoint)?;
    let mut frozen = 0;
    let mut moved = 0;
    for (name, (_, v)) in &after.tensors {
        let same = before.tensors[name].1 == *v;
        if name.starts_with("encoder.") {
            ensure!(same, "{name} changed under freeze");
            frozen += 1;
        } else if !same {
            moved += 1;
        }
    }
    ensure!(moved > 0, "no decoder parameter moved");
    Ok(format!(
        "{equal} tensors byte-equal after surgery, embedding fresh; {frozen} frozen tensors unchanged over 100 steps, {moved} trained"
    ))
}

// ---------------------------------------------------------------- 7

fn perturb(model: &Waveglow, std: f64, seed: u64) -> Result<()> {
    let mut ctx = ForwardCtx::train(seed);
    for name in model.store().names().map(String::from).collect::<Vec<_>>() {
        let cur = model.store().get(&name).expect("listed").as_tensor().clone();
        let noise = ctx.normal(cur.dims(), std, DType::F32)?;
        model.store().assign(&name, &cur.add(&noise)?)?;
    }
    Ok(())
}

fn waveglow(shared: &mut Shared) -> Result<String> {
    let cfg = toy::toy_config();
    let model = Waveglow::new(&cfg.waveglow, &cfg.audio, DType::F32, 3)?;
    perturb(&model, 0.05, 4)?;
    let hop = cfg.audio.hop_length();
    let mut rng = comix_core::rng::seeded(5);
    let mut worst = 0.0f32;
    for i in 0..100 {
        let frames = 2 + (rng.next_u64() % 10) as usize;
        let n = model.output_len(frames);
        ensure!(n == frames * hop / cfg.waveglow.group_size * cfg.waveglow.group_size, "output_len({frames}) = {n}");
        let audio: Vec<f32> = (0..n).map(|_| (uniform(&mut rng) * 1.6 - 0.8) as f32).collect();
        let mel: Vec<f32> = (0..frames * cfg.audio.n_mels).map(|_| (uniform(&mut rng) * 10.0 - 11.0) as f32).collect();
        let audio_t = Tensor::from_vec(audio, (1, n), &Device::Cpu)?;
        let mel_t = Tensor::from_vec(mel.clone(), (1, frames, cfg.audio.n_mels), &Device::Cpu)?;
        let out = model.forward(&audio_t, &mel_t)?;
        ensure!(out.z.elem_count() == n, "segment {i}: {} latents for {n} samples", out.z.elem_count());
        let back = model.inverse(&out.z, &mel_t)?;
        ensure!(back.elem_count() == n, "segment {i}: inverse returned {} samples", back.elem_count());
        let err = back.sub(&audio_t)?.abs()?.max_all()?.to_scalar::<f32>()?;
        worst = worst.max(err);
        let synth = model.synthesize(
            &comix_core::MelSpectrogram::from_rows(mel, cfg.audio.n_mels),
            0.7,
            &mut ForwardCtx::eval(i),
        )?;
        ensure!(synth.len() == n, "segment {i}: synthesized {} samples, expected {n}", synth.len());
    }
    ensure!(worst <= 1e-4, "inverse error {worst:e}");

    // One clip exactly one training segment long.
    let dir = shared.dir.path().join("vocoder");
    std::fs::create_dir_all(&dir)?;
    let text = "कमलनसतकम";
    let clip = toy::render(text, &toy::DEVANAGARI_ALPHABET, 0, &cfg);
    audiofe::write_wav(&dir.join("clip.wav"), &clip)?;
    let record = comix_core::UtteranceRecord {
        id: "clip".into(),
        audio_path: "clip.wav".into(),
        text: text.into(),
        source_lang: comix_core::corpus::Lang::Hi,
        speaker_id: "s".into(),
        duration_s: clip.duration_s(),
        split: comix_core::corpus::Split::Train,
    };
    let manifest = dir.join("manifest.jsonl");
    save_manifest(&CorpusManifest::new(vec![record], cfg.audio.sample_rate, vec!["toy".into()])?, &manifest, None)?;
    let spec = VocoderSpec {
        name: "vocoder".into(),
        manifest,
        audio_root: None,
        init_from: None,
        optimizer: OptimizerSpec::from_train_config(&cfg.train, false),
        max_steps: 200,
        batch_size: 1,
        seed: 1,
        out_dir: dir.join("run"),
    };
    let rep = train_vocoder(&spec, &cfg)?;
    ensure!(rep.losses.len() == 200, "{} steps logged", rep.losses.len());
    let blocks: Vec<f64> = rep.losses.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let decreasing = blocks.windows(2).all(|w| w[1] < w[0]);
    shared.vocoder = Some(rep.final_checkpoint.clone());
    let shown: Vec<String> = blocks.iter().map(|b| format!("{b:.3}")).collect();
    ensure!(decreasing, "20-step mean NLL not strictly decreasing: {}", shown.join(" "));
    Ok(format!(
        "100 segments, max inverse error {worst:.1e}, counts conserved; NLL {} → {}",
        shown[0],
        shown[shown.len() - 1]
    ))
}

// ---------------------------------------------------------------- 8

fn end_to_end(shared: &Shared) -> Result<String> {
    let taco = shared.taco.as_ref().ok_or_else(|| anyhow!("no overfit model (criterion 4 failed)"))?;
    let vocoder = shared.vocoder.as_ref().ok_or_else(|| anyhow!("no vocoder (criterion 7 failed)"))?;
    let dir = shared.dir.path().join("e2e");
    std::fs::create_dir_all(&dir)?;
    let items = dir.join("items.jsonl");
    let lines: Vec<String> = shared
        .sentences
        .iter()
        .enumerate()
        .map(|(i, t)| serde_json::json!({"id": format!("s{i}"), "text": t}).to_string())
        .collect();
    std::fs::write(&items, lines.join("\n"))?;
    let run = |out: &Path| -> Result<()> {
        let status = Command::new(env!("CARGO_BIN_EXE_comix"))
            .arg("synth")
            .arg("--manifest")
            .arg(&items)
            .arg("--taco")
            .arg(taco)
            .arg("--vocoder")
            .arg(vocoder)
            .args(["--seed", "42"])
            .arg("--out")
            .arg(out)
            .env_remove("COMIX_CONFIG")
            .status()?;
        ensure!(status.success(), "comix synth exited with {status}");
        Ok(())
    };
    let (a, b) = (dir.join("a"), dir.join("b"));
    run(&a)?;
    run(&b)?;
    let hop = toy::toy_config().audio.hop_length();
    let mut total = 0;
    for i in 0..shared.sentences.len() {
        let wa = std::fs::read(a.join(format!("s{i}.wav")))?;
        let wb = std::fs::read(b.join(format!("s{i}.wav")))?;
        ensure!(wa == wb, "s{i}.wav differs between runs");
        let (samples, _) = audiofe::wav_header(&a.join(format!("s{i}.wav")))?;
        let (frames, _, _) = audiofe::read_matrix(&a.join(format!("s{i}.mel.bin")))?;
        ensure!(
            samples as usize == frames * hop,
            "s{i}: {samples} samples for {frames} frames × {hop}"
        );
        total += samples;
    }
    Ok(format!(
        "{} WAVs, {total} samples = frames × {hop}, byte-identical across runs",
        shared.sentences.len()
    ))
}

// ---------------------------------------------------------------- 9

fn rating(listener: &str, utt: &str, kind: RatingKind, value: f64, first: Option<&str>, second: Option<&str>) -> RatingRecord {
    RatingRecord {
        listener_id: listener.into(),
        utterance_id: utt.into(),
        kind,
        value,
        first_system: first.map(String::from),
        second_system: second.map(String::from),
    }
}

fn run_aggregate(dir: &Path, kind: &str, records: &[RatingRecord], ours: Option<&str>) -> Result<serde_json::Value> {
    let input = dir.join(format!("{kind}.csv"));
    let out = dir.join(format!("{kind}.json"));
    evalkit::write_ratings(&input, records)?;
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_comix"));
    cmd.args(["eval", "aggregate", "--kind", kind, "--in"]).arg(&input).arg("--out").arg(&out);
    if let Some(o) = ours {
        cmd.args(["--ours", o]);
    }
    let status = cmd.env_remove("COMIX_CONFIG").status()?;
    ensure!(status.success(), "comix eval aggregate exited with {status}");
    Ok(serde_json::from_str(&std::fs::read_to_string(out)?)?)
}

fn evalkit_criterion(shared: &Shared) -> Result<String> {
    let dir = shared.dir.path().join("eval");
    std::fs::create_dir_all(&dir)?;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;

    // MOS: 4 5 3 5 4 → mean 21/5, sample variance 2.8/4.
    let mos: Vec<RatingRecord> = [4.0, 5.0, 3.0, 5.0, 4.0]
        .iter()
        .enumerate()
        .map(|(i, v)| rating(&format!("l{i}"), "u1", RatingKind::Mos, *v, Some("sys"), None))
        .chain([rating("l9", "u1", RatingKind::Mos, 7.0, Some("sys"), None)])
        .collect();
    let s = run_aggregate(&dir, "mos", &mos, None)?;
    ensure!(close(s["mean"].as_f64().unwrap_or(f64::NAN), 4.2), "MOS mean {}", s["mean"]);
    ensure!(close(s["std"].as_f64().unwrap_or(f64::NAN), 0.7f64.sqrt()), "MOS std {}", s["std"]);
    ensure!(s["n"] == 5 && s["n_input"] == 6, "MOS counts {} / {}", s["n"], s["n_input"]);

    // CMOS toward A; value rates the second clip against the first.
    // Adjusted: +2, -1, 0, +2 → mean 0.75, sample std 1.5.
    let cmos = vec![
        rating("l1", "u1", RatingKind::Cmos, 2.0, Some("B"), Some("A")),
        rating("l1", "u2", RatingKind::Cmos, 1.0, Some("A"), Some("B")),
        rating("l2", "u1", RatingKind::Cmos, 0.0, Some("B"), Some("A")),
        rating("l2", "u2", RatingKind::Cmos, -2.0, Some("A"), Some("B")),
        rating("l3", "u1", RatingKind::Cmos, 1.0, Some("A"), Some("A")),
    ];
    let s = run_aggregate(&dir, "cmos", &cmos, Some("A"))?;
    ensure!(close(s["mean"].as_f64().unwrap_or(f64::NAN), 0.75), "CMOS mean {}", s["mean"]);
    ensure!(close(s["std"].as_f64().unwrap_or(f64::NAN), 1.5), "CMOS std {}", s["std"]);
    ensure!(s["rejected"].as_array().map_or(0, Vec::len) == 1, "CMOS rejections {}", s["rejected"]);

    // Antisymmetry over randomized files.
    let mut rng = comix_core::rng::seeded(99);
    for f in 0..1000 {
        let n = 1 + (rng.next_u64() % 40) as usize;
        let records: Vec<RatingRecord> = (0..n)
            .map(|i| {
                let a_first = rng.next_u64() % 2 == 0;
                let v = (rng.next_u64() % 5) as f64 - 2.0;
                let (x, y) = if a_first { ("A", "B") } else { ("B", "A") };
                rating(&format!("l{}", i % 7), &format!("u{i}"), RatingKind::Cmos, v, Some(x), Some(y))
            })
            .collect();
        let path = dir.join("random.csv");
        evalkit::write_ratings(&path, &records)?;
        let parsed = evalkit::load_ratings(&path)?;
        let swapped: Vec<RatingRecord> = parsed
            .iter()
            .map(|r| {
                let flip = |s: &Option<String>| s.as_deref().map(|x| if x == "A" { "B" } else { "A" }.to_string());
                RatingRecord {
                    first_system: flip(&r.first_system),
                    second_system: flip(&r.second_system),
                    ..r.clone()
                }
            })
            .collect();
        let m1 = evalkit::aggregate_cmos(&parsed, "A")?.mean;
        let m2 = evalkit::aggregate_cmos(&swapped, "A")?.mean;
        ensure!(m1 == -m2, "file {f}: {m1} vs {m2}");
    }

    ensure!(evalkit::format_mean_std(4.65, 0.56) == "4.65 +- 0.56", "format");
    let table_row: Vec<RatingRecord> = [4.0, 5.0, 5.0]
        .iter()
        .map(|v| rating("l", "u", RatingKind::Mos, *v, None, None))
        .collect();
    let f = evalkit::aggregate_mos(&table_row)?.formatted;
    ensure!(f == "4.67 +- 0.58", "formatted {f:?}");
    Ok("crafted MOS/CMOS exact to 1e-9, 1000 files antisymmetric, \"4.65 +- 0.56\" style".into())
}

// ---------------------------------------------------------------- 10

fn recipe_matrix(shared: &Shared) -> Result<String> {
    let dir = shared.dir.path().join("matrix");
    std::fs::create_dir_all(&dir)?;
    let f = |n: &str| -> Result<PathBuf> {
        let p = dir.join(n);
        std::fs::write(&p, "")?;
        Ok(p)
    };
    let m = MatrixManifests {
        english: f("english.jsonl")?,
        pooled: f("pooled.jsonl")?,
        primary: f("primary.jsonl")?,
        primary_hindi: f("primary_hi.jsonl")?,
        primary_3h: f("primary_3h.jsonl")?,
    };
    let out = dir.join("runs");
    let specs = plan_paper_matrix(&m, &out, &ToolkitConfig::default(), 10)?;
    ensure!(specs.len() == 12, "{} specs", specs.len());
    let eng = out.join("eng-pretrain").join("final.safetensors");
    let mix = out.join("mix-pretrain").join("final.safetensors");
    let emb = vec!["encoder.embedding".to_string()];
    let none: Vec<String> = Vec::new();
    let enc = vec!["encoder.".to_string()];
    let enc_spk = vec!["encoder.".to_string(), "speaker.".to_string()];
    use SpeakerPolicy::*;
    // (name, manifest, policy, init, freeze, drop)
    let expected: Vec<(&str, &Path, Option<SpeakerPolicy>, &Path, &Vec<String>, &Vec<String>)> = vec![
        ("single-hi.eng-warmstart", &m.primary_hindi, None, &eng, &none, &emb),
        ("single-hi.mix-warmstart", &m.primary_hindi, None, &mix, &enc, &none),
        ("single-hien.eng-warmstart", &m.primary, None, &eng, &none, &emb),
        ("single-hien.mix-warmstart", &m.primary, None, &mix, &enc, &none),
        ("multi-audio-hien.eng-warmstart", &m.pooled, Some(AudioEmbed), &eng, &none, &emb),
        ("multi-audio-hien.mix-warmstart", &m.pooled, Some(AudioEmbed), &mix, &enc_spk, &none),
        ("multi-avg-hien.eng-warmstart", &m.pooled, Some(AvgEmbed), &eng, &none, &emb),
        ("multi-avg-hien.mix-warmstart", &m.pooled, Some(AvgEmbed), &mix, &enc_spk, &none),
        ("adapt.eng-warmstart.3h", &m.primary_3h, None, &eng, &none, &emb),
        ("adapt.mix-warmstart.3h", &m.primary_3h, None, &mix, &none, &none),
        ("adapt.mix-warmstart.frozen.3h", &m.primary_3h, None, &mix, &enc, &none),
        ("adapt.mix-warmstart.frozen.15h", &m.primary, None, &mix, &enc, &none),
    ];
    for (s, (name, manifest, policy, init, freeze, drop)) in specs.iter().zip(&expected) {
        ensure!(s.name == *name, "got {} where {name} was expected", s.name);
        ensure!(s.stage == Stage::Finetune, "{name}: stage {:?}", s.stage);
        ensure!(s.manifest == *manifest, "{name}: manifest {}", s.manifest.display());
        ensure!(s.speaker_policy == *policy, "{name}: policy {:?}", s.speaker_policy);
        ensure!(s.init_from.as_deref() == Some(*init), "{name}: init {:?}", s.init_from);
        ensure!(s.freeze == **freeze, "{name}: freeze {:?}", s.freeze);
        ensure!(s.drop_on_load == **drop, "{name}: drop {:?}", s.drop_on_load);
        s.validate()?;
    }
    Ok("8 grid + 4 adaptation specs with expected manifests, warm starts, freeze and drop sets".into())
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let mut shared = Shared {
        dir: tempfile::tempdir().expect("temp dir"),
        taco: None,
        vocoder: None,
        sentences: Vec::new(),
    };
    let mut results: Vec<(usize, &str, Result<String>)> = Vec::new();
    results.push((1, "text pipeline closure", text_pipeline_closure()));
    results.push((2, "mel front end", mel_front_end()));
    results.push((3, "spectrogen gradient check", gradient_check()));
    results.push((4, "tiny-data overfit", tiny_overfit(&mut shared)));
    results.push((5, "speaker fusion", speaker_fusion(&shared)));
    results.push((6, "surgery + freeze", surgery_and_freeze(&shared)));
    results.push((7, "waveglow", waveglow(&mut shared)));
    results.push((8, "end-to-end synth", end_to_end(&shared)));
    results.push((9, "evalkit", evalkit_criterion(&shared)));
    results.push((10, "recipe matrix", recipe_matrix(&shared)));

    let mut failed = Vec::new();
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(e) => {
                println!("criterion {n:>2} FAIL  {name}: {e:#}");
                failed.push(*n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
