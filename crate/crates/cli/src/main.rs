use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use comix_core::config::{resolve_config, CONFIG_ENV};
use comix_core::corpus::{self, CorpusManifest, Lang};
use comix_core::evalkit::{self, RatingKind, TestItem};
use comix_core::textnorm::{load_lexicon, normalize, ExternalCommand};
use comix_core::{ToolkitConfig, TransliterationProvider};
use comix_models::recipes::{
    plan_paper_matrix, plan_pretraining, run_recipe, train_vocoder, ExtractorSpec, MatrixManifests, RecipeSpec,
    VocoderSpec,
};
use comix_models::speaker::{build_table, EmbeddingCache, RecordEmbedder};
use comix_models::synth::{batch_synthesize, SpeakerArg, SynthOptions, Synthesizer};

/// Exit status when at least one utterance hit the decoder step limit.
const EXIT_TRUNCATED: u8 = 3;
/// Exit status when some batch items failed and the rest were written.
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "comix", version, about = "Code-mixed Hindi-English text-to-speech toolkit")]
struct Cli {
    /// JSON config; defaults apply to anything it leaves out.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize mixed-script text (one sentence per line) to Devanagari.
    Textnorm(TextnormArgs),
    #[command(subcommand)]
    Corpus(CorpusCmd),
    #[command(subcommand)]
    Speaker(SpeakerCmd),
    /// Run one spectrogram-model training recipe.
    Train {
        #[arg(long)]
        recipe: PathBuf,
    },
    /// Train the vocoder from a recipe.
    TrainVocoder {
        #[arg(long)]
        recipe: PathBuf,
    },
    /// Write the recipe files for pre-training and the full experiment matrix.
    PlanMatrix(PlanArgs),
    /// Synthesize speech from text.
    Synth(SynthArgs),
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Args)]
struct ProviderArgs {
    /// `latin<TAB>devanagari` lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Line-protocol transliteration command.
    #[arg(long)]
    provider_cmd: Option<String>,
}

impl ProviderArgs {
    fn provider(&self) -> Result<TransliterationProvider> {
        let mut p = TransliterationProvider::rules_only();
        if let Some(path) = &self.lexicon {
            p = p.with_lexicon(load_lexicon(path)?)?;
        }
        if let Some(cmd) = &self.provider_cmd {
            p = p.with_external(ExternalCommand::new(cmd.clone()));
        }
        Ok(p)
    }
}

#[derive(Args)]
struct TextnormArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Build a manifest from a `id<TAB>wav<TAB>lang<TAB>speaker<TAB>text` list.
    Build {
        #[arg(long)]
        sources: PathBuf,
        /// Base for relative WAV paths; defaults to the list's directory.
        #[arg(long)]
        audio_root: Option<PathBuf>,
        #[arg(long)]
        source_id: Option<String>,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Union of manifests with disjoint ids.
    Pool {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded duration-targeted subset.
    Subset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        target_hours: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speaker-stratified train/validation split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep one speaker and/or one source language.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        speaker: Option<String>,
        #[arg(long)]
        lang: Option<LangArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print totals and language fractions as JSON.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LangArg {
    Hi,
    En,
}

#[derive(Subcommand)]
enum SpeakerCmd {
    /// Average per-utterance embeddings into a speaker table.
    BuildTable {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        extractor: ExtractorKind,
        /// Command for `--extractor external`.
        #[arg(long)]
        extractor_cmd: Option<String>,
        /// Seed for `--extractor stub`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        audio_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorKind {
    External,
    Stub,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    out: PathBuf,
    /// Roman-script English manifest.
    #[arg(long)]
    english: PathBuf,
    /// All speakers, Devanagari.
    #[arg(long)]
    pooled: PathBuf,
    /// Primary speaker, Hindi and English.
    #[arg(long)]
    primary: PathBuf,
    /// Primary speaker, Hindi records only.
    #[arg(long)]
    primary_hindi: PathBuf,
    /// Primary speaker, 3 h subset.
    #[arg(long)]
    primary_3h: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    max_steps: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    text: Option<String>,
    /// JSON-lines with `id` and `text`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Utterance id for `--text`.
    #[arg(long, default_value = "utt")]
    id: String,
    #[arg(long)]
    taco: PathBuf,
    #[arg(long)]
    vocoder: PathBuf,
    #[arg(long, conflicts_with = "ref_audio")]
    speaker_id: Option<String>,
    #[arg(long)]
    ref_audio: Option<PathBuf>,
    /// Command of the speaker extractor used in training, for AUDIO_EMBED models.
    #[arg(long)]
    extractor_cmd: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Seeds prenet dropout and vocoder noise together with each utterance id.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Mos,
    Cmos,
}

impl From<KindArg> for RatingKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mos => RatingKind::Mos,
            KindArg::Cmos => RatingKind::Cmos,
        }
    }
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Randomized listening session for a test set.
    MakeSession {
        #[arg(long)]
        kind: KindArg,
        /// JSON-lines test items.
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated; for CMOS the first is the system under test.
        #[arg(long, value_delimiter = ',', required = true)]
        systems: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a ratings CSV into mean and std.
    Aggregate {
        #[arg(long)]
        kind: KindArg,
        #[arg(long = "in")]
        input: PathBuf,
        /// CMOS system under test; read from `--session` when omitted.
        #[arg(long)]
        ours: Option<String>,
        #[arg(long)]
        session: Option<PathBuf>,
        /// Unused; accepted so every eval command takes the same flags.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_any_manifest(path: &Path, cfg: &ToolkitConfig) -> Result<CorpusManifest> {
    let rate = cfg.audio.sample_rate;
    match corpus::load_manifest(path, rate) {
        Ok(m) => Ok(m),
        Err(first) => corpus::load_roman_manifest(path, rate)
            .map_err(|_| first)
            .with_context(|| format!("reading {}", path.display())),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn textnorm_cmd(a: &TextnormArgs) -> Result<()> {
    let provider = a.provider.provider()?;
    let input = std::fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    for (i, line) in std::io::BufReader::new(input).lines().enumerate() {
        let line = line?;
        let n = normalize(&line, &provider).with_context(|| format!("line {}", i + 1))?;
        writeln!(out, "{}", n.devanagari)?;
    }
    out.flush()?;
    Ok(())
}

fn corpus_cmd(cmd: &CorpusCmd, cfg: &ToolkitConfig) -> Result<()> {
    match cmd {
        CorpusCmd::Build {
            sources,
            audio_root,
            source_id,
            provider,
            out,
        } => {
            let text = std::fs::read_to_string(sources)?;
            let entries = corpus::parse_source_list(&text)?;
            let root = audio_root
                .clone()
                .or_else(|| sources.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            let id = source_id
                .clone()
                .unwrap_or_else(|| sources.file_stem().unwrap_or_default().to_string_lossy().into_owned());
            let m = corpus::build_manifest(&entries, &root, cfg.audio.sample_rate, &provider.provider()?, &id)?;
            corpus::save_manifest(&m, out, None)?;
        }
        CorpusCmd::Pool { manifests, out } => {
            let ms = manifests
                .iter()
                .map(|p| load_any_manifest(p, cfg))
                .collect::<Result<Vec<_>>>()?;
            corpus::save_manifest(&corpus::pool(&ms)?, out, None)?;
        }
        CorpusCmd::Subset {
            manifest,
            target_hours,
            seed,
            out,
        } => {
            let m = load_any_manifest(manifest, cfg)?;
            let sub = corpus::subset_by_duration(&m, target_hours * 3600.0, *seed)?;
            corpus::save_manifest(&sub, out, Some(*seed))?;
        }
        CorpusCmd::Split {
            manifest,
            val_fraction,
            seed,
            out,
        } => {
            let m = load_any_manifest(manifest, cfg)?;
            corpus::save_manifest(&corpus::split(&m, *val_fraction, *seed)?, out, Some(*seed))?;
        }
        CorpusCmd::Filter {
            manifest,
            speaker,
            lang,
            out,
        } => {
            let mut m = load_any_manifest(manifest, cfg)?;
            if let Some(s) = speaker {
                m = corpus::speaker_view(&m, s)?;
            }
            if let Some(l) = lang {
                m = m.filter_lang(match l {
                    LangArg::Hi => Lang::Hi,
                    LangArg::En => Lang::En,
                });
            }
            corpus::save_manifest(&m, out, None)?;
        }
        CorpusCmd::Stats { manifest, seed } => {
            let m = load_any_manifest(manifest, cfg)?;
            println!("{}", serde_json::to_string_pretty(&m.summary(*seed))?);
        }
    }
    Ok(())
}

fn speaker_cmd(cmd: &SpeakerCmd, cfg: &ToolkitConfig) -> Result<()> {
    let SpeakerCmd::BuildTable {
        manifest,
        extractor,
        extractor_cmd,
        seed,
        audio_root,
        out,
    } = cmd;
    let spec = match (extractor, extractor_cmd) {
        (ExtractorKind::Stub, _) => ExtractorSpec::Stub { seed: *seed },
        (ExtractorKind::External, Some(c)) => ExtractorSpec::External { command: c.clone() },
        (ExtractorKind::External, None) => bail!("--extractor external needs --extractor-cmd"),
    };
    let x = spec.open(cfg.speaker.embed_dim)?;
    let m = load_any_manifest(manifest, cfg)?;
    let root = audio_root
        .clone()
        .or_else(|| manifest.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let embedder = RecordEmbedder {
        root: &root,
        sample_rate: cfg.audio.sample_rate,
        extractor: x.as_ref(),
        cache: cfg
            .paths
            .embedding_cache
            .as_deref()
            .map(|c| EmbeddingCache::new(c, &x.version())),
        min_clip_s: cfg.speaker.min_clip_s,
    };
    let (table, report) = build_table(&m, &embedder)?;
    for (id, why) in &report.skipped {
        eprintln!("skipped {id}: {why}");
    }
    table.save(out)?;
    eprintln!("{} speakers, {} utterances skipped", table.len(), report.skipped.len());
    Ok(())
}

fn plan_cmd(a: &PlanArgs, cfg: &ToolkitConfig) -> Result<()> {
    let m = MatrixManifests {
        english: a.english.clone(),
        pooled: a.pooled.clone(),
        primary: a.primary.clone(),
        primary_hindi: a.primary_hindi.clone(),
        primary_3h: a.primary_3h.clone(),
    };
    let runs = a.out.join("runs");
    let mut specs = plan_pretraining(&m, &runs, cfg, a.max_steps)?;
    specs.extend(plan_paper_matrix(&m, &runs, cfg, a.max_steps)?);
    let dir = a.out.join("recipes");
    std::fs::create_dir_all(&dir)?;
    let mut order = Vec::with_capacity(specs.len());
    for s in &specs {
        let p = dir.join(format!("{}.json", s.name));
        s.save(&p)?;
        order.push(p);
    }
    // Run in this order: fine-tunes depend on the pre-training outputs.
    write_json(&a.out.join("plan.json"), &order)?;
    cfg.echo_to(&a.out)?;
    println!("{} recipes in {}", specs.len(), dir.display());
    Ok(())
}

fn synth_cmd(a: &SynthArgs, cfg: Option<&ToolkitConfig>) -> Result<ExitCode> {
    let extractor = a.extractor_cmd.clone().map(|command| ExtractorSpec::External { command });
    let synth = Synthesizer::load(&a.taco, &a.vocoder, a.provider.provider()?, extractor)?;
    // Explicit flags, then an explicit config, then the config the model was trained with.
    let base = SynthOptions::from_config(cfg.unwrap_or(synth.config()));
    let opts = SynthOptions {
        sigma: a.sigma.unwrap_or(base.sigma),
        max_steps: a.max_steps.unwrap_or(base.max_steps),
        seed: a.seed,
        ..base
    };
    let items = match (&a.text, &a.manifest) {
        (Some(t), _) => vec![TestItem {
            id: a.id.clone(),
            text: t.clone(),
        }],
        (None, Some(p)) => evalkit::load_test_items(p)?,
        (None, None) => bail!("give --text or --manifest"),
    };
    let speaker = match (&a.speaker_id, &a.ref_audio) {
        (Some(id), _) => Some(SpeakerArg::Id(id.clone())),
        (None, Some(p)) => Some(SpeakerArg::RefAudio(p.clone())),
        _ => None,
    };
    let report = batch_synthesize(&synth, &items, speaker.as_ref(), &opts, &a.out)?;
    cfg.unwrap_or(synth.config()).echo_to(&a.out)?;
    for (id, err) in &report.failures {
        eprintln!("{id}: {err}");
    }
    let truncated = report.truncated();
    for id in &truncated {
        eprintln!("{id}: decoder hit the step limit ({})", opts.max_steps);
    }
    eprintln!(
        "{} written, {} failed, {} truncated",
        report.items.len(),
        report.failures.len(),
        truncated.len()
    );
    // A single --text failure is a plain error.
    if a.text.is_some() {
        if let Some((_, err)) = report.failures.first() {
            bail!("{err}");
        }
    }
    Ok(if !report.failures.is_empty() {
        ExitCode::from(EXIT_PARTIAL)
    } else if !truncated.is_empty() {
        ExitCode::from(EXIT_TRUNCATED)
    } else {
        ExitCode::SUCCESS
    })
}

fn eval_cmd(cmd: &EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::MakeSession {
            kind,
            input,
            systems,
            seed,
            out,
        } => {
            let items = evalkit::load_test_items(input)?;
            let session = evalkit::make_session(&items, systems, (*kind).into(), *seed)?;
            write_json(out, &session)?;
        }
        EvalCmd::Aggregate {
            kind,
            input,
            ours,
            session,
            seed: _,
            out,
        } => {
            let records = evalkit::load_ratings(input)?;
            let summary = match kind {
                KindArg::Mos => evalkit::aggregate_mos(&records)?,
                KindArg::Cmos => {
                    let ours = match (ours, session) {
                        (Some(o), _) => o.clone(),
                        (None, Some(p)) => {
                            let s: evalkit::Session = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                            s.ours
                        }
                        (None, None) => bail!("CMOS aggregation needs --ours or --session"),
                    };
                    evalkit::aggregate_cmos(&records, &ours)?
                }
            };
            for r in &summary.rejected {
                eprintln!("rejected record {}: {}", r.index, r.reason);
            }
            println!("{}", summary.formatted);
            write_json(out, &summary)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = resolve_config(cli.config.as_deref()).context("loading config")?;
    match &cli.command {
        Command::Textnorm(a) => textnorm_cmd(a)?,
        Command::Corpus(c) => corpus_cmd(c, &cfg)?,
        Command::Speaker(c) => speaker_cmd(c, &cfg)?,
        Command::Train { recipe } => {
            let spec = RecipeSpec::load(recipe).with_context(|| format!("reading {}", recipe.display()))?;
            let report = run_recipe(&spec, &cfg)?;
            println!(
                "{}: {} steps, final checkpoint {}",
                report.recipe,
                report.steps.len(),
                report.final_checkpoint.display()
            );
        }
        Command::TrainVocoder { recipe } => {
            let text = std::fs::read_to_string(recipe)?;
            let spec: VocoderSpec = serde_json::from_str(&text)?;
            let report = train_vocoder(&spec, &cfg)?;
            println!("{}: final checkpoint {}", report.recipe, report.final_checkpoint.display());
        }
        Command::PlanMatrix(a) => plan_cmd(a, &cfg)?,
        Command::Synth(a) => {
            let explicit = cli.config.is_some() || std::env::var_os(CONFIG_ENV).is_some_and(|v| !v.is_empty());
            return synth_cmd(a, explicit.then_some(&cfg));
        }
        Command::Eval(c) => eval_cmd(c)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
