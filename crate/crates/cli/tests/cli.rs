use std::borrow::BorrowMut;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::{DType, Tensor};
use comix_core::config::save_config;
use comix_core::corpus::{load_manifest, save_manifest, CorpusManifest, Lang, Split};
use comix_core::textnorm::has_latin_letter;
use comix_core::{ToolkitConfig, UtteranceRecord};
use comix_models::checkpoint::{save, CheckpointMeta, SpeakerMeta};
use comix_models::speaker::{EmbeddingTable, SpeakerPolicy};
use comix_models::waveglow::Waveglow;
use comix_models::{toy, Tacotron, TacotronSpec, VocabKind};

fn comix(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_comix"));
    c.args(args).env_remove("COMIX_CONFIG");
    c
}

fn run(mut cmd: impl BorrowMut<Command>) -> Output {
    cmd.borrow_mut().output().expect("comix runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn record(id: &str, speaker: &str, lang: Lang, dur: f64) -> UtteranceRecord {
    UtteranceRecord {
        id: id.into(),
        audio_path: format!("{id}.wav"),
        text: "कमल".into(),
        source_lang: lang,
        speaker_id: speaker.into(),
        duration_s: dur,
        split: Split::Train,
    }
}

fn write_manifest(path: &Path, records: Vec<UtteranceRecord>) {
    save_manifest(&CorpusManifest::new(records, 22050, vec!["t".into()]).unwrap(), path, None).unwrap();
}

#[test]
fn config_from_flag_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.jsonl");
    write_manifest(&m, vec![record("a", "s", Lang::Hi, 1.0)]);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"version": "1", "audio": {"n_mel": 80}}"#).unwrap();
    let o = run(comix(&["--config", p(&bad), "corpus", "stats", "--manifest", p(&m)]));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("n_mel"), "{}", stderr(&o));
    let o = run(comix(&["corpus", "stats", "--manifest", p(&m)]).env("COMIX_CONFIG", &bad));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("n_mel"), "{}", stderr(&o));

    let unversioned = dir.path().join("nov.json");
    std::fs::write(&unversioned, r#"{"train": {"seed": 3}}"#).unwrap();
    let o = run(comix(&["--config", p(&unversioned), "corpus", "stats", "--manifest", p(&m)]));
    assert!(!o.status.success());

    // The effective config is echoed next to plan outputs.
    let mut cfg = ToolkitConfig::default();
    cfg.train.seed = 77;
    let good = dir.path().join("good.json");
    save_config(&cfg, &good).unwrap();
    let plan = |out: &Path, cmd: &mut Command| {
        cmd.args(["plan-matrix", "--out", p(out)]);
        for flag in ["--english", "--pooled", "--primary", "--primary-hindi", "--primary-3h"] {
            cmd.args([flag, p(&m)]);
        }
        let o = run(cmd);
        assert!(o.status.success(), "{}", stderr(&o));
        let echoed = std::fs::read_to_string(out.join("effective_config.json")).unwrap();
        ToolkitConfig::from_json_str(&echoed).unwrap()
    };
    let via_env = plan(&dir.path().join("p1"), comix(&[]).env("COMIX_CONFIG", &good));
    assert_eq!(via_env.train.seed, 77);
    let via_flag = plan(&dir.path().join("p2"), &mut comix(&["--config", p(&good)]));
    assert_eq!(via_flag, cfg);
    let defaults = plan(&dir.path().join("p3"), &mut comix(&[]));
    assert_eq!(defaults, ToolkitConfig::default());

    let order: Vec<PathBuf> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("p1/plan.json")).unwrap()).unwrap();
    assert_eq!(order.len(), 14);
    assert!(order.iter().all(|f| f.exists()));
}

#[test]
fn textnorm_writes_one_devanagari_line_per_input_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "aapke product की कीमत 499 रुपये है\nEMI option नहीं है\n\nhello").unwrap();
    let lexicon = dir.path().join("lex.tsv");
    std::fs::write(&lexicon, "product\tप्रोडक्ट\n").unwrap();
    let out = dir.path().join("out.txt");
    let o = run(comix(&["textnorm", "--in", p(&input), "--out", p(&out), "--lexicon", p(&lexicon)]));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("प्रोडक्ट"));
    assert_eq!(lines[2], "");
    assert!(!has_latin_letter(&text));
    assert!(!text.chars().any(|c| c.is_ascii_digit()));
}

#[test]
fn corpus_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_manifest(&a, (0..6).map(|i| record(&format!("a{i}"), "s1", Lang::Hi, 2.0)).collect());
    write_manifest(&b, (0..4).map(|i| record(&format!("b{i}"), "s2", Lang::En, 3.0)).collect());

    let pooled = dir.path().join("pooled.jsonl");
    let o = run(comix(&["corpus", "pool", "--manifest", p(&a), "--manifest", p(&b), "--out", p(&pooled)]));
    assert!(o.status.success(), "{}", stderr(&o));
    let m = load_manifest(&pooled, 22050).unwrap();
    assert_eq!(m.records.len(), 10);
    assert!((m.total_duration_s() - 24.0).abs() < 1e-9);

    let o = run(comix(&["corpus", "pool", "--manifest", p(&a), "--manifest", p(&a), "--out", p(&dir.path().join("x"))]));
    assert!(!o.status.success());

    let sub = dir.path().join("sub.jsonl");
    let target = (6.0 / 3600.0).to_string();
    let o = run(comix(&["corpus", "subset", "--manifest", p(&a), "--target-hours", &target, "--seed", "4", "--out", p(&sub)]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_manifest(&sub, 22050).unwrap().records.len(), 3);
    let o = run(comix(&["corpus", "subset", "--manifest", p(&a), "--target-hours", "1", "--out", p(&sub)]));
    assert!(!o.status.success());

    let split = dir.path().join("split.jsonl");
    let o = run(comix(&["corpus", "split", "--manifest", p(&pooled), "--val-fraction", "0.2", "--seed", "1", "--out", p(&split)]));
    assert!(o.status.success(), "{}", stderr(&o));
    let s = load_manifest(&split, 22050).unwrap();
    for spk in ["s1", "s2"] {
        assert!(s.records.iter().any(|r| r.speaker_id == spk && r.split == Split::Val));
    }

    let only = dir.path().join("only.jsonl");
    let o = run(comix(&["corpus", "filter", "--manifest", p(&split), "--lang", "en", "--out", p(&only)]));
    assert!(o.status.success(), "{}", stderr(&o));
    let f = load_manifest(&only, 22050).unwrap();
    assert_eq!(f.records.len(), 4);
    assert!(f.records.iter().all(|r| r.source_lang == Lang::En));
    let o = run(comix(&["corpus", "filter", "--manifest", p(&split), "--speaker", "nobody", "--out", p(&only)]));
    assert!(!o.status.success());

    let o = run(comix(&["corpus", "stats", "--manifest", p(&pooled)]));
    assert!(o.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["n_records"], 10);
    assert!((stats["lang_fractions"]["hi"].as_f64().unwrap() - 0.5).abs() < 1e-9);
}

#[test]
fn speaker_table_from_stub_extractor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy::toy_config();
    let m = toy::write_corpus(dir.path(), "t", &toy::DEVANAGARI_ALPHABET, 2, 3, 1, &cfg).unwrap();
    let manifest = dir.path().join("m.jsonl");
    save_manifest(&m, &manifest, None).unwrap();
    let cfg_path = dir.path().join("toy.json");
    save_config(&cfg, &cfg_path).unwrap();
    let table = dir.path().join("table.json");
    let o = run(comix(&["speaker", "build-table", "--manifest", p(&manifest), "--extractor", "stub", "--seed", "2", "--out", p(&table)])
        .env("COMIX_CONFIG", &cfg_path));
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&table).unwrap()).unwrap();
    let speakers = json.as_object().unwrap();
    assert_eq!(speakers.len(), 2);
    for entry in speakers.values() {
        assert_eq!(entry["count"], 3);
        assert_eq!(entry["vector"].as_array().unwrap().len(), cfg.speaker.embed_dim);
    }
    let o = run(comix(&["speaker", "build-table", "--manifest", p(&manifest), "--extractor", "external", "--out", p(&table)]));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--extractor-cmd"));
}

/// Saves a toy-sized model pair. `gate_bias` pins the stop gate: very
/// negative never stops, very positive stops after one frame.
fn write_models(dir: &Path, cfg: &ToolkitConfig, gate_bias: f32, speaker: Option<SpeakerMeta>) -> (PathBuf, PathBuf) {
    let spec = TacotronSpec::from_config(cfg, VocabKind::Devanagari, speaker.is_some());
    let taco = Tacotron::new(spec, DType::F32, 1).unwrap();
    let bias = "decoder.gate_proj.bias";
    let shape = taco.store().shape(bias).unwrap();
    taco.store()
        .assign(bias, &Tensor::full(gate_bias, shape, &candle_core::Device::Cpu).unwrap())
        .unwrap();
    let mut meta = CheckpointMeta::tacotron(cfg, taco.spec());
    meta.speaker = speaker;
    let tp = dir.join("taco.safetensors");
    save(&tp, taco.store(), &meta).unwrap();
    let voc = Waveglow::new(&cfg.waveglow, &cfg.audio, DType::F32, 2).unwrap();
    let vp = dir.join("voc.safetensors");
    save(&vp, voc.store(), &CheckpointMeta::waveglow(cfg)).unwrap();
    (tp, vp)
}

fn synth(taco: &Path, voc: &Path, out: &Path, extra: &[&str]) -> Command {
    let mut c = comix(&["synth", "--taco", p(taco), "--vocoder", p(voc), "--out", p(out)]);
    c.args(extra);
    c
}

fn decoder_frames(out: &Path) -> Vec<u64> {
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    r["items"].as_array().unwrap().iter().map(|i| i["decoder_frames"].as_u64().unwrap()).collect()
}

#[test]
fn synth_exit_codes_and_step_limit_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy::toy_config();
    cfg.decoder.max_steps = 3;
    let (taco, voc) = write_models(dir.path(), &cfg, -100.0, None);
    let out = |n: &str| dir.path().join(n);

    // The checkpoint's own config supplies the step limit.
    let o = run(synth(&taco, &voc, &out("ckpt"), &["--text", "कमल"]));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step limit"));
    assert_eq!(decoder_frames(&out("ckpt")), vec![3]);
    assert!(out("ckpt/utt.wav").exists());

    // An explicit config overrides it, and a flag overrides both.
    let mut explicit = toy::toy_config();
    explicit.decoder.max_steps = 5;
    let cfg_path = out("explicit.json");
    save_config(&explicit, &cfg_path).unwrap();
    let o = run(synth(&taco, &voc, &out("env"), &["--text", "कमल"]).env("COMIX_CONFIG", &cfg_path));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(decoder_frames(&out("env")), vec![5]);
    let o = run(synth(&taco, &voc, &out("flag"), &["--text", "कमल", "--max-steps", "2"]).env("COMIX_CONFIG", &cfg_path));
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(decoder_frames(&out("flag")), vec![2]);

    // A gate that fires at once gives a clean exit.
    let quick = out("quick");
    std::fs::create_dir_all(&quick).unwrap();
    let (taco_q, voc_q) = write_models(&quick, &cfg, 100.0, None);
    let o = run(synth(&taco_q, &voc_q, &out("q"), &["--text", "aapka product"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(decoder_frames(&out("q")), vec![1]);

    // One bad item in a batch: the rest are written and the exit code is 2.
    let items = out("items.jsonl");
    std::fs::write(&items, "{\"id\":\"good\",\"text\":\"कमल\"}\n{\"id\":\"bad\",\"text\":\"☃ ☃\"}\n").unwrap();
    let o = run(synth(&taco_q, &voc_q, &out("batch"), &["--manifest", p(&items)]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(out("batch/good.wav").exists());
    assert!(!out("batch/bad.wav").exists());

    // The same failure on its own is a plain error.
    let o = run(synth(&taco_q, &voc_q, &out("single"), &["--text", "☃"]));
    assert_eq!(o.status.code(), Some(1));

    // A single-speaker model refuses a speaker id.
    let o = run(synth(&taco_q, &voc_q, &out("spk"), &["--text", "कमल", "--speaker-id", "x"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("single-speaker"), "{}", stderr(&o));
}

#[test]
fn multi_speaker_synth_needs_a_known_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy::toy_config();
    let v: Vec<f32> = (0..cfg.speaker.embed_dim).map(|i| i as f32 / 10.0).collect();
    let table = EmbeddingTable::from_vectors([("spk", v.as_slice())]).unwrap();
    let meta = SpeakerMeta {
        policy: SpeakerPolicy::AvgEmbed,
        extractor: format!("stub-v1-seed0-dim{}", cfg.speaker.embed_dim),
        table: Some(table),
    };
    let (taco, voc) = write_models(dir.path(), &cfg, 100.0, Some(meta));
    let out = dir.path().join("out");
    let o = run(synth(&taco, &voc, &out, &["--text", "कमल"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("multi-speaker"), "{}", stderr(&o));
    let o = run(synth(&taco, &voc, &out, &["--text", "कमल", "--speaker-id", "other"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unseen speaker"), "{}", stderr(&o));
    let o = run(synth(&taco, &voc, &out, &["--text", "कमल", "--speaker-id", "spk"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn eval_session_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let items = dir.path().join("items.jsonl");
    std::fs::write(&items, "{\"id\":\"u1\",\"text\":\"क\"}\n{\"id\":\"u2\",\"text\":\"म\"}\n").unwrap();
    let session = dir.path().join("session.json");
    let o = run(comix(&["eval", "make-session", "--kind", "cmos", "--in", p(&items), "--systems", "ours,base", "--seed", "5", "--out", p(&session)]));
    assert!(o.status.success(), "{}", stderr(&o));
    let again = dir.path().join("again.json");
    run(comix(&["eval", "make-session", "--kind", "cmos", "--in", p(&items), "--systems", "ours,base", "--seed", "5", "--out", p(&again)]));
    assert_eq!(std::fs::read(&session).unwrap(), std::fs::read(&again).unwrap());

    let ratings = dir.path().join("r.csv");
    std::fs::write(
        &ratings,
        "listener,utterance,kind,value,first,second\nl1,u1,cmos,1,base,ours\nl2,u1,cmos,-1,ours,base\nl3,u2,cmos,7,ours,base\n",
    )
    .unwrap();
    let summary = dir.path().join("s.json");
    let o = run(comix(&["eval", "aggregate", "--kind", "cmos", "--in", p(&ratings), "--session", p(&session), "--out", p(&summary)]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "1.00 +- 0.00");
    assert!(stderr(&o).contains("rejected record 2"));
    let o = run(comix(&["eval", "aggregate", "--kind", "cmos", "--in", p(&ratings), "--out", p(&summary)]));
    assert!(!o.status.success());
}
