//! Utterance manifests.
//!
//! A manifest is a JSON-lines file, one [`UtteranceRecord`] per line, plus a
//! sidecar `<stem>.summary.json` holding the sample rate, provenance and
//! duration totals. Every set operation here is pure and seed-deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audiofe::wav_header;
use crate::rng::{self, SHUFFLE_ALGORITHM};
use crate::textnorm::{self, TransliterationProvider};

/// Allowed gap between a record's duration and its audio file.
pub const DURATION_TOLERANCE_S: f64 = 0.010;

const SUM_SLACK_S: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("duplicate utterance ids: {}", .0.join(", "))]
    IdCollision(Vec<String>),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("target duration {target_s:.3} s exceeds corpus total {total_s:.3} s")]
    TargetExceeds { target_s: f64, total_s: f64 },
    #[error("unknown speaker {speaker:?}; known speakers: {}", .known.join(", "))]
    UnknownSpeaker { speaker: String, known: Vec<String> },
    #[error("validation fraction must be in (0, 0.5), got {0}")]
    InvalidFraction(f64),
    #[error("record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("record {id:?}: duration {manifest_s:.4} s but audio holds {audio_s:.4} s")]
    DurationMismatch {
        id: String,
        manifest_s: f64,
        audio_s: f64,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("audio: {0}")]
    Audio(#[from] crate::audiofe::AudioError),
    #[error("text normalization of {id:?}: {source}")]
    Text {
        id: String,
        #[source]
        source: textnorm::TextnormError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Hi,
    En,
}

impl Lang {
    pub fn as_str(&self) -> &'static str {
        match self {
            Lang::Hi => "hi",
            Lang::En => "en",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    #[serde(rename = "audio")]
    pub audio_path: String,
    pub text: String,
    #[serde(rename = "lang")]
    pub source_lang: Lang,
    #[serde(rename = "speaker")]
    pub speaker_id: String,
    pub duration_s: f64,
    #[serde(default)]
    pub split: Split,
}

impl UtteranceRecord {
    /// Checks the invariants that do not need the audio file.
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.validate_structure()?;
        if textnorm::has_latin_letter(&self.text) {
            return Err(CorpusError::InvalidRecord {
                id: self.id.clone(),
                reason: "text contains Latin letters; run it through textnorm first".into(),
            });
        }
        Ok(())
    }

    /// Everything [`validate`](Self::validate) checks except the script of
    /// the text. Roman-script pre-training corpora are held to this.
    pub fn validate_structure(&self) -> Result<(), CorpusError> {
        let bad = |reason: &str| {
            Err(CorpusError::InvalidRecord {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.id.is_empty() {
            return bad("empty id");
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if self.speaker_id.is_empty() {
            return bad("empty speaker id");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub records: Vec<UtteranceRecord>,
    pub sample_rate_hz: u32,
    pub created_from: Vec<String>,
}

/// Totals written beside a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub sample_rate_hz: u32,
    pub created_from: Vec<String>,
    pub n_records: usize,
    pub total_s: f64,
    pub lang_seconds: BTreeMap<String, f64>,
    pub lang_fractions: BTreeMap<String, f64>,
    pub speaker_seconds: BTreeMap<String, f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub shuffle_algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CorpusManifest {
    pub fn new(records: Vec<UtteranceRecord>, sample_rate_hz: u32, created_from: Vec<String>) -> Result<Self, CorpusError> {
        let m = Self {
            records,
            sample_rate_hz,
            created_from,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.check_records(UtteranceRecord::validate)
    }

    /// Manifest whose text is Roman script (English pre-training data).
    pub fn new_roman(records: Vec<UtteranceRecord>, sample_rate_hz: u32, created_from: Vec<String>) -> Result<Self, CorpusError> {
        let m = Self {
            records,
            sample_rate_hz,
            created_from,
        };
        m.check_records(UtteranceRecord::validate_structure)?;
        Ok(m)
    }

    fn check_records(&self, check: impl Fn(&UtteranceRecord) -> Result<(), CorpusError>) -> Result<(), CorpusError> {
        let mut seen = BTreeSet::new();
        let mut dups = BTreeSet::new();
        for r in &self.records {
            check(r)?;
            if !seen.insert(r.id.as_str()) {
                dups.insert(r.id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(CorpusError::IdCollision(dups.into_iter().collect()));
        }
        Ok(())
    }

    pub fn total_duration_s(&self) -> f64 {
        self.records.iter().map(|r| r.duration_s).sum()
    }

    pub fn speakers(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.speaker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn summary(&self, seed: Option<u64>) -> ManifestSummary {
        let total_s = self.total_duration_s();
        let mut lang_seconds = BTreeMap::new();
        let mut speaker_seconds = BTreeMap::new();
        for r in &self.records {
            *lang_seconds.entry(r.source_lang.as_str().to_string()).or_insert(0.0) += r.duration_s;
            *speaker_seconds.entry(r.speaker_id.clone()).or_insert(0.0) += r.duration_s;
        }
        let lang_fractions = lang_seconds
            .iter()
            .map(|(k, v)| (k.clone(), if total_s > 0.0 { v / total_s } else { 0.0 }))
            .collect();
        let n_val = self.records.iter().filter(|r| r.split == Split::Val).count();
        ManifestSummary {
            sample_rate_hz: self.sample_rate_hz,
            created_from: self.created_from.clone(),
            n_records: self.records.len(),
            total_s,
            lang_seconds,
            lang_fractions,
            speaker_seconds,
            n_train: self.records.len() - n_val,
            n_val,
            shuffle_algorithm: SHUFFLE_ALGORITHM.to_string(),
            seed,
        }
    }

    /// Records with the given language, as a new manifest.
    pub fn filter_lang(&self, lang: Lang) -> CorpusManifest {
        CorpusManifest {
            records: self.records.iter().filter(|r| r.source_lang == lang).cloned().collect(),
            sample_rate_hz: self.sample_rate_hz,
            created_from: self.created_from.clone(),
        }
    }

    pub fn train_records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn val_records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(|r| r.split == Split::Val)
    }

    /// Compares each record's duration with its WAV header. Relative audio
    /// paths resolve against `root`.
    pub fn validate_audio(&self, root: &Path) -> Result<(), CorpusError> {
        for r in &self.records {
            let (frames, rate) = wav_header(&resolve_path(root, &r.audio_path))?;
            let audio_s = frames as f64 / rate as f64;
            if (audio_s - r.duration_s).abs() > DURATION_TOLERANCE_S {
                return Err(CorpusError::DurationMismatch {
                    id: r.id.clone(),
                    manifest_s: r.duration_s,
                    audio_s,
                });
            }
        }
        Ok(())
    }
}

pub fn resolve_path(root: &Path, audio: &str) -> PathBuf {
    let p = Path::new(audio);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Multiset union of manifests. Ids must be disjoint and rates equal.
pub fn pool(manifests: &[CorpusManifest]) -> Result<CorpusManifest, CorpusError> {
    let Some(first) = manifests.first() else {
        return Ok(CorpusManifest {
            records: Vec::new(),
            sample_rate_hz: crate::config::AudioConfig::default().sample_rate,
            created_from: Vec::new(),
        });
    };
    if let Some(m) = manifests.iter().find(|m| m.sample_rate_hz != first.sample_rate_hz) {
        return Err(CorpusError::RateMismatch(first.sample_rate_hz, m.sample_rate_hz));
    }
    let records: Vec<UtteranceRecord> =
        manifests.iter().flat_map(|m| m.records.iter().cloned()).collect();
    let created_from = manifests.iter().flat_map(|m| m.created_from.iter().cloned()).collect();
    CorpusManifest::new(records, first.sample_rate_hz, created_from)
}

/// Draws records in seeded-shuffle order until the running duration first
/// reaches `target_s`. Output keeps the input order.
pub fn subset_by_duration(
    manifest: &CorpusManifest,
    target_s: f64,
    seed: u64,
) -> Result<CorpusManifest, CorpusError> {
    let total_s = manifest.total_duration_s();
    if !(target_s >= 0.0) || target_s > total_s + SUM_SLACK_S * (1.0 + total_s) {
        return Err(CorpusError::TargetExceeds { target_s, total_s });
    }
    let order = rng::permutation(manifest.records.len(), seed);
    let mut take = vec![false; manifest.records.len()];
    let mut acc = 0.0;
    let slack = SUM_SLACK_S * (1.0 + total_s);
    for &i in &order {
        if acc >= target_s - slack {
            break;
        }
        take[i] = true;
        acc += manifest.records[i].duration_s;
    }
    Ok(CorpusManifest {
        records: manifest
            .records
            .iter()
            .zip(&take)
            .filter(|(_, t)| **t)
            .map(|(r, _)| r.clone())
            .collect(),
        sample_rate_hz: manifest.sample_rate_hz,
        created_from: manifest.created_from.clone(),
    })
}

/// Speaker-stratified train/validation split. Every speaker with at least
/// two records gets at least one validation record and keeps at least one
/// training record.
pub fn split(manifest: &CorpusManifest, val_fraction: f64, seed: u64) -> Result<CorpusManifest, CorpusError> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(CorpusError::InvalidFraction(val_fraction));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_speaker.entry(r.speaker_id.as_str()).or_default().push(i);
    }
    let mut rng = rng::seeded(seed);
    let mut is_val = vec![false; manifest.records.len()];
    for indices in by_speaker.values_mut() {
        let n = indices.len();
        let mut n_val = (n as f64 * val_fraction).round() as usize;
        if n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        }
        rng::shuffle(indices, &mut rng);
        for &i in indices.iter().take(n_val) {
            is_val[i] = true;
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(is_val)
        .map(|(r, v)| UtteranceRecord {
            split: if v { Split::Val } else { Split::Train },
            ..r.clone()
        })
        .collect();
    Ok(CorpusManifest {
        records,
        sample_rate_hz: manifest.sample_rate_hz,
        created_from: manifest.created_from.clone(),
    })
}

pub fn speaker_view(manifest: &CorpusManifest, speaker_id: &str) -> Result<CorpusManifest, CorpusError> {
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.speaker_id == speaker_id)
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(CorpusError::UnknownSpeaker {
            speaker: speaker_id.to_string(),
            known: manifest.speakers(),
        });
    }
    Ok(CorpusManifest {
        records,
        sample_rate_hz: manifest.sample_rate_hz,
        created_from: manifest.created_from.clone(),
    })
}

/// Sidecar path: `train.jsonl` → `train.summary.json`.
pub fn summary_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("summary.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the JSON-lines manifest and its summary sidecar.
pub fn save_manifest(manifest: &CorpusManifest, path: &Path, seed: Option<u64>) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    let summary = summary_path(path);
    std::fs::write(
        &summary,
        serde_json::to_string_pretty(&manifest.summary(seed)).expect("summary serializes"),
    )
    .map_err(io_err(&summary))
}

/// Reads a manifest. Without a sidecar the sample rate falls back to
/// `default_rate` and the file name becomes the provenance id.
pub fn load_manifest(path: &Path, default_rate: u32) -> Result<CorpusManifest, CorpusError> {
    let (records, rate, created_from) = read_manifest_parts(path, default_rate)?;
    CorpusManifest::new(records, rate, created_from)
}

/// Like [`load_manifest`] but accepts Roman-script text.
pub fn load_roman_manifest(path: &Path, default_rate: u32) -> Result<CorpusManifest, CorpusError> {
    let (records, rate, created_from) = read_manifest_parts(path, default_rate)?;
    CorpusManifest::new_roman(records, rate, created_from)
}

type ManifestParts = (Vec<UtteranceRecord>, u32, Vec<String>);

fn read_manifest_parts(path: &Path, default_rate: u32) -> Result<ManifestParts, CorpusError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    let sidecar = summary_path(path);
    let (rate, created_from) = match std::fs::read_to_string(&sidecar) {
        Ok(text) => {
            let s: ManifestSummary = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
                path: sidecar.display().to_string(),
                line: 0,
                message: e.to_string(),
            })?;
            (s.sample_rate_hz, s.created_from)
        }
        Err(_) => (
            default_rate,
            vec![path.file_stem().unwrap_or_default().to_string_lossy().into_owned()],
        ),
    };
    Ok((records, rate, created_from))
}

/// One line of a corpus source list: `id<TAB>wav<TAB>lang<TAB>speaker<TAB>raw text`.
#[derive(Debug, Clone)]
pub struct SourceEntry {
    pub id: String,
    pub audio: String,
    pub lang: Lang,
    pub speaker: String,
    pub text: String,
}

pub fn parse_source_list(text: &str) -> Result<Vec<SourceEntry>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.splitn(5, '\t').collect();
        let parse_err = |message: String| CorpusError::Parse {
            path: "<source list>".into(),
            line: i + 1,
            message,
        };
        if cols.len() != 5 {
            return Err(parse_err("expected 5 tab-separated columns".into()));
        }
        let lang = match cols[2] {
            "hi" => Lang::Hi,
            "en" => Lang::En,
            other => return Err(parse_err(format!("unknown language {other:?}"))),
        };
        out.push(SourceEntry {
            id: cols[0].to_string(),
            audio: cols[1].to_string(),
            lang,
            speaker: cols[3].to_string(),
            text: cols[4].to_string(),
        });
    }
    Ok(out)
}

/// Builds a manifest from source entries: text goes through textnorm and
/// durations come from the WAV headers.
pub fn build_manifest(
    entries: &[SourceEntry],
    root: &Path,
    sample_rate_hz: u32,
    provider: &TransliterationProvider,
    source_id: &str,
) -> Result<CorpusManifest, CorpusError> {
    let records = entries
        .iter()
        .map(|e| {
            let (frames, rate) = wav_header(&resolve_path(root, &e.audio))?;
            let text = textnorm::normalize(&e.text, provider)
                .map_err(|source| CorpusError::Text {
                    id: e.id.clone(),
                    source,
                })?
                .devanagari;
            Ok(UtteranceRecord {
                id: e.id.clone(),
                audio_path: e.audio.clone(),
                text,
                source_lang: e.lang,
                speaker_id: e.speaker.clone(),
                duration_s: frames as f64 / rate as f64,
                split: Split::Train,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    CorpusManifest::new(records, sample_rate_hz, vec![source_id.to_string()])
}
