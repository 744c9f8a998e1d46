//! Speaker embeddings: extractor adapters, per-speaker averaging and the
//! two lookup policies.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use comix_core::audiofe::{load_wav, write_wav, AudioClip};
use comix_core::corpus::{resolve_path, CorpusManifest, UtteranceRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EmbeddingSource {
    Audio,
    Average,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f32>,
    pub source: EmbeddingSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
}

impl SpeakerEmbedding {
    fn check(self, dim: usize) -> Result<Self> {
        if self.vector.len() != dim {
            return Err(ModelError::Speaker(format!(
                "embedding has {} entries, expected {dim}",
                self.vector.len()
            )));
        }
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("speaker embedding"));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpeakerPolicy {
    /// One embedding per utterance, computed from its audio.
    #[serde(rename = "AUDIO_EMBED")]
    AudioEmbed,
    /// The speaker's averaged embedding from the table.
    #[serde(rename = "AVG_EMBED")]
    AvgEmbed,
}

impl std::fmt::Display for SpeakerPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AudioEmbed => "AUDIO_EMBED",
            Self::AvgEmbed => "AVG_EMBED",
        })
    }
}

/// A clip handed to an extractor. `key` identifies it for caching and for
/// the stub; `path` lets file-based extractors skip a temporary copy.
#[derive(Debug, Clone, Copy)]
pub struct ClipRef<'a> {
    pub key: &'a str,
    pub clip: &'a AudioClip,
    pub path: Option<&'a Path>,
}

pub trait SpeakerExtractor: Send + Sync {
    /// Identity recorded in checkpoints and used as the cache namespace.
    fn version(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, clip: ClipRef<'_>) -> Result<SpeakerEmbedding>;
}

/// Content key for clips that have no utterance id.
pub fn clip_key(clip: &AudioClip) -> String {
    let mut h = Sha256::new();
    h.update(clip.sample_rate.to_le_bytes());
    for s in &clip.samples {
        h.update(s.to_le_bytes());
    }
    format!("sha256:{}", crate::nn::hex(&h.finalize()))
}

/// Checks the duration precondition, then runs the extractor.
pub fn extract(clip: ClipRef<'_>, extractor: &dyn SpeakerExtractor, min_clip_s: f64) -> Result<SpeakerEmbedding> {
    let dur = clip.clip.duration_s();
    if dur < min_clip_s {
        return Err(ModelError::Speaker(format!(
            "clip {} lasts {dur:.3} s; the extractor needs at least {min_clip_s} s",
            clip.key
        )));
    }
    extractor.embed(clip)?.check(extractor.dim())
}

/// Deterministic stand-in: each entry comes from SHA-256 of
/// `seed ‖ key ‖ index`, mapped to [-1, 1), and the vector is unit-normalised.
#[derive(Debug, Clone)]
pub struct StubExtractor {
    pub seed: u64,
    pub dim: usize,
}

pub fn stub_vector(seed: u64, key: &str, dim: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..dim as u64)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(key.as_bytes());
            h.update(i.to_le_bytes());
            let d = h.finalize();
            let u = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
            (u >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    raw.iter().map(|v| (v / norm) as f32).collect()
}

impl SpeakerExtractor for StubExtractor {
    fn version(&self) -> String {
        format!("stub-v1-seed{}-dim{}", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, clip: ClipRef<'_>) -> Result<SpeakerEmbedding> {
        Ok(SpeakerEmbedding {
            vector: stub_vector(self.seed, clip.key, self.dim),
            source: EmbeddingSource::Stub,
            speaker_id: None,
        })
    }
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A long-running subprocess speaking a line protocol: one WAV path per
/// input line, one line of whitespace-separated reals per answer.
pub struct ExternalExtractor {
    command: Vec<String>,
    dim: usize,
    pipe: Mutex<Option<Pipe>>,
    scratch: PathBuf,
}

impl ExternalExtractor {
    pub fn new(command: &str, dim: usize) -> Result<Self> {
        let command: Vec<String> = command.split_whitespace().map(String::from).collect();
        if command.is_empty() {
            return Err(ModelError::Speaker("external extractor command is empty".into()));
        }
        let scratch = std::env::temp_dir().join(format!("comix-xvec-{}", std::process::id()));
        Ok(Self {
            command,
            dim,
            pipe: Mutex::new(None),
            scratch,
        })
    }

    fn spawn(&self) -> Result<Pipe> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| ModelError::Speaker(format!("extractor unavailable ({}): {e}", self.command[0])))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        Ok(Pipe { child, stdin, stdout })
    }

    fn query(&self, path: &Path) -> Result<Vec<f32>> {
        let mut guard = self.pipe.lock().expect("extractor lock");
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let pipe = guard.as_mut().expect("spawned");
        let broken = |e: std::io::Error| ModelError::Speaker(format!("extractor pipe: {e}"));
        writeln!(pipe.stdin, "{}", path.display()).map_err(broken)?;
        pipe.stdin.flush().map_err(broken)?;
        let mut line = String::new();
        if pipe.stdout.read_line(&mut line).map_err(broken)? == 0 {
            *guard = None;
            return Err(ModelError::Speaker("extractor closed its output".into()));
        }
        line.split_whitespace()
            .map(|t| {
                t.parse::<f32>()
                    .map_err(|_| ModelError::Speaker(format!("extractor returned a non-number {t:?}")))
            })
            .collect()
    }
}

impl Drop for ExternalExtractor {
    fn drop(&mut self) {
        if let Ok(mut g) = self.pipe.lock() {
            if let Some(mut p) = g.take() {
                let _ = p.child.kill();
                let _ = p.child.wait();
            }
        }
        let _ = std::fs::remove_dir_all(&self.scratch);
    }
}

impl SpeakerExtractor for ExternalExtractor {
    fn version(&self) -> String {
        format!("external:{}", self.command.join(" "))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, clip: ClipRef<'_>) -> Result<SpeakerEmbedding> {
        let vector = match clip.path {
            Some(p) => self.query(p)?,
            None => {
                std::fs::create_dir_all(&self.scratch).map_err(io_err(&self.scratch))?;
                let tmp = self.scratch.join(format!("{}.wav", sanitize(clip.key)));
                write_wav(&tmp, clip.clip)?;
                let v = self.query(&tmp);
                let _ = std::fs::remove_file(&tmp);
                v?
            }
        };
        Ok(SpeakerEmbedding {
            vector,
            source: EmbeddingSource::Audio,
            speaker_id: None,
        })
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Per-utterance embeddings on disk, namespaced by extractor version.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: &Path, extractor_version: &str) -> Self {
        Self {
            dir: root.join(sanitize(extractor_version)),
        }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{}.json", sanitize(key)))
    }

    pub fn get(&self, key: &str) -> Option<SpeakerEmbedding> {
        let text = std::fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, key: &str, e: &SpeakerEmbedding) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let p = self.path(key);
        std::fs::write(&p, serde_json::to_string(e)?).map_err(io_err(&p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub vector: Vec<f32>,
    pub count: usize,
}

/// `{speaker_id: {vector, count}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingTable {
    pub entries: BTreeMap<String, TableEntry>,
}

impl EmbeddingTable {
    pub fn get(&self, speaker_id: &str) -> Result<SpeakerEmbedding> {
        let e = self
            .entries
            .get(speaker_id)
            .ok_or_else(|| ModelError::UnseenSpeaker(speaker_id.to_string()))?;
        Ok(SpeakerEmbedding {
            vector: e.vector.clone(),
            source: EmbeddingSource::Average,
            speaker_id: Some(speaker_id.to_string()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let t: Self = serde_json::from_str(&text)?;
        if let Some(dim) = t.entries.values().next().map(|e| e.vector.len()) {
            if t.entries.values().any(|e| e.vector.len() != dim) {
                return Err(ModelError::Speaker("table vectors differ in width".into()));
            }
        }
        Ok(t)
    }

    /// Arithmetic mean of each speaker's vectors, accumulated in f64.
    pub fn from_vectors<'a>(items: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Result<Self> {
        let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for (spk, v) in items {
            let slot = acc.entry(spk.to_string()).or_insert_with(|| (vec![0.0; v.len()], 0));
            if slot.0.len() != v.len() {
                return Err(ModelError::Speaker(format!("speaker {spk}: vectors differ in width")));
            }
            for (a, x) in slot.0.iter_mut().zip(v) {
                *a += *x as f64;
            }
            slot.1 += 1;
        }
        let entries = acc
            .into_iter()
            .map(|(k, (sum, n))| {
                let vector = sum.iter().map(|s| (s / n as f64) as f32).collect();
                (k, TableEntry { vector, count: n })
            })
            .collect();
        Ok(Self { entries })
    }
}

/// Loads, caches and embeds every record's audio.
pub struct RecordEmbedder<'a> {
    pub root: &'a Path,
    pub sample_rate: u32,
    pub extractor: &'a dyn SpeakerExtractor,
    pub cache: Option<EmbeddingCache>,
    pub min_clip_s: f64,
}

impl RecordEmbedder<'_> {
    pub fn embed(&self, r: &UtteranceRecord) -> Result<SpeakerEmbedding> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&r.id)) {
            if hit.vector.len() == self.extractor.dim() {
                return Ok(hit);
            }
        }
        let path = resolve_path(self.root, &r.audio_path);
        let clip = load_wav(&path, Some(self.sample_rate))?;
        let e = extract(
            ClipRef {
                key: &r.id,
                clip: &clip,
                path: Some(&path),
            },
            self.extractor,
            self.min_clip_s,
        )?;
        if let Some(c) = &self.cache {
            c.put(&r.id, &e)?;
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TableReport {
    /// `(utterance id, reason)` for records that could not be embedded.
    pub skipped: Vec<(String, String)>,
}

/// Averages per-utterance embeddings per speaker. Unreadable records are
/// skipped and reported; a speaker left with none is an error.
pub fn build_table(manifest: &CorpusManifest, embedder: &RecordEmbedder<'_>) -> Result<(EmbeddingTable, TableReport)> {
    let mut vectors = Vec::new();
    let mut report = TableReport::default();
    for r in &manifest.records {
        match embedder.embed(r) {
            Ok(e) => vectors.push((r.speaker_id.as_str(), e.vector)),
            Err(e @ (ModelError::Audio(_) | ModelError::Speaker(_))) => report.skipped.push((r.id.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let table = EmbeddingTable::from_vectors(vectors.iter().map(|(s, v)| (*s, v.as_slice())))?;
    let missing: Vec<String> = manifest
        .speakers()
        .into_iter()
        .filter(|s| !table.entries.contains_key(s))
        .collect();
    if !missing.is_empty() {
        return Err(ModelError::Speaker(format!(
            "no readable audio for speaker(s) {}",
            missing.join(", ")
        )));
    }
    Ok((table, report))
}

/// What the caller knows about the target voice.
#[derive(Debug, Clone, Copy)]
pub enum SpeakerQuery<'a> {
    Id(&'a str),
    Audio(ClipRef<'a>),
    /// A training record with its loaded audio.
    Record(&'a UtteranceRecord, ClipRef<'a>),
}

pub fn lookup(
    policy: SpeakerPolicy,
    query: SpeakerQuery<'_>,
    table: Option<&EmbeddingTable>,
    extractor: &dyn SpeakerExtractor,
    min_clip_s: f64,
) -> Result<SpeakerEmbedding> {
    match (policy, query) {
        (SpeakerPolicy::AvgEmbed, q) => {
            let id = match q {
                SpeakerQuery::Id(id) => id,
                SpeakerQuery::Record(r, _) => r.speaker_id.as_str(),
                SpeakerQuery::Audio(_) => {
                    return Err(ModelError::Speaker(
                        "avg-embed selects a speaker by id; reference audio is not used".into(),
                    ))
                }
            };
            let table = table.ok_or_else(|| ModelError::Speaker("avg-embed needs an embedding table".into()))?;
            table.get(id)
        }
        (SpeakerPolicy::AudioEmbed, SpeakerQuery::Audio(c)) => extract(c, extractor, min_clip_s),
        (SpeakerPolicy::AudioEmbed, SpeakerQuery::Record(r, c)) => {
            let mut e = extract(c, extractor, min_clip_s)?;
            e.speaker_id = Some(r.speaker_id.clone());
            Ok(e)
        }
        (SpeakerPolicy::AudioEmbed, SpeakerQuery::Id(_)) => Err(ModelError::Speaker(
            "audio-embed computes the embedding from reference audio; a speaker id is not enough".into(),
        )),
    }
}
