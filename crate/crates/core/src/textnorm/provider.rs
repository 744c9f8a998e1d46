use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{has_latin_letter, rules, TextnormError};

/// Which resolver produced a transliteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProviderKind {
    Lexicon,
    External,
    RuleFallback,
}

/// Line-protocol subprocess: one Latin token per input line, one Devanagari
/// string per output line, same order.
#[derive(Debug, Clone)]
pub struct ExternalCommand {
    pub command: String,
    pub timeout: Duration,
    /// Attempts per batch before falling back.
    pub attempts: usize,
}

impl ExternalCommand {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            timeout: Duration::from_secs(2),
            attempts: 2,
        }
    }

    fn run_once(&self, tokens: &[&str]) -> Result<Vec<String>, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawn failed: {e}"))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let payload: String = tokens.iter().map(|t| format!("{t}\n")).collect();
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(payload.as_bytes());
        });
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut buf = String::new();
            let res = stdout.read_to_string(&mut buf).map(|_| buf);
            let _ = tx.send(res);
        });
        let out = match rx.recv_timeout(self.timeout) {
            Ok(Ok(text)) => text,
            Ok(Err(e)) => {
                let _ = child.kill();
                return Err(format!("read failed: {e}"));
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("timed out after {:?}", self.timeout));
            }
        };
        let _ = writer.join();
        let status = child.wait().map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("exited with {status}"));
        }
        let lines: Vec<String> = out.lines().map(|l| l.trim().to_string()).collect();
        if lines.len() != tokens.len() {
            return Err(format!(
                "expected {} lines, got {}",
                tokens.len(),
                lines.len()
            ));
        }
        Ok(lines)
    }

    /// Runs the command, retrying on failure.
    pub fn transliterate_batch(&self, tokens: &[&str]) -> Result<Vec<String>, String> {
        let mut last = String::from("no attempts configured");
        for _ in 0..self.attempts.max(1) {
            match self.run_once(tokens) {
                Ok(lines) => return Ok(lines),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Roman → Devanagari resolver chain: lexicon, then the optional external
/// command, then the deterministic rule table, which is always available.
#[derive(Debug, Clone, Default)]
pub struct TransliterationProvider {
    lexicon: BTreeMap<String, String>,
    external: Option<ExternalCommand>,
}

impl TransliterationProvider {
    /// Rule fallback only.
    pub fn rules_only() -> Self {
        Self::default()
    }

    pub fn with_lexicon(mut self, lexicon: BTreeMap<String, String>) -> Result<Self, TextnormError> {
        for (k, v) in &lexicon {
            if has_latin_letter(v) || v.trim().is_empty() {
                return Err(TextnormError::Lexicon(format!(
                    "entry {k:?} maps to {v:?}, which is not pure Devanagari"
                )));
            }
        }
        self.lexicon = lexicon;
        Ok(self)
    }

    pub fn with_external(mut self, external: ExternalCommand) -> Self {
        self.external = Some(external);
        self
    }

    pub fn lexicon(&self) -> &BTreeMap<String, String> {
        &self.lexicon
    }

    /// Strongest resolver configured.
    pub fn kind(&self) -> ProviderKind {
        if !self.lexicon.is_empty() {
            ProviderKind::Lexicon
        } else if self.external.is_some() {
            ProviderKind::External
        } else {
            ProviderKind::RuleFallback
        }
    }

    fn lexicon_lookup(&self, run: &str) -> Option<&str> {
        self.lexicon
            .get(run)
            .or_else(|| self.lexicon.get(&run.to_lowercase()))
            .map(String::as_str)
    }

    /// Resolves Latin letter runs in order, batching the external call.
    pub(crate) fn resolve_runs(
        &self,
        runs: &[&str],
    ) -> Result<Vec<(String, ProviderKind)>, (usize, char)> {
        let mut out: Vec<Option<(String, ProviderKind)>> = runs
            .iter()
            .map(|r| {
                self.lexicon_lookup(r)
                    .map(|s| (s.to_string(), ProviderKind::Lexicon))
            })
            .collect();

        if let Some(ext) = &self.external {
            // Acronyms always use the letter-name table.
            let mut pending: Vec<&str> = runs
                .iter()
                .zip(&out)
                .filter(|(r, o)| o.is_none() && !rules::is_acronym(r))
                .map(|(r, _)| *r)
                .collect();
            pending.sort_unstable();
            pending.dedup();
            if !pending.is_empty() {
                if let Ok(lines) = ext.transliterate_batch(&pending) {
                    let answers: HashMap<&str, &str> = pending
                        .iter()
                        .copied()
                        .zip(lines.iter().map(String::as_str))
                        .filter(|(_, ans)| !ans.is_empty() && !has_latin_letter(ans))
                        .collect();
                    for (slot, run) in out.iter_mut().zip(runs) {
                        if slot.is_none() {
                            if let Some(ans) = answers.get(run) {
                                *slot = Some((ans.to_string(), ProviderKind::External));
                            }
                        }
                    }
                }
            }
        }

        out.into_iter()
            .zip(runs)
            .enumerate()
            .map(|(i, (slot, run))| match slot {
                Some(found) => Ok(found),
                None => rules::transliterate_run(run)
                    .map(|s| (s, ProviderKind::RuleFallback))
                    .map_err(|c| (i, c)),
            })
            .collect()
    }
}

/// Parses a `latin<TAB>devanagari` lexicon. Blank lines and `#` comments are skipped.
pub fn parse_lexicon(text: &str) -> Result<BTreeMap<String, String>, TextnormError> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let Some((latin, deva)) = line.split_once('\t') else {
            return Err(TextnormError::Lexicon(format!(
                "line {}: expected `latin<TAB>devanagari`",
                lineno + 1
            )));
        };
        let (latin, deva) = (latin.trim(), deva.trim());
        if latin.is_empty() || deva.is_empty() {
            return Err(TextnormError::Lexicon(format!("line {}: empty field", lineno + 1)));
        }
        map.insert(latin.to_string(), deva.to_string());
    }
    Ok(map)
}

pub fn load_lexicon(path: &Path) -> Result<BTreeMap<String, String>, TextnormError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TextnormError::Lexicon(format!("{}: {e}", path.display())))?;
    parse_lexicon(&text)
}
