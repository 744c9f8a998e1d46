//! Single-script text front end.
//!
//! Mixed Hindi-English input is cleaned to a bounded alphabet, split on
//! whitespace, classified per token, and every Latin token is rewritten in
//! Devanagari. Digits become Hindi number words. The output never contains
//! an ASCII letter, so the character vocabulary only has to cover the
//! Devanagari block plus a handful of punctuation marks.

mod numbers;
mod provider;
pub mod rules;

use serde::{Deserialize, Serialize};

pub use numbers::{cardinal, expand_digits};
pub use provider::{
    load_lexicon, parse_lexicon, ExternalCommand, ProviderKind, TransliterationProvider,
};

/// Punctuation kept by [`clean`]; everything else becomes a space.
pub const RETAINED_PUNCTUATION: [char; 5] = ['\u{0964}', '.', ',', '?', '!'];

pub const DEVANAGARI_BLOCK: std::ops::RangeInclusive<char> = '\u{0900}'..='\u{097F}';

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TextnormError {
    #[error("empty token")]
    EmptyToken,
    #[error("token {surface:?} is not Latin script")]
    NotLatin { surface: String },
    #[error("unmappable grapheme {grapheme:?} in token {surface:?} at position {position}")]
    UnmappableGrapheme {
        grapheme: char,
        surface: String,
        position: usize,
    },
    #[error("lexicon: {0}")]
    Lexicon(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Script {
    Devanagari,
    Latin,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub script: Script,
    pub position: usize,
}

/// How one token reached its Devanagari form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    /// Devanagari or neutral token, copied (digits still expanded).
    Passthrough,
    /// Weakest resolver used among the token's Latin runs.
    Transliterated(ProviderKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedText {
    pub original: String,
    pub devanagari: String,
    /// Tokens of the cleaned original text.
    pub tokens: Vec<Token>,
    /// Devanagari rendering of each token, parallel to `tokens`.
    pub rendered: Vec<String>,
    pub provenance: Vec<Provenance>,
}

pub fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
}

pub fn is_devanagari(c: char) -> bool {
    DEVANAGARI_BLOCK.contains(&c)
}

pub fn has_latin_letter(s: &str) -> bool {
    s.chars().any(is_latin_letter)
}

fn keep_char(c: char) -> bool {
    is_latin_letter(c) || c.is_ascii_digit() || is_devanagari(c) || RETAINED_PUNCTUATION.contains(&c)
}

/// Maps the input onto the bounded alphabet and collapses whitespace.
///
/// Zero-width (non-)joiners are dropped so Devanagari conjunct spellings
/// survive; every other character outside Latin letters, digits, the
/// Devanagari block and the retained punctuation becomes a space.
pub fn clean(text: &str) -> String {
    let mapped: String = text
        .chars()
        .filter(|&c| c != '\u{200C}' && c != '\u{200D}')
        .map(|c| if keep_char(c) { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Script of a single token surface.
pub fn classify_script(surface: &str) -> Result<Script, TextnormError> {
    if surface.is_empty() {
        return Err(TextnormError::EmptyToken);
    }
    // Any Latin letter makes the token Latin, mixed tokens included.
    if has_latin_letter(surface) {
        Ok(Script::Latin)
    } else if surface.chars().any(is_devanagari) {
        Ok(Script::Devanagari)
    } else {
        Ok(Script::Neutral)
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    clean(text)
        .split(' ')
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(position, surface)| Token {
            surface: surface.to_string(),
            script: classify_script(surface).expect("split never yields empty surfaces"),
            position,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunKind {
    Latin,
    Digit,
    Other,
}

fn run_kind(c: char) -> RunKind {
    if is_latin_letter(c) {
        RunKind::Latin
    } else if numbers::is_digit(c) {
        RunKind::Digit
    } else {
        RunKind::Other
    }
}

/// Splits a surface into maximal runs of Latin letters, digits, and everything else.
fn runs(surface: &str) -> Vec<(RunKind, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut current: Option<RunKind> = None;
    for (i, c) in surface.char_indices() {
        let k = run_kind(c);
        if current != Some(k) {
            if let Some(prev) = current {
                out.push((prev, &surface[start..i]));
            }
            start = i;
            current = Some(k);
        }
    }
    if let Some(prev) = current {
        out.push((prev, &surface[start..]));
    }
    out
}

/// Renders a surface given resolved Latin runs (consumed in order).
fn render<'a>(
    surface: &str,
    latin: &mut impl Iterator<Item = &'a (String, ProviderKind)>,
) -> String {
    let mut out = String::new();
    let mut last_was_word = false;
    for (kind, text) in runs(surface) {
        let piece = match kind {
            RunKind::Latin => latin.next().expect("one resolution per Latin run").0.clone(),
            RunKind::Digit => expand_digits(text),
            RunKind::Other => text.to_string(),
        };
        // Number words are separate words; keep them apart from neighbours.
        let is_number = kind == RunKind::Digit;
        if is_number && !out.is_empty() && !out.ends_with(' ') {
            out.push(' ');
        } else if last_was_word && kind != RunKind::Other && !out.ends_with(' ') {
            out.push(' ');
        }
        out.push_str(&piece);
        last_was_word = is_number;
    }
    out
}

fn check_alphabet(surface: &str, position: usize) -> Result<(), TextnormError> {
    match surface
        .chars()
        .find(|&c| !(keep_char(c) || numbers::is_digit(c)))
    {
        Some(grapheme) => Err(TextnormError::UnmappableGrapheme {
            grapheme,
            surface: surface.to_string(),
            position,
        }),
        None => Ok(()),
    }
}

/// Transliterates one Latin token. Digit runs inside the token are read as
/// numbers and retained punctuation is kept.
pub fn transliterate_token(
    token: &Token,
    provider: &TransliterationProvider,
) -> Result<(String, ProviderKind), TextnormError> {
    if token.script != Script::Latin {
        return Err(TextnormError::NotLatin {
            surface: token.surface.clone(),
        });
    }
    check_alphabet(&token.surface, token.position)?;
    let latin_runs: Vec<&str> = runs(&token.surface)
        .into_iter()
        .filter(|(k, _)| *k == RunKind::Latin)
        .map(|(_, s)| s)
        .collect();
    let resolved = provider
        .resolve_runs(&latin_runs)
        .map_err(|(_, grapheme)| TextnormError::UnmappableGrapheme {
            grapheme,
            surface: token.surface.clone(),
            position: token.position,
        })?;
    let weakest = resolved
        .iter()
        .map(|(_, k)| *k)
        .max()
        .unwrap_or(ProviderKind::RuleFallback);
    Ok((render(&token.surface, &mut resolved.iter()), weakest))
}

/// Full normalization: every Latin token transliterated, digits expanded,
/// Devanagari and neutral tokens passed through.
pub fn normalize(
    text: &str,
    provider: &TransliterationProvider,
) -> Result<NormalizedText, TextnormError> {
    let tokens = tokenize(text);

    // One batched resolution for all Latin runs keeps external calls to one per text.
    let mut all_runs: Vec<&str> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if tok.script == Script::Latin {
            for (kind, run) in runs(&tok.surface) {
                if kind == RunKind::Latin {
                    all_runs.push(run);
                    owners.push(i);
                }
            }
        }
    }
    let resolved = provider
        .resolve_runs(&all_runs)
        .map_err(|(run_idx, grapheme)| {
            let tok = &tokens[owners[run_idx]];
            TextnormError::UnmappableGrapheme {
                grapheme,
                surface: tok.surface.clone(),
                position: tok.position,
            }
        })?;

    let mut rendered = Vec::with_capacity(tokens.len());
    let mut provenance = Vec::with_capacity(tokens.len());
    let mut cursor = 0;
    for (i, tok) in tokens.iter().enumerate() {
        let n_runs = owners[cursor..].iter().take_while(|&&o| o == i).count();
        let mine = &resolved[cursor..cursor + n_runs];
        cursor += n_runs;
        rendered.push(render(&tok.surface, &mut mine.iter()));
        provenance.push(if tok.script == Script::Latin {
            Provenance::Transliterated(
                mine.iter().map(|(_, k)| *k).max().unwrap_or(ProviderKind::RuleFallback),
            )
        } else {
            Provenance::Passthrough
        });
    }
    let devanagari = rendered.join(" ");
    debug_assert!(!has_latin_letter(&devanagari));
    Ok(NormalizedText {
        original: text.to_string(),
        devanagari,
        tokens,
        rendered,
        provenance,
    })
}
