//! Deterministic Roman → Devanagari fallback.
//!
//! Two stages:
//! 1. All-caps runs of at most [`MAX_ACRONYM_LEN`] letters are spelled with
//!    English letter names ("EMI" → "ईएमआई").
//! 2. Everything else is lower-cased and segmented by longest match into
//!    consonant and vowel units. Adjacent consonants are joined with a
//!    virama, a vowel after a consonant becomes a matra, and a word-final
//!    consonant keeps its inherent schwa.

pub const MAX_ACRONYM_LEN: usize = 5;

const VIRAMA: char = '\u{094D}';

/// English letter names, indexed by `letter - 'A'`.
pub const LETTER_NAMES: [&str; 26] = [
    "ए", "बी", "सी", "डी", "ई", "एफ", "जी", "एच", "आई", "जे", "के", "एल", "एम", "एन", "ओ",
    "पी", "क्यू", "आर", "एस", "टी", "यू", "वी", "डब्ल्यू", "एक्स", "वाई", "ज़ेड",
];

/// Consonant units, longest first.
const CONSONANTS: &[(&str, &str)] = &[
    ("chh", "छ"),
    ("kh", "ख"),
    ("gh", "घ"),
    ("ch", "च"),
    ("jh", "झ"),
    ("th", "थ"),
    ("dh", "ध"),
    ("ph", "फ"),
    ("bh", "भ"),
    ("sh", "श"),
    ("ck", "क"),
    ("qu", "क्व"),
    ("b", "ब"),
    ("c", "क"),
    ("d", "ड"),
    ("f", "फ़"),
    ("g", "ग"),
    ("h", "ह"),
    ("j", "ज"),
    ("k", "क"),
    ("l", "ल"),
    ("m", "म"),
    ("n", "न"),
    ("p", "प"),
    ("q", "क"),
    ("r", "र"),
    ("s", "स"),
    ("t", "ट"),
    ("v", "व"),
    ("w", "व"),
    ("x", "क्स"),
    ("y", "य"),
    ("z", "ज़"),
];

/// Vowel units as (latin, independent form, matra), longest first.
const VOWELS: &[(&str, &str, &str)] = &[
    ("aa", "आ", "\u{093E}"),
    ("ai", "ऐ", "\u{0948}"),
    ("au", "औ", "\u{094C}"),
    ("ee", "ई", "\u{0940}"),
    ("ea", "ई", "\u{0940}"),
    ("ii", "ई", "\u{0940}"),
    ("oo", "ऊ", "\u{0942}"),
    ("ou", "औ", "\u{094C}"),
    ("oa", "ओ", "\u{094B}"),
    ("ei", "ए", "\u{0947}"),
    ("a", "अ", ""),
    ("e", "ए", "\u{0947}"),
    ("i", "इ", "\u{093F}"),
    ("o", "ओ", "\u{094B}"),
    ("u", "उ", "\u{0941}"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    Consonant(&'static str),
    Vowel {
        independent: &'static str,
        matra: &'static str,
    },
}

/// Returns `true` when the run is spelled out letter by letter.
pub fn is_acronym(run: &str) -> bool {
    let n = run.chars().count();
    (1..=MAX_ACRONYM_LEN).contains(&n) && run.chars().all(|c| c.is_ascii_uppercase())
}

/// Spells an ASCII-letter run with English letter names.
pub fn spell_letters(run: &str) -> Option<String> {
    run.chars()
        .map(|c| {
            c.is_ascii_alphabetic()
                .then(|| LETTER_NAMES[(c.to_ascii_uppercase() as u8 - b'A') as usize])
        })
        .collect()
}

fn next_unit(rest: &str) -> Option<(Unit, usize)> {
    // Longest match across both tables; consonant digraphs win ties.
    let mut best: Option<(Unit, usize)> = None;
    for &(latin, deva) in CONSONANTS {
        if rest.starts_with(latin) && best.is_none_or(|(_, len)| latin.len() > len) {
            best = Some((Unit::Consonant(deva), latin.len()));
        }
    }
    for &(latin, independent, matra) in VOWELS {
        if rest.starts_with(latin) && best.is_none_or(|(_, len)| latin.len() > len) {
            best = Some((Unit::Vowel { independent, matra }, latin.len()));
        }
    }
    best
}

/// Applies the grapheme table to a run of ASCII letters. Returns the first
/// character that has no rule, if any.
pub fn apply_grapheme_rules(run: &str) -> Result<String, char> {
    let lower = run.to_ascii_lowercase();
    let mut out = String::with_capacity(lower.len() * 3);
    let mut rest = lower.as_str();
    let mut after_consonant = false;
    while !rest.is_empty() {
        let Some((unit, len)) = next_unit(rest) else {
            return Err(rest.chars().next().expect("non-empty"));
        };
        match unit {
            Unit::Consonant(c) => {
                if after_consonant {
                    out.push(VIRAMA);
                }
                out.push_str(c);
                after_consonant = true;
            }
            Unit::Vowel { independent, matra } => {
                out.push_str(if after_consonant { matra } else { independent });
                after_consonant = false;
            }
        }
        rest = &rest[len..];
    }
    Ok(out)
}

/// Full rule fallback for one run of ASCII letters.
pub fn transliterate_run(run: &str) -> Result<String, char> {
    if is_acronym(run) {
        return spell_letters(run).ok_or_else(|| run.chars().next().unwrap_or('?'));
    }
    apply_grapheme_rules(run)
}
