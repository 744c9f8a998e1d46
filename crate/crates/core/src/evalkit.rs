//! Listening-test tooling: test-set items, randomized session files, and
//! MOS / CMOS aggregation.
//!
//! Ratings arrive as CSV with header `listener,utterance,kind,value,first,second`.
//! CMOS raters score the second clip relative to the first; values are
//! re-signed so that a positive score always favours our system. Invalid
//! rows are rejected with a reason and counted, never dropped silently.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::{self, SHUFFLE_ALGORITHM};

pub const STD_CONVENTION: &str = "sample (n-1)";

/// Default identifier of the system under test in CMOS files.
pub const OURS: &str = "ours";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no valid {kind:?} records ({rejected} rejected)")]
    NoValidRecords { kind: RatingKind, rejected: usize },
    #[error("CMOS sessions need at least two systems, got {0}")]
    TooFewSystems(usize),
    #[error("MOS sessions need at least one system")]
    NoSystems,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingKind {
    Mos,
    Cmos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    #[serde(rename = "listener")]
    pub listener_id: String,
    #[serde(rename = "utterance")]
    pub utterance_id: String,
    pub kind: RatingKind,
    pub value: f64,
    /// MOS: the rated system (optional). CMOS: the system played first.
    #[serde(rename = "first", default)]
    pub first_system: Option<String>,
    #[serde(rename = "second", default)]
    pub second_system: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// Zero-based index into the input records.
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub kind: RatingKind,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Set when `n == 1`; `std` is then reported as 0.
    pub single_sample: bool,
    pub std_convention: String,
    pub per_system: BTreeMap<String, SystemStats>,
    pub rejected: Vec<Rejection>,
    pub n_input: usize,
    /// Mean and std in table style, e.g. `4.65 +- 0.56`.
    pub formatted: String,
}

/// Table-style `mean +- std` with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} +- {std:.2}")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

fn summarize(
    kind: RatingKind,
    accepted: Vec<(Option<String>, f64)>,
    rejected: Vec<Rejection>,
    n_input: usize,
) -> Result<EvalSummary, EvalError> {
    if accepted.is_empty() {
        return Err(EvalError::NoValidRecords {
            kind,
            rejected: rejected.len(),
        });
    }
    let values: Vec<f64> = accepted.iter().map(|(_, v)| *v).collect();
    let (mean, std) = mean_std(&values);
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (sys, v) in &accepted {
        if let Some(sys) = sys {
            grouped.entry(sys.clone()).or_default().push(*v);
        }
    }
    let per_system = grouped
        .into_iter()
        .map(|(k, vs)| {
            let (mean, std) = mean_std(&vs);
            (k, SystemStats { mean, std, n: vs.len() })
        })
        .collect();
    Ok(EvalSummary {
        kind,
        mean,
        std,
        n: values.len(),
        single_sample: values.len() == 1,
        std_convention: STD_CONVENTION.to_string(),
        per_system,
        rejected,
        n_input,
        formatted: format_mean_std(mean, std),
    })
}

fn mos_problem(r: &RatingRecord) -> Option<String> {
    if r.kind != RatingKind::Mos {
        return Some("not a MOS record".into());
    }
    if !r.value.is_finite() || !(1.0..=5.0).contains(&r.value) {
        return Some(format!("MOS value {} outside [1, 5]", r.value));
    }
    if (r.value * 2.0).fract() != 0.0 {
        return Some(format!("MOS value {} is not on the 0.5 grid", r.value));
    }
    None
}

/// Mean ± sample std over all valid MOS records.
pub fn aggregate_mos(records: &[RatingRecord]) -> Result<EvalSummary, EvalError> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (index, r) in records.iter().enumerate() {
        match mos_problem(r) {
            Some(reason) => rejected.push(Rejection { index, reason }),
            None => accepted.push((r.first_system.clone().filter(|s| !s.is_empty()), r.value)),
        }
    }
    summarize(RatingKind::Mos, accepted, rejected, records.len())
}

/// Re-signs one CMOS record so that positive favours `ours`. Returns the
/// reference system and the adjusted value.
pub fn adjust_cmos(r: &RatingRecord, ours: &str) -> Result<(String, f64), String> {
    if r.kind != RatingKind::Cmos {
        return Err("not a CMOS record".into());
    }
    if !r.value.is_finite() || !(-2.0..=2.0).contains(&r.value) {
        return Err(format!("CMOS value {} outside [-2, 2]", r.value));
    }
    let (first, second) = match (r.first_system.as_deref(), r.second_system.as_deref()) {
        (Some(f), Some(s)) if !f.is_empty() && !s.is_empty() => (f, s),
        _ => return Err("missing system identifiers".into()),
    };
    if first == second {
        return Err(format!("both clips come from {first:?}"));
    }
    if second == ours {
        Ok((first.to_string(), r.value))
    } else if first == ours {
        Ok((second.to_string(), -r.value))
    } else {
        Err(format!("neither system is {ours:?}"))
    }
}

/// Mean ± sample std of order-adjusted CMOS values; per-system stats are
/// keyed by the reference system.
pub fn aggregate_cmos(records: &[RatingRecord], ours: &str) -> Result<EvalSummary, EvalError> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (index, r) in records.iter().enumerate() {
        match adjust_cmos(r, ours) {
            Ok((reference, v)) => accepted.push((Some(reference), v)),
            Err(reason) => rejected.push(Rejection { index, reason }),
        }
    }
    summarize(RatingKind::Cmos, accepted, rejected, records.len())
}

/// Parses a ratings CSV. Rows that do not parse at all become errors with
/// their line number; range checks happen during aggregation.
pub fn read_ratings(reader: impl std::io::Read) -> Result<Vec<RatingRecord>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RatingRecord>().enumerate() {
        out.push(row.map_err(|e| EvalError::Parse {
            path: "<ratings>".into(),
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_ratings(path: &Path) -> Result<Vec<RatingRecord>, EvalError> {
    read_ratings(std::fs::File::open(path)?)
}

pub fn write_ratings(path: &Path, records: &[RatingRecord]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One test-set sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestItem {
    pub id: String,
    pub text: String,
}

/// Reads JSON-lines with at least `id` and `text`; other keys are ignored,
/// so utterance manifests work too.
pub fn load_test_items(path: &Path) -> Result<Vec<TestItem>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    /// Presentation position, 0-based.
    pub order: usize,
    pub utterance: String,
    pub first: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub kind: RatingKind,
    pub seed: u64,
    pub shuffle_algorithm: String,
    /// System under test; CMOS scores are adjusted toward it.
    pub ours: String,
    pub systems: Vec<String>,
    pub entries: Vec<SessionEntry>,
}

/// Builds a randomized listening session.
///
/// MOS: every (item, system) pair once, in seeded random order. CMOS:
/// `systems[0]` is ours and is paired with each other system per item; which
/// clip plays first is a fair seeded coin flip. The session records the
/// ground-truth order that [`aggregate_cmos`] needs.
pub fn make_session(
    items: &[TestItem],
    systems: &[String],
    kind: RatingKind,
    seed: u64,
) -> Result<Session, EvalError> {
    let mut rng = rng::seeded(seed);
    let mut entries = Vec::new();
    match kind {
        RatingKind::Mos => {
            if systems.is_empty() {
                return Err(EvalError::NoSystems);
            }
            for item in items {
                for sys in systems {
                    entries.push(SessionEntry {
                        order: 0,
                        utterance: item.id.clone(),
                        first: sys.clone(),
                        second: None,
                    });
                }
            }
        }
        RatingKind::Cmos => {
            if systems.len() < 2 {
                return Err(EvalError::TooFewSystems(systems.len()));
            }
            let ours = &systems[0];
            for item in items {
                for reference in &systems[1..] {
                    let ours_first = rng::unit_f64(&mut rng) < 0.5;
                    let (first, second) = if ours_first {
                        (ours.clone(), reference.clone())
                    } else {
                        (reference.clone(), ours.clone())
                    };
                    entries.push(SessionEntry {
                        order: 0,
                        utterance: item.id.clone(),
                        first,
                        second: Some(second),
                    });
                }
            }
        }
    }
    rng::shuffle(&mut entries, &mut rng);
    for (i, e) in entries.iter_mut().enumerate() {
        e.order = i;
    }
    Ok(Session {
        kind,
        seed,
        shuffle_algorithm: SHUFFLE_ALGORITHM.to_string(),
        ours: systems.first().cloned().unwrap_or_default(),
        systems: systems.to_vec(),
        entries,
    })
}
