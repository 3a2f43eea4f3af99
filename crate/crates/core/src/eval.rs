//! Character error rate with a deletion/insertion/substitution breakdown,
//! corpus aggregation and the sweep report.
//!
//! Characters are Unicode scalar values. Whitespace counts unless
//! [`CerOptions::strip_whitespace`] is set. When several minimal alignments
//! exist the backtrace prefers substitution/match, then deletion, then
//! insertion.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CerOptions {
    pub strip_whitespace: bool,
}

pub fn tokenize(s: &str, opts: &CerOptions) -> Vec<char> {
    s.chars()
        .filter(|c| !(opts.strip_whitespace && c.is_whitespace()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub deletions: usize,
    pub insertions: usize,
    pub substitutions: usize,
    pub ref_len: usize,
    /// `(D + I + S) / max(ref_len, 1)`
    pub cer: f64,
    /// Set when `ref_len` is 0 and the rate was computed against 1.
    pub empty_reference: bool,
}

impl ErrorBreakdown {
    pub fn from_counts(deletions: usize, insertions: usize, substitutions: usize, ref_len: usize) -> Self {
        let errors = deletions + insertions + substitutions;
        Self {
            deletions,
            insertions,
            substitutions,
            ref_len,
            cer: errors as f64 / ref_len.max(1) as f64,
            empty_reference: ref_len == 0,
        }
    }

    pub fn errors(&self) -> usize {
        self.deletions + self.insertions + self.substitutions
    }

    /// Micro-average: counts are summed, then divided once.
    pub fn sum(items: &[ErrorBreakdown]) -> Self {
        let (d, i, s, n) = items.iter().fold((0, 0, 0, 0), |(d, i, s, n), b| {
            (d + b.deletions, i + b.insertions, s + b.substitutions, n + b.ref_len)
        });
        Self::from_counts(d, i, s, n)
    }
}

pub fn edit_alignment_chars(reference: &[char], hypothesis: &[char]) -> ErrorBreakdown {
    let (n, m) = (reference.len(), hypothesis.len());
    let width = m + 1;
    let mut d = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        d[i * width] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * width + j] + 1;
            let ins = d[i * width + j - 1] + 1;
            d[i * width + j] = sub.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut del, mut ins, mut sub) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * width + j];
        if i > 0 && j > 0 {
            let differs = reference[i - 1] != hypothesis[j - 1];
            if d[(i - 1) * width + j - 1] + usize::from(differs) == here {
                sub += usize::from(differs);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * width + j] + 1 == here {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    ErrorBreakdown::from_counts(del, ins, sub, n)
}

/// Character alignment with whitespace significant.
pub fn edit_alignment(reference: &str, hypothesis: &str) -> ErrorBreakdown {
    edit_alignment_with(reference, hypothesis, &CerOptions::default())
}

pub fn edit_alignment_with(reference: &str, hypothesis: &str, opts: &CerOptions) -> ErrorBreakdown {
    edit_alignment_chars(&tokenize(reference, opts), &tokenize(hypothesis, opts))
}

pub fn corpus_cer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)], opts: &CerOptions) -> Result<ErrorBreakdown> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("corpus has no pairs".into()));
    }
    let items: Vec<ErrorBreakdown> = pairs
        .iter()
        .map(|(r, h)| edit_alignment_with(r.as_ref(), h.as_ref(), opts))
        .collect();
    Ok(ErrorBreakdown::sum(&items))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    #[serde(flatten)]
    pub breakdown: ErrorBreakdown,
}

/// Reads `id<TAB>text` lines; text may be empty, blank lines are skipped.
pub fn read_transcripts<R: BufRead>(input: R) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').unwrap_or((line, ""));
        if id.is_empty() {
            return Err(Error::Format(format!("line {}: empty utterance id", n + 1)));
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

/// Pairs references with hypotheses by id, in reference order. Any id
/// present on one side only is reported.
pub fn join_by_id(
    refs: &[(String, String)],
    hyps: &[(String, String)],
) -> Result<Vec<(String, String, String)>> {
    let index = |rows: &[(String, String)], side: &str| -> Result<HashMap<String, String>> {
        let mut m = HashMap::new();
        for (id, text) in rows {
            if m.insert(id.clone(), text.clone()).is_some() {
                return Err(Error::Format(format!("duplicate id {id:?} in {side}")));
            }
        }
        Ok(m)
    };
    let r = index(refs, "references")?;
    let h = index(hyps, "hypotheses")?;
    let mut missing_hyp: Vec<&str> = refs.iter().map(|(id, _)| id.as_str()).filter(|id| !h.contains_key(*id)).collect();
    let mut missing_ref: Vec<&str> = hyps.iter().map(|(id, _)| id.as_str()).filter(|id| !r.contains_key(*id)).collect();
    if !missing_hyp.is_empty() || !missing_ref.is_empty() {
        missing_hyp.sort_unstable();
        missing_ref.sort_unstable();
        return Err(Error::Incomplete(format!(
            "ids without hypothesis: {missing_hyp:?}; ids without reference: {missing_ref:?}"
        )));
    }
    Ok(refs
        .iter()
        .map(|(id, text)| (id.clone(), text.clone(), h[id].clone()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepKey {
    pub policy: String,
    pub segmentation: String,
    pub doi_length: Option<f64>,
}

impl SweepKey {
    fn sort_key(&self) -> (String, String, i64) {
        // doi lengths are compared on a millisecond grid; no DOI sorts first
        let doi = self.doi_length.map_or(i64::MIN, |d| (d * 1000.0).round() as i64);
        (self.policy.clone(), self.segmentation.clone(), doi)
    }
}

pub const SWEEP_HEADER: &str = "policy,segmentation,doi_length,cer,del,ins,sub";

/// One row per cell, sorted by policy, segmentation, then DOI length.
pub fn sweep_report(cells: &[(SweepKey, ErrorBreakdown)]) -> Result<String> {
    let mut sorted: BTreeMap<(String, String, i64), (&SweepKey, &ErrorBreakdown)> = BTreeMap::new();
    for (k, b) in cells {
        if sorted.insert(k.sort_key(), (k, b)).is_some() {
            return Err(Error::Contract(format!("duplicate sweep cell {k:?}")));
        }
    }
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (k, b) in sorted.values() {
        let doi = k.doi_length.map_or_else(|| "-".to_string(), |d| format!("{d}"));
        out.push_str(&format!(
            "{},{},{},{:.6},{},{},{}\n",
            k.policy, k.segmentation, doi, b.cer, b.deletions, b.insertions, b.substitutions
        ));
    }
    Ok(out)
}

pub fn write_sweep_report<W: Write>(mut out: W, cells: &[(SweepKey, ErrorBreakdown)]) -> Result<()> {
    out.write_all(sweep_report(cells)?.as_bytes())?;
    Ok(())
}
