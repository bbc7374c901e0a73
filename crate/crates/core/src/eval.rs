//! Corpus BLEU, validation likelihood and baseline-relative result tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError, SeqBatch};
use crate::noising::Seq2SeqExample;
use crate::pipeline::RunRecord;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("hypothesis count {hyps} differs from reference count {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("baseline {baseline} has no score for direction {direction} (needed by {record})")]
    BaselineMissing {
        baseline: String,
        record: String,
        direction: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const MAX_ORDER: usize = 4;

/// Corpus-level BLEU with its sufficient statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl std::fmt::Display for BleuReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = self.precisions.map(|v| v * 100.0);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.hyp_len as f64 / self.ref_len.max(1) as f64,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for g in toks.windows(n) {
            *m.entry(g).or_default() += 1;
        }
    }
    m
}

/// Single-reference corpus BLEU over opaque tokens, without smoothing.
///
/// Any zero precision gives a score of 0; precisions are still reported.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuReport, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let (mut c, mut r) = (0u64, 0u64);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len() as u64;
        r += rf.len() as u64;
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(rf, n);
            for (g, k) in ngram_counts(h, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1) as u64;
        }
    }
    let precisions: [f64; MAX_ORDER] = std::array::from_fn(|i| {
        if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        }
    });
    let brevity_penalty = if c == 0 {
        0.0
    } else if c <= r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (brevity_penalty * log_mean.exp() * 100.0).min(100.0)
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len: c,
        ref_len: r,
    })
}

/// BLEU over whitespace-separated tokens of text lines.
pub fn text_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], lowercase: bool) -> Result<BleuReport, EvalError> {
    let tok = |s: &S| -> Vec<String> {
        s.as_ref()
            .split_whitespace()
            .map(|w| if lowercase { w.to_lowercase() } else { w.to_string() })
            .collect()
    };
    let h: Vec<Vec<String>> = hyps.iter().map(tok).collect();
    let r: Vec<Vec<String>> = refs.iter().map(tok).collect();
    corpus_bleu(&h, &r)
}

/// Mean per-token negative log-likelihood, dropout off, no smoothing.
pub fn validation_likelihood(model: &Model<f32>, valid: &[Seq2SeqExample]) -> Result<f64, EvalError> {
    if valid.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let (mut sum, mut tokens) = (0.0, 0usize);
    for chunk in valid.chunks(64) {
        let stats = model.loss(&SeqBatch::from_examples(chunk), 0.0)?;
        sum += stats.sum;
        tokens += stats.tokens;
    }
    if tokens == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(sum / tokens as f64)
}

/// Formats a score difference as `+1.41` / `-0.37`; zero after rounding is
/// always `+0.00`.
pub fn format_delta(delta: f64) -> String {
    let r = (delta * 100.0).round() / 100.0;
    if r == 0.0 {
        "+0.00".to_string()
    } else {
        format!("{r:+.2}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub score: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub pivot: Option<String>,
    /// Keyed by direction, e.g. `si-en`.
    pub cells: BTreeMap<String, TableCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub directions: Vec<String>,
    pub baseline: TableRow,
    pub rows: Vec<TableRow>,
    /// Per direction, the rows that beat the baseline, best first, at most
    /// [`TOP_K`].
    pub top: BTreeMap<String, Vec<(String, f64)>>,
}

pub const TOP_K: usize = 3;

/// Builds the comparison table of `records` against `baseline` using test
/// BLEU. Directions a record does not cover render as `N/A`.
pub fn emit_table(records: &[RunRecord], baseline: &RunRecord) -> Result<(ResultTable, String), EvalError> {
    let mut directions: BTreeSet<String> = baseline.test_scores().keys().cloned().collect();
    for rec in records {
        for d in rec.test_scores().keys() {
            if !baseline.test_scores().contains_key(d) {
                return Err(EvalError::BaselineMissing {
                    baseline: baseline.recipe.clone(),
                    record: rec.recipe.clone(),
                    direction: d.clone(),
                });
            }
            directions.insert(d.clone());
        }
    }
    let directions: Vec<String> = directions.into_iter().collect();
    let base_scores = baseline.test_scores();
    let row_for = |rec: &RunRecord, is_base: bool| {
        let scores = rec.test_scores();
        TableRow {
            name: rec.recipe.clone(),
            pivot: rec.pivot.clone(),
            cells: directions
                .iter()
                .map(|d| {
                    let score = scores.get(d).copied();
                    let delta = match (score, is_base) {
                        (Some(s), false) => base_scores.get(d).map(|b| s - b),
                        _ => None,
                    };
                    (d.clone(), TableCell { score, delta })
                })
                .collect(),
        }
    };
    let base_row = row_for(baseline, true);
    let rows: Vec<TableRow> = records.iter().map(|r| row_for(r, false)).collect();
    let mut top = BTreeMap::new();
    for d in &directions {
        let mut ranked: Vec<(String, f64)> = rows
            .iter()
            .filter_map(|r| r.cells[d].delta.map(|x| (r.name.clone(), x)))
            .filter(|&(_, x)| x > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(TOP_K);
        top.insert(d.clone(), ranked);
    }
    let table = ResultTable {
        directions,
        baseline: base_row,
        rows,
        top,
    };
    let text = render(&table);
    Ok((table, text))
}

fn render(t: &ResultTable) -> String {
    let cell_text = |row: &TableRow, d: &str| match &row.cells[d] {
        TableCell { score: None, .. } => "N/A".to_string(),
        TableCell {
            score: Some(s),
            delta: None,
        } => format!("{s:.2}"),
        TableCell {
            score: Some(s),
            delta: Some(x),
        } => format!("{s:.2} ({})", format_delta(*x)),
    };
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Model".to_string(), "Pivot".to_string()];
    header.extend(t.directions.iter().cloned());
    grid.push(header);
    for (row, label) in std::iter::once((&t.baseline, " (baseline)")).chain(t.rows.iter().map(|r| (r, ""))) {
        let mut line = vec![
            format!("{}{label}", row.name),
            row.pivot.clone().unwrap_or_else(|| "-".into()),
        ];
        line.extend(t.directions.iter().map(|d| cell_text(row, d)));
        grid.push(line);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &grid {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    if !t.rows.is_empty() {
        let _ = writeln!(out, "\nTop {TOP_K} improved over {}:", t.baseline.name);
        for (d, ranked) in &t.top {
            let items: Vec<String> = ranked
                .iter()
                .map(|(n, x)| format!("{n} ({})", format_delta(*x)))
                .collect();
            let items = if items.is_empty() {
                "none".to_string()
            } else {
                items.join(", ")
            };
            let _ = writeln!(out, "  {d}: {items}");
        }
    }
    out
}
