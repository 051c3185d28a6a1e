//! Answer normalization, Hits@1, Pass@k and report aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::FactId;
use crate::time::ordinal;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k={k} exceeds the {available} samples recorded for question #{question}")]
    KTooLarge { k: usize, question: usize, available: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("no questions to evaluate")]
    NoQuestions,
    #[error("{path}:{line_no}: {reason}")]
    BadRecord { path: String, line_no: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Label keys with a closed vocabulary. Other keys (e.g. `category`) are free-form.
pub const LABEL_VOCABULARY: &[(&str, &[&str])] = &[
    ("question_type", &["single", "multiple"]),
    ("level", &["simple", "medium", "complex"]),
    ("answer_type", &["entity", "time"]),
];

pub const DEFAULT_GROUPING: &[&str] = &["question_type", "answer_type", "level", "category"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub text: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl QuestionRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty question id".into());
        }
        if self.answers.is_empty() {
            return Err(format!("question {} has no gold answers", self.id));
        }
        for (key, allowed) in LABEL_VOCABULARY {
            if let Some(v) = self.labels.get(*key) {
                if !allowed.contains(&v.as_str()) {
                    return Err(format!("question {}: label {key}={v:?} not in {allowed:?}", self.id));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    #[serde(default)]
    pub sample: u32,
    pub prediction: Vec<String>,
    pub gold: Vec<String>,
    pub hit: u8,
    pub rounds_used: usize,
    pub termination: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    /// `{question_id}#{sample}` key of the matching trajectory line.
    pub trajectory_ref: String,
}

/// Reads a JSONL file, one `T` per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::BadRecord {
                path: path.display().to_string(),
                line_no: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>, EvalError> {
    let questions: Vec<QuestionRecord> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for (i, q) in questions.iter().enumerate() {
        let bad = |reason| EvalError::BadRecord {
            path: path.display().to_string(),
            line_no: i + 1,
            reason,
        };
        q.validate().map_err(bad)?;
        if !seen.insert(q.id.as_str()) {
            return Err(bad(format!("duplicate question id {}", q.id)));
        }
    }
    Ok(questions)
}

/// `question_id \t fact_id,fact_id,...` sidecar of gold evidence.
pub fn parse_gold_sidecar(text: &str) -> Result<HashMap<String, BTreeSet<FactId>>, String> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (qid, ids) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected question_id<TAB>fact_ids", i + 1))?;
        let ids = ids
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<FactId>().map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<BTreeSet<_>, _>>()?;
        out.insert(qid.trim().to_string(), ids);
    }
    Ok(out)
}

const STRIP: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '\u{ab}', '\u{bb}',
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizeOptions {
    pub canonical_dates: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self { canonical_dates: true }
    }
}

/// Canonical answer form with date canonicalization enabled.
pub fn normalize_answer(text: &str) -> String {
    normalize_answer_with(text, NormalizeOptions::default())
}

/// trim, lowercase, underscores to spaces, collapse whitespace, strip
/// surrounding punctuation from [`STRIP`]; date-like answers are rewritten
/// to `YYYY`, `YYYY-MM` or `YYYY-MM-DD` at their expressed granularity.
pub fn normalize_answer_with(text: &str, opts: NormalizeOptions) -> String {
    let lowered = text.trim().to_lowercase().replace('_', " ");
    let mut s = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let stripped = s.trim_matches(|c: char| STRIP.contains(&c) || c.is_whitespace());
        if stripped.len() == s.len() {
            break;
        }
        s = stripped.to_string();
    }
    if opts.canonical_dates {
        if let Some(date) = canonical_date(&s) {
            return date;
        }
    }
    s
}

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october", "november",
    "december",
];

fn month_number(token: &str) -> Option<u32> {
    let token = token.trim_end_matches('.');
    if token.len() < 3 {
        return None;
    }
    if token == "sept" {
        return Some(9);
    }
    MONTHS
        .iter()
        .position(|m| *m == token || (token.len() == 3 && m.starts_with(token)))
        .map(|i| i as u32 + 1)
}

fn day_number(token: &str) -> Option<u32> {
    let digits = ["st", "nd", "rd", "th"]
        .iter()
        .find_map(|suf| token.strip_suffix(suf))
        .unwrap_or(token);
    if digits.is_empty() || digits.len() > 2 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn year_number(token: &str) -> Option<i32> {
    (token.len() == 4 && token.bytes().all(|b| b.is_ascii_digit()))
        .then(|| token.parse().ok())
        .flatten()
}

fn small_number(token: &str) -> Option<u32> {
    (!token.is_empty() && token.len() <= 2 && token.bytes().all(|b| b.is_ascii_digit()))
        .then(|| token.parse().ok())
        .flatten()
}

fn render_month(y: i32, m: u32) -> Option<String> {
    ordinal(y, m, 1).map(|_| format!("{y:04}-{m:02}"))
}

fn render_day(y: i32, m: u32, d: u32) -> Option<String> {
    ordinal(y, m, d).map(|_| format!("{y:04}-{m:02}-{d:02}"))
}

/// Recognizes numeric (`2010`, `2010-3`, `2010/03/05`) and English
/// (`march 2010`, `5 march 2010`, `march 5, 2010`) date spellings.
fn canonical_date(s: &str) -> Option<String> {
    for sep in ['-', '/'] {
        let parts: Vec<&str> = s.split(sep).collect();
        if parts.len() >= 2 {
            let year = year_number(parts[0])?;
            let month = small_number(parts[1])?;
            return match parts.len() {
                2 => render_month(year, month),
                3 => render_day(year, month, small_number(parts[2])?),
                _ => None,
            };
        }
    }
    if let Some(y) = year_number(s) {
        return Some(format!("{y:04}"));
    }
    let tokens: Vec<&str> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty() && *t != "of")
        .collect();
    match tokens.as_slice() {
        [m, y] => render_month(year_number(y)?, month_number(m)?),
        [a, b, y] => {
            let year = year_number(y)?;
            if let (Some(d), Some(m)) = (day_number(a), month_number(b)) {
                render_day(year, m, d)
            } else {
                render_day(year, month_number(a)?, day_number(b)?)
            }
        }
        _ => None,
    }
}

/// 1 iff the first prediction matches any gold answer after normalization.
pub fn hits_at_1<S: AsRef<str>, G: AsRef<str>>(prediction: &[S], gold: &[G]) -> u8 {
    let Some(first) = prediction.first() else {
        return 0;
    };
    let first = normalize_answer(first.as_ref());
    u8::from(gold.iter().any(|g| normalize_answer(g.as_ref()) == first))
}

/// Fraction of questions whose first `k` rewards contain a success.
pub fn pass_at_k(rewards: &[Vec<u8>], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if rewards.is_empty() {
        return Err(EvalError::NoQuestions);
    }
    let mut passed = 0usize;
    for (i, r) in rewards.iter().enumerate() {
        if r.len() < k {
            return Err(EvalError::KTooLarge {
                k,
                question: i,
                available: r.len(),
            });
        }
        if r[..k].contains(&1) {
            passed += 1;
        }
    }
    Ok(passed as f64 / rewards.len() as f64)
}

/// Relative position of the first search step whose results include a gold
/// fact: `(1-based step index) / (number of search steps)`.
pub fn gold_fact_position(search_steps: &[Vec<FactId>], gold: &BTreeSet<FactId>) -> Option<f64> {
    if search_steps.is_empty() {
        return None;
    }
    search_steps
        .iter()
        .position(|ids| ids.iter().any(|id| gold.contains(id)))
        .map(|i| (i + 1) as f64 / search_steps.len() as f64)
}

/// Empirical CDF as `(x, fraction of values <= x)` at each distinct value.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}

/// Accuracy at each interaction cap: an episode counts only if it hit and
/// finished within the cap.
pub fn budget_curve(outcomes: &[(u8, usize)], caps: &[usize]) -> Vec<(usize, f64)> {
    caps.iter()
        .map(|&cap| {
            let hits = outcomes.iter().filter(|(hit, rounds)| *hit == 1 && *rounds <= cap).count();
            let rate = if outcomes.is_empty() {
                f64::NAN
            } else {
                hits as f64 / outcomes.len() as f64
            };
            (cap, rate)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cell {
    pub count: usize,
    pub hits: usize,
}

impl Cell {
    pub fn rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.hits as f64 / self.count as f64)
    }

    fn add(&mut self, hit: u8) {
        self.count += 1;
        self.hits += usize::from(hit == 1);
    }
}

fn fmt_rate(cell: &Cell) -> String {
    cell.rate().map_or_else(|| "n/a".into(), |r| format!("{r:.3}"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow {
    pub group: String,
    pub value: String,
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub overall: Cell,
    pub rows: Vec<ReportRow>,
}

pub const UNLABELED: &str = "(none)";

/// Overall Hits@1 plus one breakdown per grouping key that at least one
/// record carries. Records missing a carried key land in `(none)`, so each
/// breakdown is a complete partition.
pub fn aggregate_report(records: &[EvalRecord], keys: &[&str]) -> Report {
    let mut overall = Cell::default();
    for r in records {
        overall.add(r.hit);
    }
    let mut rows = Vec::new();
    for key in keys {
        if !records.iter().any(|r| r.labels.contains_key(*key)) {
            continue;
        }
        let mut cells: BTreeMap<&str, Cell> = BTreeMap::new();
        for r in records {
            let v = r.labels.get(*key).map_or(UNLABELED, String::as_str);
            cells.entry(v).or_default().add(r.hit);
        }
        rows.extend(cells.into_iter().map(|(value, cell)| ReportRow {
            group: (*key).to_string(),
            value: value.to_string(),
            cell,
        }));
    }
    Report { overall, rows }
}

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tvalue\tcount\thits\thits_at_1\n");
        let _ = writeln!(
            out,
            "overall\tall\t{}\t{}\t{}",
            self.overall.count,
            self.overall.hits,
            fmt_rate(&self.overall)
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                row.group,
                row.value,
                row.cell.count,
                row.cell.hits,
                fmt_rate(&row.cell)
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![("overall".to_string(), self.overall)];
        lines.extend(self.rows.iter().map(|r| (format!("{}={}", r.group, r.value), r.cell)));
        let width = lines.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>8}\n", "slice", "count", "hits", "hits@1");
        for (label, cell) in lines {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>8}",
                label,
                cell.count,
                cell.hits,
                fmt_rate(&cell)
            );
        }
        out
    }
}
