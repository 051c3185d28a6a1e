//! The `Search(query, constraints)` tool.
//!
//! Three stages: a conjunctive symbolic filter over time window, entities and
//! relations; cosine ranking of the surviving candidates; and either a plain
//! relevance cut or the hybrid mode that re-sorts the top `rerank_pool` hits
//! chronologically. All ties break by ascending fact id.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{embed_unit, EmbedError, Embedder};
use crate::index::{verbalize_fact, FactIndex, IndexError};
use crate::store::{FactId, TkgStore};
use crate::time::{parse_timestamp, TimeInterval};

pub const DEFAULT_LIMIT: usize = 10;
pub const DEFAULT_RERANK_POOL: usize = 50;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortMode {
    #[default]
    Relevance,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeOrder {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityRole {
    Head,
    Tail,
    #[default]
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityConstraint {
    pub name: String,
    #[serde(default)]
    pub role: EntityRole,
}

impl EntityConstraint {
    pub fn new(name: impl Into<String>, role: EntityRole) -> Self {
        Self { name: name.into(), role }
    }
}

/// Conjunctive filter plus ranking parameters. `None` on an axis means no
/// restriction; an empty list is treated the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchConstraints {
    pub time_window: Option<TimeInterval>,
    pub entities: Option<Vec<EntityConstraint>>,
    pub relations: Option<Vec<String>>,
    pub sort: SortMode,
    pub time_order: TimeOrder,
    pub limit: usize,
    pub rerank_pool: usize,
}

impl Default for SearchConstraints {
    fn default() -> Self {
        Self {
            time_window: None,
            entities: None,
            relations: None,
            sort: SortMode::Relevance,
            time_order: TimeOrder::Ascending,
            limit: DEFAULT_LIMIT,
            rerank_pool: DEFAULT_RERANK_POOL,
        }
    }
}

impl SearchConstraints {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.limit == 0 {
            return Err(SearchError::InvalidConstraints("limit must be positive".into()));
        }
        if self.limit > self.rerank_pool {
            return Err(SearchError::InvalidConstraints(format!(
                "limit {} exceeds rerank pool {}",
                self.limit, self.rerank_pool
            )));
        }
        Ok(())
    }

    fn entity_list(&self) -> Option<&[EntityConstraint]> {
        self.entities.as_deref().filter(|l| !l.is_empty())
    }

    fn relation_list(&self) -> Option<&[String]> {
        self.relations.as_deref().filter(|l| !l.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub fact_id: FactId,
    pub score: f64,
    pub text: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub entries: Vec<SearchEntry>,
    /// Size of the filtered candidate set before ranking.
    pub candidate_count: usize,
}

impl SearchResult {
    pub fn fact_ids(&self) -> Vec<FactId> {
        self.entries.iter().map(|e| e.fact_id).collect()
    }

    /// Numbered observation lines followed by `candidates=N`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{}. {} [{}] (score={:.3})", i + 1, e.text, e.timestamp, e.score);
        }
        let _ = write!(out, "candidates={}", self.candidate_count);
        out
    }
}

/// Facts satisfying every present constraint, ascending by id. Names that
/// fail dictionary lookup match nothing.
pub fn filter_candidates(store: &TkgStore, c: &SearchConstraints) -> Vec<FactId> {
    let by_entity = c.entity_list().map(|list| {
        let mut ids = Vec::new();
        for ec in list {
            let Some(entity) = store.lookup_entity(&ec.name) else {
                continue;
            };
            if matches!(ec.role, EntityRole::Head | EntityRole::Any) {
                ids.extend_from_slice(store.head_postings(entity));
            }
            if matches!(ec.role, EntityRole::Tail | EntityRole::Any) {
                ids.extend_from_slice(store.tail_postings(entity));
            }
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    });
    let by_relation = c.relation_list().map(|list| {
        let mut ids = Vec::new();
        for name in list {
            if let Some(rel) = store.lookup_relation(name) {
                ids.extend_from_slice(store.relation_postings(rel));
            }
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    });
    let structural = match (by_entity, by_relation) {
        (Some(a), Some(b)) => intersect_sorted(&a, &b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => (0..store.len() as FactId).collect(),
    };
    match &c.time_window {
        None => structural,
        Some(window) => structural
            .into_iter()
            .filter(|&id| store.fact(id).is_some_and(|q| q.interval.overlaps(window)))
            .collect(),
    }
}

fn intersect_sorted(a: &[FactId], b: &[FactId]) -> Vec<FactId> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn by_relevance(a: &(FactId, f64), b: &(FactId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keeps the `k` best of `scored` by (score desc, id asc), sorted.
fn top_k(mut scored: Vec<(FactId, f64)>, k: usize) -> Vec<(FactId, f64)> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_relevance);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_relevance);
    scored
}

/// Ranks pre-scored candidates per the constraints' sort mode.
pub fn rank(store: &TkgStore, scored: Vec<(FactId, f64)>, c: &SearchConstraints) -> Vec<(FactId, f64)> {
    match c.sort {
        SortMode::Relevance => top_k(scored, c.limit),
        SortMode::Time => {
            let mut pool = top_k(scored, c.rerank_pool);
            let start = |id: FactId| store.fact(id).map_or(i32::MAX, |q| q.interval.start_day);
            pool.sort_by(|a, b| {
                let by_day = start(a.0).cmp(&start(b.0));
                let by_day = match c.time_order {
                    TimeOrder::Ascending => by_day,
                    TimeOrder::Descending => by_day.reverse(),
                };
                by_day.then(a.0.cmp(&b.0))
            });
            pool.truncate(c.limit);
            pool
        }
    }
}

/// Tool defaults applied to agent-issued calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub limit: usize,
    pub rerank_pool: usize,
    pub sort: SortMode,
    pub time_order: TimeOrder,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            limit: DEFAULT_LIMIT,
            rerank_pool: DEFAULT_RERANK_POOL,
            sort: SortMode::Relevance,
            time_order: TimeOrder::Ascending,
        }
    }
}

/// Entities in a tool call may be given as bare names or `{name, role}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntityArg {
    Name(String),
    Full(EntityConstraint),
}

/// The flat JSON object the agent emits inside `<search>`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCall {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_start: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_end: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<EntityArg>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sort: Option<SortMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl ToolCall {
    /// Resolves the call against tool defaults. `limit` is clamped into
    /// `1..=rerank_pool`; a one-sided time bound leaves the other side open.
    pub fn to_constraints(&self, settings: &SearchSettings) -> Result<SearchConstraints, SearchError> {
        let bad = |e: crate::time::TimestampError| SearchError::InvalidConstraints(e.to_string());
        let start = self
            .time_start
            .as_deref()
            .map(parse_timestamp)
            .transpose()
            .map_err(bad)?
            .map(|t| t.start_day);
        let end = self
            .time_end
            .as_deref()
            .map(parse_timestamp)
            .transpose()
            .map_err(bad)?
            .map(|t| t.end_day);
        let time_window = match (start, end) {
            (None, None) => None,
            (s, e) => Some(
                TimeInterval::new(s.unwrap_or(i32::MIN), e.unwrap_or(i32::MAX)).ok_or_else(|| {
                    SearchError::InvalidConstraints("time_start is after time_end".into())
                })?,
            ),
        };
        let entities = self.entities.as_ref().map(|list| {
            list.iter()
                .map(|e| match e {
                    EntityArg::Name(n) => EntityConstraint::new(n.clone(), EntityRole::Any),
                    EntityArg::Full(c) => c.clone(),
                })
                .collect()
        });
        let rerank_pool = settings.rerank_pool.max(1);
        Ok(SearchConstraints {
            time_window,
            entities,
            relations: self.relations.clone(),
            sort: self.sort.unwrap_or(settings.sort),
            time_order: settings.time_order,
            limit: self.limit.unwrap_or(settings.limit).clamp(1, rerank_pool),
            rerank_pool,
        })
    }
}

/// Search over an immutable store and its aligned index.
pub struct SearchTool<'a> {
    store: &'a TkgStore,
    index: &'a FactIndex,
    embedder: &'a dyn Embedder,
    settings: SearchSettings,
}

impl<'a> SearchTool<'a> {
    pub fn new(
        store: &'a TkgStore,
        index: &'a FactIndex,
        embedder: &'a dyn Embedder,
        settings: SearchSettings,
    ) -> Result<Self, SearchError> {
        if index.len() != store.len() {
            return Err(IndexError::Corrupt(format!(
                "index has {} rows but store has {} facts",
                index.len(),
                store.len()
            ))
            .into());
        }
        if index.dimension() != embedder.dimension() && !index.is_empty() {
            return Err(IndexError::DimensionMismatch {
                expected: index.dimension(),
                got: embedder.dimension(),
            }
            .into());
        }
        Ok(Self {
            store,
            index,
            embedder,
            settings,
        })
    }

    pub fn store(&self) -> &TkgStore {
        self.store
    }

    pub fn settings(&self) -> &SearchSettings {
        &self.settings
    }

    pub fn search(&self, query: &str, c: &SearchConstraints) -> Result<SearchResult, SearchError> {
        c.validate()?;
        let candidates = filter_candidates(self.store, c);
        if candidates.is_empty() {
            return Ok(SearchResult {
                entries: Vec::new(),
                candidate_count: 0,
            });
        }
        let query_vec = embed_unit(self.embedder, query)?;
        let scored = self.index.score(&query_vec, &candidates)?;
        let ranked = rank(self.store, scored, c);
        let entries = ranked
            .into_iter()
            .map(|(id, score)| {
                let q = &self.store.facts()[id as usize];
                SearchEntry {
                    fact_id: id,
                    score,
                    text: verbalize_fact(q, self.store),
                    timestamp: self.store.timestamp_text(id).to_string(),
                }
            })
            .collect();
        Ok(SearchResult {
            entries,
            candidate_count: candidates.len(),
        })
    }

    pub fn call(&self, call: &ToolCall) -> Result<SearchResult, SearchError> {
        let c = call.to_constraints(&self.settings)?;
        self.search(&call.query, &c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;

    const FIXTURE: &str = "X\tmet\tY\t2005-03-01\n\
                           X\tmet\tZ\t2004\n\
                           Y\tmet\tX\t2005\n\
                           X\tcriticized\tY\t2005-07\n\
                           Z\tmet\tW\t2006-01-02\n\
                           W\tvisited\tX\t2003/2007\n";

    fn store() -> TkgStore {
        TkgStore::parse_tsv(FIXTURE).unwrap()
    }

    // linear scan over names, independent of postings
    fn brute(store: &TkgStore, pred: impl Fn(&str, &str, &str, &TimeInterval) -> bool) -> Vec<FactId> {
        store
            .facts()
            .iter()
            .filter(|q| {
                pred(
                    store.entity_name(q.head),
                    store.relation_name(q.relation),
                    store.entity_name(q.tail),
                    &q.interval,
                )
            })
            .map(|q| q.fact_id)
            .collect()
    }

    #[test]
    fn no_constraints_returns_everything() {
        let s = store();
        assert_eq!(filter_candidates(&s, &SearchConstraints::default()), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn year_window_uses_overlap() {
        let s = store();
        let window = parse_timestamp("2005-01-01/2005-12-31").unwrap();
        let c = SearchConstraints {
            time_window: Some(window),
            ..Default::default()
        };
        let expected = brute(&s, |_, _, _, t| t.start_day <= window.end_day && t.end_day >= window.start_day);
        assert_eq!(filter_candidates(&s, &c), expected);
        assert_eq!(expected, vec![0, 2, 3, 5]);
    }

    #[test]
    fn entity_role_and_relation_intersect() {
        let s = store();
        let c = SearchConstraints {
            entities: Some(vec![EntityConstraint::new("X", EntityRole::Head)]),
            relations: Some(vec!["met".into()]),
            ..Default::default()
        };
        let expected = brute(&s, |h, r, _, _| h == "X" && r == "met");
        assert_eq!(filter_candidates(&s, &c), expected);
        assert_eq!(expected, vec![0, 1]);

        let any = SearchConstraints {
            entities: Some(vec![EntityConstraint::new("X", EntityRole::Any)]),
            ..Default::default()
        };
        assert_eq!(filter_candidates(&s, &any), brute(&s, |h, _, t, _| h == "X" || t == "X"));
    }

    #[test]
    fn unknown_names_match_nothing() {
        let s = store();
        let c = SearchConstraints {
            relations: Some(vec!["teleported".into()]),
            ..Default::default()
        };
        assert!(filter_candidates(&s, &c).is_empty());
        let c = SearchConstraints {
            entities: Some(vec![EntityConstraint::new("Nobody", EntityRole::Any)]),
            ..Default::default()
        };
        assert!(filter_candidates(&s, &c).is_empty());
    }

    fn tool_parts() -> (TkgStore, FactIndex, HashEmbedder) {
        let s = store();
        let e = HashEmbedder::new(64, 11);
        let idx = FactIndex::build(&s, &e, 4).unwrap();
        (s, idx, e)
    }

    #[test]
    fn self_query_ranks_first() {
        let (s, idx, e) = tool_parts();
        let tool = SearchTool::new(&s, &idx, &e, SearchSettings::default()).unwrap();
        let text = verbalize_fact(&s.facts()[3], &s);
        let r = tool.search(&text, &SearchConstraints::default()).unwrap();
        assert_eq!(r.entries[0].fact_id, 3);
        assert!((r.entries[0].score - 1.0).abs() < 1e-6);
        assert_eq!(r.candidate_count, 6);
    }

    #[test]
    fn empty_filter_gives_empty_result() {
        let (s, idx, e) = tool_parts();
        let tool = SearchTool::new(&s, &idx, &e, SearchSettings::default()).unwrap();
        let c = SearchConstraints {
            relations: Some(vec!["nope".into()]),
            ..Default::default()
        };
        let r = tool.search("anything", &c).unwrap();
        assert!(r.entries.is_empty());
        assert_eq!(r.candidate_count, 0);
        assert_eq!(r.render(), "candidates=0");
    }

    #[test]
    fn time_mode_sorts_chronologically() {
        let (s, idx, e) = tool_parts();
        let tool = SearchTool::new(&s, &idx, &e, SearchSettings::default()).unwrap();
        let c = SearchConstraints {
            sort: SortMode::Time,
            ..Default::default()
        };
        let r = tool.search("X met", &c).unwrap();
        let starts: Vec<i32> = r.entries.iter().map(|e| s.facts()[e.fact_id as usize].interval.start_day).collect();
        assert!(starts.windows(2).all(|w| w[0] <= w[1]));
        let desc = SearchConstraints {
            time_order: TimeOrder::Descending,
            ..c
        };
        let r = tool.search("X met", &desc).unwrap();
        let starts: Vec<i32> = r.entries.iter().map(|e| s.facts()[e.fact_id as usize].interval.start_day).collect();
        assert!(starts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn invalid_limits_rejected() {
        let (s, idx, e) = tool_parts();
        let tool = SearchTool::new(&s, &idx, &e, SearchSettings::default()).unwrap();
        let zero = SearchConstraints {
            limit: 0,
            ..Default::default()
        };
        assert!(matches!(tool.search("q", &zero), Err(SearchError::InvalidConstraints(_))));
        let over = SearchConstraints {
            limit: 60,
            ..Default::default()
        };
        assert!(tool.search("q", &over).is_err());
    }

    #[test]
    fn tool_call_parsing() {
        let call: ToolCall = serde_json::from_str(
            r#"{"query":"X met Y","time_start":"2005","time_end":"2005","entities":["X",{"name":"Y","role":"tail"}],"relations":["met"],"sort":"time","limit":3}"#,
        )
        .unwrap();
        let c = call.to_constraints(&SearchSettings::default()).unwrap();
        let year = parse_timestamp("2005").unwrap();
        assert_eq!(c.time_window.map(|w| (w.start_day, w.end_day)), Some((year.start_day, year.end_day)));
        assert_eq!(
            c.entities.unwrap(),
            vec![
                EntityConstraint::new("X", EntityRole::Any),
                EntityConstraint::new("Y", EntityRole::Tail)
            ]
        );
        assert_eq!(c.sort, SortMode::Time);
        assert_eq!(c.limit, 3);

        let open: ToolCall = serde_json::from_str(r#"{"query":"q","time_start":"2005-06"}"#).unwrap();
        let w = open.to_constraints(&SearchSettings::default()).unwrap().time_window.unwrap();
        assert_eq!(w.end_day, i32::MAX);

        let backwards: ToolCall = serde_json::from_str(r#"{"query":"q","time_start":"2006","time_end":"2005"}"#).unwrap();
        assert!(backwards.to_constraints(&SearchSettings::default()).is_err());
        assert!(serde_json::from_str::<ToolCall>(r#"{"query":"q","bogus":1}"#).is_err());
        let big: ToolCall = serde_json::from_str(r#"{"query":"q","limit":500}"#).unwrap();
        assert_eq!(big.to_constraints(&SearchSettings::default()).unwrap().limit, DEFAULT_RERANK_POOL);
    }

    #[test]
    fn render_format() {
        let r = SearchResult {
            entries: vec![SearchEntry {
                fact_id: 4,
                score: 0.98765,
                text: "China met Japan on 2004".into(),
                timestamp: "2004".into(),
            }],
            candidate_count: 12,
        };
        assert_eq!(r.render(), "1. China met Japan on 2004 [2004] (score=0.988)\ncandidates=12");
    }
}
