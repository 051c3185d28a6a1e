//! Training-free experience mining.
//!
//! Per round: sample `G` episodes for each question of a mini-batch, reward
//! each by exact match, ask the model to rank the successful traces of a
//! group and distill lessons from the best ones, then admit candidates into
//! the budget-`K` library only when they improve accuracy on a fixed
//! validation slice.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tkgqa_core::eval::{hits_at_1, QuestionRecord};

use crate::gateway::{ChatMessage, ConversationKey, DecodingConfig, Gateway};
use crate::protocol::ActionKind;
use crate::runtime::{derive_seed, Agent, EpisodeConfig, Termination, Trajectory};

pub const LIBRARY_VERSION: u32 = 1;
pub const DEFAULT_BUDGET: usize = 3;
pub const RANKING_PROMPT_VERSION: &str = "v1";
pub const RANKING_PROMPT: &str = include_str!("../assets/ranking_prompt.v1.txt");
pub const LESSON_WORD_LIMIT: usize = 200;
pub const RANKING_REASKS: usize = 2;

#[derive(Debug, Error)]
pub enum MineError {
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {reason}")]
    Library { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGroup {
    pub question_id: String,
    pub traces: Vec<Trajectory>,
    pub rewards: Vec<u8>,
}

impl TraceGroup {
    pub fn successes(&self) -> Vec<usize> {
        self.rewards.iter().enumerate().filter(|(_, &r)| r == 1).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Source {
    pub question_id: String,
    pub trace_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageExperience {
    pub text: String,
    pub source: Source,
    /// 1 is the best-ranked trace of its group.
    pub rank_score: usize,
    pub validation_gain: Option<f64>,
    /// Set when the ranking came from the deterministic fallback order.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Admitted,
    Evicted,
    Rejected,
    Skipped,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Admitted => "admitted",
            Decision::Evicted => "evicted",
            Decision::Rejected => "rejected",
            Decision::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEvent {
    pub round: usize,
    pub decision: Decision,
    pub source: Source,
    pub validation_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceLibrary {
    pub version: u32,
    pub budget: usize,
    pub entries: Vec<AdvantageExperience>,
    pub provenance: Vec<ProvenanceEvent>,
}

impl Default for ExperienceLibrary {
    fn default() -> Self {
        Self::new(DEFAULT_BUDGET)
    }
}

impl ExperienceLibrary {
    pub fn new(budget: usize) -> Self {
        Self {
            version: LIBRARY_VERSION,
            budget,
            entries: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn texts(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.text.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("library serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), MineError> {
        fs::write(path, self.to_json()).map_err(|e| MineError::Library {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MineError> {
        let err = |reason: String| MineError::Library {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let lib: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if lib.version != LIBRARY_VERSION {
            return Err(err(format!("unsupported library version {}", lib.version)));
        }
        if lib.entries.len() > lib.budget {
            return Err(err(format!("{} entries exceed budget {}", lib.entries.len(), lib.budget)));
        }
        Ok(lib)
    }
}

/// Binary exact-match reward; only answered episodes can score.
pub fn score_trace(t: &Trajectory, gold: &[String]) -> u8 {
    match (&t.termination, &t.final_answer) {
        (Termination::Answered, Some(answers)) => hits_at_1(answers, gold),
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SamplingExhausted {
    pub question_id: String,
    pub sample: usize,
    pub attempts: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub group_size: usize,
    /// Extra attempts after the first failure of one sample.
    pub resample_budget: usize,
    pub run_prefix: String,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            group_size: 4,
            resample_budget: 2,
            run_prefix: String::new(),
        }
    }
}

/// `G` episodes per question, in question order. A sample that keeps failing
/// upstream is recorded as a `Failed` trajectory with reward 0 and reported.
pub fn sample_groups(
    agent: &Agent<'_>,
    questions: &[QuestionRecord],
    opts: &SampleOptions,
    cfg: &EpisodeConfig,
) -> Result<(Vec<TraceGroup>, Vec<SamplingExhausted>), MineError> {
    if opts.group_size == 0 {
        return Err(MineError::InvalidConfig("group size must be at least 1".into()));
    }
    if cfg.decoding.temperature <= 0.0 && !agent.gateway.is_scripted() {
        return Err(MineError::InvalidConfig("group sampling needs temperature > 0".into()));
    }
    let g = opts.group_size;
    let jobs: Vec<(usize, usize)> = (0..questions.len()).flat_map(|q| (0..g).map(move |j| (q, j))).collect();
    let results: Vec<(Trajectory, Option<SamplingExhausted>)> = jobs
        .par_iter()
        .map(|&(qi, j)| {
            let q = &questions[qi];
            let mut last_error = String::new();
            for attempt in 0..=opts.resample_budget {
                let run = if attempt == 0 {
                    format!("{}s{j}", opts.run_prefix)
                } else {
                    format!("{}s{j}r{attempt}", opts.run_prefix)
                };
                match agent.run_episode(&q.id, &q.text, &run, cfg) {
                    Ok(t) => return (t, None),
                    Err(e) => {
                        warn!("{}: sample {j} attempt {} failed: {e}", q.id, attempt + 1);
                        last_error = e.to_string();
                    }
                }
            }
            let run = format!("{}s{j}", opts.run_prefix);
            let exhausted = SamplingExhausted {
                question_id: q.id.clone(),
                sample: j,
                attempts: opts.resample_budget + 1,
                error: last_error.clone(),
            };
            (Trajectory::failed(&q.id, &run, &q.text, last_error), Some(exhausted))
        })
        .collect();

    let mut groups = Vec::with_capacity(questions.len());
    let mut exhausted = Vec::new();
    let mut it = results.into_iter();
    for q in questions {
        let mut traces = Vec::with_capacity(g);
        let mut rewards = Vec::with_capacity(g);
        for _ in 0..g {
            let (t, ex) = it.next().expect("one result per job");
            rewards.push(score_trace(&t, &q.answers));
            traces.push(t);
            exhausted.extend(ex);
        }
        groups.push(TraceGroup {
            question_id: q.id.clone(),
            traces,
            rewards,
        });
    }
    Ok((groups, exhausted))
}

fn first_sentence(text: &str) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let bytes = flat.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).is_none_or(|&n| n == b' ') {
            return flat[..=i].to_string();
        }
    }
    flat
}

/// Compressed, deterministic rendering of a trajectory for ranking prompts
/// and library entries.
pub fn digest(t: &Trajectory) -> String {
    let mut out = format!("Question: {}\n", t.question.trim());
    for s in &t.steps {
        let _ = write!(out, "Step {}.", s.round);
        if !s.think.is_empty() {
            let _ = write!(out, " Think: {}", first_sentence(&s.think));
        }
        match &s.action.kind {
            ActionKind::Search { call } => {
                let _ = write!(out, " Search: {}", serde_json::to_string(call).expect("tool call serializes"));
            }
            ActionKind::Answer { answers } => {
                let _ = write!(out, " Answer: {}", answers.join(" | "));
            }
            ActionKind::Malformed { .. } => out.push_str(" (malformed output)"),
        }
        out.push('\n');
        if matches!(s.action.kind, ActionKind::Search { .. }) {
            for line in s.observation.as_deref().unwrap_or("").lines().take(2) {
                let _ = writeln!(out, "  Observation: {line}");
            }
        }
    }
    if let Some(a) = &t.final_answer {
        let _ = writeln!(out, "Final answer: {}", a.join(" | "));
    }
    out.trim_end().to_string()
}

fn clip_words(text: &str, limit: usize) -> String {
    text.split_whitespace().take(limit).collect::<Vec<_>>().join(" ")
}

/// `LESSON n: text` blocks; continuation lines join the open lesson.
pub fn parse_lessons(reply: &str) -> HashMap<usize, String> {
    let mut lessons: HashMap<usize, String> = HashMap::new();
    let mut open: Option<usize> = None;
    for line in reply.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_ascii_uppercase();
        if let Some(rest) = upper.strip_prefix("LESSON") {
            let body = &trimmed[trimmed.len() - rest.len()..];
            if let Some((num, text)) = body.split_once(':') {
                if let Ok(n) = num.trim().trim_start_matches('#').parse::<usize>() {
                    lessons.insert(n, text.trim().to_string());
                    open = Some(n);
                    continue;
                }
            }
        }
        if upper.starts_with("RANKING") {
            open = None;
            continue;
        }
        if let Some(n) = open {
            if !trimmed.is_empty() {
                let entry = lessons.get_mut(&n).expect("open lesson exists");
                if !entry.is_empty() {
                    entry.push(' ');
                }
                entry.push_str(trimmed);
            }
        }
    }
    for text in lessons.values_mut() {
        *text = clip_words(text, LESSON_WORD_LIMIT);
    }
    lessons
}

/// Strict ranking: a permutation of `1..=m`, from a `RANKING:` line or a bare
/// comma-separated line such as `2,1`.
pub fn parse_ranking(reply: &str, m: usize) -> Result<Vec<usize>, String> {
    let line = reply
        .lines()
        .map(str::trim)
        .find_map(|l| {
            let upper = l.to_ascii_uppercase();
            upper.strip_prefix("RANKING").map(|_| l["RANKING".len()..].trim_start_matches([':', ' ']).to_string())
        })
        .or_else(|| {
            reply
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty() && l.chars().all(|c| c.is_ascii_digit() || c == ',' || c == ' ') && l.chars().any(|c| c.is_ascii_digit()))
                .map(str::to_string)
        })
        .ok_or_else(|| "no RANKING line".to_string())?;
    let ranking: Vec<usize> = line
        .split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_start_matches('#').parse::<usize>().map_err(|_| format!("{s:?} is not a trace number")))
        .collect::<Result<_, _>>()?;
    let mut seen = vec![false; m + 1];
    for &r in &ranking {
        if r == 0 || r > m {
            return Err(format!("trace {r} does not exist"));
        }
        if std::mem::replace(&mut seen[r], true) {
            return Err(format!("trace {r} is ranked twice"));
        }
    }
    if ranking.len() != m {
        return Err(format!("ranking lists {} of {m} traces", ranking.len()));
    }
    Ok(ranking)
}

pub fn ranking_prompt(question: &str, digests: &[String], top_k: usize) -> String {
    let mut prompt = RANKING_PROMPT.trim_end().replace("{top_k}", &top_k.to_string());
    let _ = write!(prompt, "\n\nQuestion: {}\n", question.trim());
    for (i, d) in digests.iter().enumerate() {
        let _ = write!(prompt, "\n### Trace {}\n{d}\n", i + 1);
    }
    prompt
}

/// Ranks the successful traces of a group and returns the top `top_k` as
/// candidates. An unparseable ranking is re-asked twice, then replaced by the
/// fallback order (fewest rounds, then smallest episode).
pub fn distill_advantages(
    group: &TraceGroup,
    gateway: &Gateway,
    top_k: usize,
    round: usize,
    decoding: &DecodingConfig,
) -> Vec<AdvantageExperience> {
    let successes = group.successes();
    if successes.is_empty() || top_k == 0 {
        return Vec::new();
    }
    let m = successes.len();
    let digests: Vec<String> = successes.iter().map(|&i| digest(&group.traces[i])).collect();
    let question = &group.traces[successes[0]].question;
    let key = ConversationKey::new(format!("rank:{}", group.question_id), format!("m{round}"));
    let mut messages = vec![ChatMessage::user(ranking_prompt(question, &digests, top_k.min(m)))];

    let mut ranking: Option<Vec<usize>> = None;
    let mut lessons = HashMap::new();
    for attempt in 0..=RANKING_REASKS {
        let reply = match gateway.chat(&key, &messages, decoding) {
            Ok(r) => r,
            Err(e) => {
                warn!("{}: ranking request failed: {e}", group.question_id);
                break;
            }
        };
        lessons = parse_lessons(&reply);
        if m == 1 {
            ranking = Some(vec![1]);
            break;
        }
        match parse_ranking(&reply, m) {
            Ok(r) => {
                ranking = Some(r);
                break;
            }
            Err(diag) if attempt < RANKING_REASKS => {
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be parsed: {diag}. Answer again in exactly the required format, starting with a RANKING line."
                )));
            }
            Err(diag) => warn!("{}: ranking unparseable after re-asks: {diag}", group.question_id),
        }
    }
    let fallback = ranking.is_none();
    let order = ranking.unwrap_or_else(|| {
        let mut order: Vec<usize> = (1..=m).collect();
        order.sort_by_key(|&n| {
            let t = &group.traces[successes[n - 1]];
            (t.rounds_used, t.cost_chars(), n)
        });
        info!("{}: using fallback ranking {order:?}", group.question_id);
        order
    });

    order
        .into_iter()
        .take(top_k)
        .enumerate()
        .map(|(pos, n)| {
            let trace_index = successes[n - 1];
            let example = &digests[n - 1];
            let text = match lessons.get(&n).filter(|l| !l.is_empty()) {
                Some(lesson) if !fallback || m == 1 => format!("Lesson: {lesson}\n\nExample:\n{example}"),
                _ => format!("Example:\n{example}"),
            };
            AdvantageExperience {
                text,
                source: Source {
                    question_id: group.question_id.clone(),
                    trace_index,
                },
                rank_score: pos + 1,
                validation_gain: None,
                fallback,
            }
        })
        .collect()
}

/// Accuracy of the agent on the validation slice under a demonstration list.
pub trait Validator {
    fn accuracy(&mut self, demonstrations: &[String]) -> Result<f64, String>;
}

pub struct EpisodeValidator<'a, 'b> {
    agent: &'a Agent<'b>,
    questions: Vec<QuestionRecord>,
    cfg: EpisodeConfig,
    evaluations: usize,
    cache: HashMap<Vec<String>, f64>,
}

impl<'a, 'b> EpisodeValidator<'a, 'b> {
    pub fn new(agent: &'a Agent<'b>, questions: Vec<QuestionRecord>, cfg: EpisodeConfig) -> Self {
        Self {
            agent,
            questions,
            cfg,
            evaluations: 0,
            cache: HashMap::new(),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
}

impl Validator for EpisodeValidator<'_, '_> {
    fn accuracy(&mut self, demonstrations: &[String]) -> Result<f64, String> {
        if let Some(&acc) = self.cache.get(demonstrations) {
            return Ok(acc);
        }
        if self.questions.is_empty() {
            return Err("validation slice is empty".into());
        }
        let run = format!("val{}", self.evaluations);
        self.evaluations += 1;
        let cfg = EpisodeConfig {
            demonstrations: demonstrations.to_vec(),
            ..self.cfg.clone()
        };
        let hits: Vec<u8> = self
            .questions
            .par_iter()
            .map(|q| {
                self.agent
                    .run_episode(&q.id, &q.text, &run, &cfg)
                    .map(|t| score_trace(&t, &q.answers))
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        let acc = hits.iter().map(|&h| f64::from(h)).sum::<f64>() / hits.len() as f64;
        self.cache.insert(demonstrations.to_vec(), acc);
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateOutcome {
    pub round: usize,
    pub source: Source,
    pub rank_score: usize,
    pub fallback: bool,
    pub validation_gain: Option<f64>,
    pub decision: Decision,
    pub note: String,
}

fn gain_of(e: &AdvantageExperience) -> f64 {
    e.validation_gain.unwrap_or(f64::NEG_INFINITY)
}

/// Evaluates candidates one at a time. Under budget a candidate is appended
/// and admitted on positive gain; at budget the lowest-gain incumbent is
/// evicted for the trial and the candidate must beat its gain strictly.
pub fn update_library(
    lib: &mut ExperienceLibrary,
    candidates: Vec<AdvantageExperience>,
    validator: &mut dyn Validator,
    round: usize,
) -> Vec<CandidateOutcome> {
    let mut outcomes = Vec::with_capacity(candidates.len());
    for mut cand in candidates {
        let mut outcome = CandidateOutcome {
            round,
            source: cand.source.clone(),
            rank_score: cand.rank_score,
            fallback: cand.fallback,
            validation_gain: None,
            decision: Decision::Rejected,
            note: String::new(),
        };
        if lib.budget == 0 {
            outcome.note = "library budget is 0".into();
            outcomes.push(outcome);
            continue;
        }
        let evict = if lib.entries.len() < lib.budget {
            None
        } else {
            lib.entries
                .iter()
                .enumerate()
                .min_by(|a, b| gain_of(a.1).total_cmp(&gain_of(b.1)).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
        };
        let mut base_texts = lib.texts();
        if let Some(i) = evict {
            base_texts.remove(i);
        }
        let mut trial = base_texts.clone();
        trial.push(cand.text.clone());
        let measured = validator
            .accuracy(&base_texts)
            .and_then(|base| validator.accuracy(&trial).map(|acc| acc - base));
        let gain = match measured {
            Ok(g) => g,
            Err(e) => {
                warn!("candidate {}#{} skipped: {e}", cand.source.question_id, cand.source.trace_index);
                outcome.decision = Decision::Skipped;
                outcome.note = e.clone();
                lib.provenance.push(ProvenanceEvent {
                    round,
                    decision: Decision::Skipped,
                    source: cand.source,
                    validation_gain: None,
                    note: e,
                });
                outcomes.push(outcome);
                continue;
            }
        };
        outcome.validation_gain = Some(gain);
        cand.validation_gain = Some(gain);
        let admit = match evict {
            None => gain > 0.0,
            Some(i) => gain > gain_of(&lib.entries[i]),
        };
        if admit {
            if let Some(i) = evict {
                let old = lib.entries.remove(i);
                lib.provenance.push(ProvenanceEvent {
                    round,
                    decision: Decision::Evicted,
                    source: old.source.clone(),
                    validation_gain: old.validation_gain,
                    note: format!("replaced by {}#{}", cand.source.question_id, cand.source.trace_index),
                });
            }
            lib.provenance.push(ProvenanceEvent {
                round,
                decision: Decision::Admitted,
                source: cand.source.clone(),
                validation_gain: Some(gain),
                note: String::new(),
            });
            outcome.decision = Decision::Admitted;
            lib.entries.push(cand);
        } else {
            outcome.note = match evict {
                None => "gain not positive".into(),
                Some(_) => "gain does not beat the weakest incumbent".into(),
            };
            lib.provenance.push(ProvenanceEvent {
                round,
                decision: Decision::Rejected,
                source: cand.source,
                validation_gain: Some(gain),
                note: outcome.note.clone(),
            });
        }
        outcomes.push(outcome);
    }
    outcomes
}

/// Seeded sample of `size` questions, kept in file order.
pub fn select_subset(questions: &[QuestionRecord], size: usize, seed: u64) -> Vec<QuestionRecord> {
    if questions.len() <= size {
        return questions.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, questions.len(), size).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| questions[i].clone()).collect()
}

#[derive(Debug, Clone)]
pub struct MineConfig {
    pub group_size: usize,
    pub batch_size: usize,
    pub budget: usize,
    /// Candidates distilled per group.
    pub top_k: usize,
    pub rounds: usize,
    pub validation_size: usize,
    pub resample_budget: usize,
    pub seed: u64,
    pub episode: EpisodeConfig,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            batch_size: 50,
            budget: DEFAULT_BUDGET,
            top_k: 1,
            rounds: 1,
            validation_size: 200,
            resample_budget: 2,
            seed: 0,
            episode: EpisodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoundStats {
    pub round: usize,
    pub questions: usize,
    pub traces: usize,
    pub successful_traces: usize,
    pub candidates: usize,
    pub admitted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MiningReport {
    pub rounds: Vec<RoundStats>,
    pub outcomes: Vec<CandidateOutcome>,
    pub exhausted: Vec<SamplingExhausted>,
    pub validation_questions: usize,
    pub library_size: usize,
    pub budget: usize,
}

impl MiningReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("round\tquestion_id\ttrace_index\trank_score\tfallback\tvalidation_gain\tdecision\n");
        for o in &self.outcomes {
            let gain = o.validation_gain.map_or("n/a".to_string(), |g| format!("{g:.4}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{gain}\t{}",
                o.round,
                o.source.question_id,
                o.source.trace_index,
                o.rank_score,
                u8::from(o.fallback),
                o.decision.as_str()
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "round {}: questions={} traces={} successful={} candidates={} admitted={}",
                r.round, r.questions, r.traces, r.successful_traces, r.candidates, r.admitted
            );
        }
        let _ = writeln!(out, "validation questions={}", self.validation_questions);
        let _ = writeln!(out, "library size={}/{}", self.library_size, self.budget);
        for e in &self.exhausted {
            let _ = writeln!(out, "sampling exhausted: {} sample {} after {} attempts: {}", e.question_id, e.sample, e.attempts, e.error);
        }
        if self.rounds.iter().all(|r| r.successful_traces == 0) {
            out.push_str("notice: no successful traces were sampled; the library is empty\n");
        }
        out
    }
}

pub struct MineOutcome {
    pub library: ExperienceLibrary,
    pub report: MiningReport,
    pub groups: Vec<TraceGroup>,
}

/// Full mining pipeline, starting from `initial` (or an empty library).
pub fn mine(
    agent: &Agent<'_>,
    train: &[QuestionRecord],
    validation: &[QuestionRecord],
    cfg: &MineConfig,
    initial: Option<ExperienceLibrary>,
) -> Result<MineOutcome, MineError> {
    if validation.is_empty() {
        return Err(MineError::InvalidConfig("validation question set is empty".into()));
    }
    if cfg.rounds == 0 || cfg.batch_size == 0 {
        return Err(MineError::InvalidConfig("rounds and batch size must be at least 1".into()));
    }
    cfg.episode.validate().map_err(|e| MineError::InvalidConfig(e.to_string()))?;
    let mut library = initial.unwrap_or_else(|| ExperienceLibrary::new(cfg.budget));
    library.budget = cfg.budget;
    if library.entries.len() > cfg.budget {
        return Err(MineError::InvalidConfig(format!(
            "initial library has {} entries but budget is {}",
            library.entries.len(),
            cfg.budget
        )));
    }

    let seeded = |parts: &[&str]| {
        let mut c = cfg.episode.clone();
        c.decoding.seed = Some(derive_seed(cfg.episode.decoding.seed.unwrap_or(cfg.seed), parts));
        c
    };
    let val_slice = select_subset(validation, cfg.validation_size, derive_seed(cfg.seed, &["validation"]));
    let mut validator = EpisodeValidator::new(agent, val_slice, seeded(&["validate"]));
    let mut report = MiningReport {
        validation_questions: validator.questions.len(),
        budget: cfg.budget,
        ..Default::default()
    };
    let mut all_groups = Vec::new();

    for round in 0..cfg.rounds {
        let batch = select_subset(train, cfg.batch_size, derive_seed(cfg.seed, &["batch", &round.to_string()]));
        let mut episode = seeded(&["sample", &round.to_string()]);
        episode.demonstrations = library.texts();
        let opts = SampleOptions {
            group_size: cfg.group_size,
            resample_budget: cfg.resample_budget,
            run_prefix: format!("m{round}"),
        };
        let (groups, exhausted) = sample_groups(agent, &batch, &opts, &episode)?;
        let candidates: Vec<AdvantageExperience> = groups
            .iter()
            .flat_map(|g| distill_advantages(g, agent.gateway, cfg.top_k, round, &episode.decoding))
            .collect();
        let stats = RoundStats {
            round,
            questions: batch.len(),
            traces: groups.iter().map(|g| g.traces.len()).sum(),
            successful_traces: groups.iter().map(|g| g.successes().len()).sum(),
            candidates: candidates.len(),
            admitted: 0,
        };
        let outcomes = update_library(&mut library, candidates, &mut validator, round);
        report.rounds.push(RoundStats {
            admitted: outcomes.iter().filter(|o| o.decision == Decision::Admitted).count(),
            ..stats
        });
        report.outcomes.extend(outcomes);
        report.exhausted.extend(exhausted);
        all_groups.extend(groups);
    }
    report.library_size = library.len();
    Ok(MineOutcome {
        library,
        report,
        groups: all_groups,
    })
}
