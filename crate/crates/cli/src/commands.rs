//! Subcommand implementations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use tkgqa_agent::gateway::Gateway;
use tkgqa_agent::miner::{self, score_trace, ExperienceLibrary, MineConfig, MineError};
use tkgqa_agent::openai::{OpenAiBackend, OpenAiConfig};
use tkgqa_agent::runtime::{derive_seed, Agent, EpisodeConfig, Trajectory};
use tkgqa_agent::{DecodingConfig, ScriptedResponder};
use tkgqa_core::embed::{Embedder, HashEmbedder, RemoteEmbedder, RemoteEmbedderConfig};
use tkgqa_core::eval::{
    aggregate_report, budget_curve, empirical_cdf, gold_fact_position, load_questions, parse_gold_sidecar, pass_at_k,
    read_jsonl, EvalError, EvalRecord, QuestionRecord, DEFAULT_GROUPING,
};
use tkgqa_core::{FactIndex, SearchTool, TkgStore};

use crate::config::{require, EmbedderKind, Overrides, RunConfig};
use crate::error::CliError;
use crate::{CommonArgs, IndexArgs, IngestArgs, MineArgs, ReportArgs, RunArgs};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";

fn load_config(common: &CommonArgs, extra: impl FnOnce(&mut Overrides)) -> Result<RunConfig, CliError> {
    let mut o = common.overrides();
    extra(&mut o);
    RunConfig::load(common.config.as_deref(), &o)
}

fn eval_err(e: EvalError) -> CliError {
    CliError::Data(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|t| serde_json::to_string(t).expect("record serializes") + "\n")
        .collect()
}

fn append_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, item: &T) -> Result<(), CliError> {
    let line = serde_json::to_string(item).expect("record serializes");
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn build_embedder(cfg: &RunConfig) -> Box<dyn Embedder> {
    let e = &cfg.embedder;
    match e.kind {
        EmbedderKind::Hash => Box::new(HashEmbedder::new(e.dimension, e.hash_seed)),
        EmbedderKind::Remote => Box::new(RemoteEmbedder::new(RemoteEmbedderConfig {
            url: e.url.clone(),
            model: e.model.clone(),
            dimension: e.dimension,
            api_key_env: e.api_key_env.clone(),
            timeout_secs: e.timeout_secs,
        })),
    }
}

pub fn build_gateway(cfg: &RunConfig) -> Result<Gateway, CliError> {
    let url = cfg
        .endpoint
        .url
        .as_deref()
        .ok_or_else(|| CliError::Usage("no endpoint configured (--endpoint or endpoint.url)".into()))?;
    let gateway = if let Some(script) = url.strip_prefix("scripted:") {
        let path = Path::new(script);
        if !path.exists() {
            return Err(CliError::Usage(format!("script {} does not exist", path.display())));
        }
        Gateway::new(ScriptedResponder::load(path).map_err(CliError::Data)?)
    } else if url.starts_with("http://") || url.starts_with("https://") {
        Gateway::new(OpenAiBackend::new(OpenAiConfig {
            url: url.to_string(),
            model: cfg.endpoint.model.clone(),
            api_key_env: cfg.endpoint.api_key_env.clone(),
            timeout_secs: cfg.endpoint.timeout_secs,
        }))
    } else {
        return Err(CliError::Usage(format!("endpoint {url:?} is neither an http(s) URL nor scripted:<path>")));
    };
    let gateway = gateway.with_max_in_flight(cfg.endpoint.max_in_flight);
    match &cfg.endpoint.trace {
        Some(path) => gateway.with_trace(path).map_err(|e| CliError::io(path, e)),
        None => Ok(gateway),
    }
}

pub fn episode_config(cfg: &RunConfig, gateway: &Gateway, demonstrations: Vec<String>) -> EpisodeConfig {
    let a = &cfg.agent;
    EpisodeConfig {
        t_max: a.t_max,
        decoding: DecodingConfig {
            temperature: a.temperature,
            max_output_tokens: a.max_output_tokens,
            seed: Some(derive_seed(cfg.seed, &["decoding"])),
        },
        malformed_retry_budget: a.malformed_retry_budget,
        observation_cap_bytes: a.observation_cap_bytes,
        observation_role: cfg.endpoint.observation_role,
        record_timings: a.record_timings && !gateway.is_scripted(),
        demonstrations,
    }
}

struct Resources {
    store: TkgStore,
    index: FactIndex,
    embedder: Box<dyn Embedder>,
}

impl Resources {
    fn load(cfg: &RunConfig, force: bool) -> Result<Self, CliError> {
        let store_dir = require(Some(&cfg.store_dir()?), "store directory")?;
        let index_path = require(Some(&cfg.index_path()?), "index file")?;
        let store = TkgStore::load_dir(&store_dir)?;
        let embedder = build_embedder(cfg);
        let index = FactIndex::load(&index_path, &embedder.fingerprint(), force)?;
        Ok(Self { store, index, embedder })
    }

    fn tool(&self, cfg: &RunConfig) -> Result<SearchTool<'_>, CliError> {
        Ok(SearchTool::new(&self.store, &self.index, self.embedder.as_ref(), cfg.search_settings())?)
    }
}

pub fn ingest(a: &IngestArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common, |_| {})?;
    let graph = require(a.graph.as_ref().or(cfg.data.graph.as_ref()), "graph file")?;
    let out = cfg.data.store_dir.clone().unwrap_or_else(|| cfg.out.clone());
    let store = TkgStore::load_tsv(&graph)?;
    store.save_dir(&out)?;
    println!(
        "facts={} entities={} relations={} timestamps={}",
        store.len(),
        store.entities().len(),
        store.relations().len(),
        store.timestamp_count()
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn index(a: &IndexArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common, |_| {})?;
    let store_dir = require(Some(&cfg.store_dir()?), "store directory")?;
    let store = TkgStore::load_dir(&store_dir)?;
    let embedder = build_embedder(&cfg);
    let index = FactIndex::build(&store, embedder.as_ref(), cfg.embedder.batch_size.max(1))?;
    let path = cfg.index_path()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    index.save(&path)?;
    println!("rows={} dimension={} fingerprint={}", index.len(), index.dimension(), index.fingerprint());
    println!("wrote {}", path.display());
    Ok(())
}

fn load_demonstrations(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let Some(path) = &cfg.data.library else {
        return Ok(Vec::new());
    };
    let path = require(Some(path), "library file")?;
    let lib = ExperienceLibrary::load(&path).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(lib.texts().into_iter().take(cfg.mining.k_shots).collect())
}

pub fn eval_record(q: &QuestionRecord, sample: usize, t: &Trajectory) -> EvalRecord {
    EvalRecord {
        question_id: q.id.clone(),
        sample: sample as u32,
        prediction: t.final_answer.clone().unwrap_or_default(),
        gold: q.answers.clone(),
        hit: score_trace(t, &q.answers),
        rounds_used: t.rounds_used,
        termination: t.termination.as_str().to_string(),
        labels: q.labels.clone(),
        trajectory_ref: t.key(),
    }
}

fn primary(records: &[EvalRecord]) -> Vec<EvalRecord> {
    records.iter().filter(|r| r.sample == 0).cloned().collect()
}

fn write_report(out: &Path, records: &[EvalRecord]) -> Result<String, CliError> {
    let report = aggregate_report(&primary(records), DEFAULT_GROUPING);
    write_file(&out.join("report.tsv"), &report.to_tsv())?;
    let text = report.to_text();
    write_file(&out.join("report.txt"), &text)?;
    Ok(text)
}

pub fn run(a: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common, |o| {
        o.questions = a.questions.clone();
        o.library = a.library.clone();
        o.samples = a.samples;
    })?;
    let questions = load_questions(&require(cfg.data.questions.as_ref(), "question file")?).map_err(eval_err)?;
    let demonstrations = load_demonstrations(&cfg)?;
    let res = Resources::load(&cfg, a.common.force)?;
    let tool = res.tool(&cfg)?;
    let gateway = build_gateway(&cfg)?;
    let agent = Agent::new(&tool, &gateway);
    let ecfg = episode_config(&cfg, &gateway, demonstrations);

    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let traj_path = out.join(TRAJECTORIES_FILE);
    let res_path = out.join(RESULTS_FILE);

    let mut records: Vec<EvalRecord> = Vec::new();
    if a.resume && res_path.exists() {
        records = read_jsonl(&res_path).map_err(eval_err)?;
        let done: HashSet<&str> = records.iter().map(|r| r.trajectory_ref.as_str()).collect();
        let kept: Vec<Trajectory> = if traj_path.exists() {
            read_jsonl::<Trajectory>(&traj_path)
                .map_err(eval_err)?
                .into_iter()
                .filter(|t| done.contains(t.key().as_str()))
                .collect()
        } else {
            Vec::new()
        };
        write_file(&traj_path, &jsonl(&kept))?;
    } else {
        write_file(&traj_path, "")?;
        write_file(&res_path, "")?;
    }
    let done: HashSet<String> = records.iter().map(|r| r.trajectory_ref.clone()).collect();
    let tasks: Vec<(usize, usize)> = questions
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| (0..cfg.agent.samples).map(move |s| (qi, s, format!("{}#s{s}", q.id))))
        .filter(|(_, _, key)| !done.contains(key))
        .map(|(qi, s, _)| (qi, s))
        .collect();
    let total = questions.len() * cfg.agent.samples;
    if tasks.len() < total {
        eprintln!("resuming: {} of {total} episodes already done", total - tasks.len());
    }

    let open = |p: &Path| {
        OpenOptions::new()
            .append(true)
            .create(true)
            .open(p)
            .map(BufWriter::new)
            .map_err(|e| CliError::io(p, e))
    };
    let mut traj_w = open(&traj_path)?;
    let mut res_w = open(&res_path)?;
    let mut failures = Vec::new();
    for chunk in tasks.chunks(gateway.max_in_flight()) {
        let outcomes: Vec<_> = chunk
            .par_iter()
            .map(|&(qi, s)| {
                let q = &questions[qi];
                agent.run_episode(&q.id, &q.text, &format!("s{s}"), &ecfg)
            })
            .collect();
        for (&(qi, s), outcome) in chunk.iter().zip(outcomes) {
            match outcome {
                Ok(t) => {
                    let rec = eval_record(&questions[qi], s, &t);
                    append_line(&mut traj_w, &traj_path, &t)?;
                    append_line(&mut res_w, &res_path, &rec)?;
                    records.push(rec);
                    let first = primary(&records);
                    let hits: u32 = first.iter().map(|r| u32::from(r.hit)).sum();
                    let rolling = if first.is_empty() { 0.0 } else { f64::from(hits) / first.len() as f64 };
                    eprintln!(
                        "[{}/{total}] {} {} hit={} rolling_hits@1={rolling:.3}",
                        records.len(),
                        t.key(),
                        t.termination.as_str(),
                        records.last().map_or(0, |r| r.hit)
                    );
                }
                Err(e) => failures.push(e),
            }
        }
        if !failures.is_empty() {
            break;
        }
    }

    let text = write_report(&out, &records)?;
    print!("{text}");
    if let Some(first) = failures.into_iter().next() {
        let code = CliError::from(first);
        let msg = format!("{code}; {} of {total} episodes recorded, rerun with --resume to continue", records.len());
        return Err(match code {
            CliError::Upstream(_) => CliError::Upstream(msg),
            CliError::Data(_) => CliError::Data(msg),
            CliError::Usage(_) => CliError::Usage(msg),
        });
    }
    Ok(())
}

pub fn mine(a: &MineArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common, |o| {
        o.train = a.train.clone();
        o.validation = a.validation.clone();
        o.library = a.library.clone();
        o.rounds = a.rounds;
    })?;
    let train = load_questions(&require(cfg.data.train.as_ref(), "training question file")?).map_err(eval_err)?;
    let validation =
        load_questions(&require(cfg.data.validation.as_ref(), "validation question file")?).map_err(eval_err)?;
    let initial = match &cfg.data.library {
        Some(p) => Some(ExperienceLibrary::load(&require(Some(p), "library file")?).map_err(|e| CliError::Data(e.to_string()))?),
        None => None,
    };
    let res = Resources::load(&cfg, a.common.force)?;
    let tool = res.tool(&cfg)?;
    let gateway = build_gateway(&cfg)?;
    let agent = Agent::new(&tool, &gateway);
    let m = &cfg.mining;
    let mcfg = MineConfig {
        group_size: m.group_size,
        batch_size: m.batch_size,
        budget: m.k_shots,
        top_k: m.top_k,
        rounds: m.rounds,
        validation_size: m.validation_size,
        resample_budget: m.resample_budget,
        seed: derive_seed(cfg.seed, &["mining"]),
        episode: episode_config(&cfg, &gateway, Vec::new()),
    };
    let outcome = miner::mine(&agent, &train, &validation, &mcfg, initial).map_err(|e| match e {
        MineError::InvalidConfig(m) => CliError::Usage(m),
        other => CliError::Data(other.to_string()),
    })?;

    let out = cfg.out.clone();
    write_file(&out.join("library.json"), &outcome.library.to_json())?;
    write_file(&out.join("mining_report.tsv"), &outcome.report.to_tsv())?;
    let summary = outcome.report.summary();
    write_file(&out.join("mining_summary.txt"), &summary)?;
    let traces: Vec<&Trajectory> = outcome.groups.iter().flat_map(|g| &g.traces).collect();
    write_file(&out.join("mining_trajectories.jsonl"), &jsonl(&traces))?;
    print!("{summary}");
    println!("wrote {}", out.join("library.json").display());
    Ok(())
}

fn is_multi_target(r: &EvalRecord) -> bool {
    r.labels.get("question_type").is_some_and(|v| v == "multiple") || r.gold.len() > 1
}

fn fmt_rate(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "n/a".into()
    }
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common, |o| o.gold_facts = a.gold_facts.clone())?;
    let out = cfg.out.clone();
    let results_path = a.results.clone().unwrap_or_else(|| out.join(RESULTS_FILE));
    let records: Vec<EvalRecord> = read_jsonl(&require(Some(&results_path), "results file")?).map_err(eval_err)?;
    let text = write_report(&out, &records)?;
    print!("{text}");

    let mut per_question: BTreeMap<&str, Vec<(u32, u8)>> = BTreeMap::new();
    for r in &records {
        per_question.entry(&r.question_id).or_default().push((r.sample, r.hit));
    }
    let rewards: Vec<Vec<u8>> = per_question
        .into_values()
        .map(|mut v| {
            v.sort_unstable();
            v.into_iter().map(|(_, h)| h).collect()
        })
        .collect();
    let mut pass = String::from("k\tpass_at_k\n");
    let kmax = rewards.iter().map(Vec::len).min().unwrap_or(0);
    for k in 1..=kmax {
        let p = pass_at_k(&rewards, k).map_err(eval_err)?;
        pass.push_str(&format!("{k}\t{}\n", fmt_rate(p)));
    }
    write_file(&out.join("pass_at_k.tsv"), &pass)?;

    let first = primary(&records);
    let caps = a.caps.clone().unwrap_or_else(|| (1..=cfg.agent.t_max).collect());
    let outcomes: Vec<(u8, usize)> = first.iter().map(|r| (r.hit, r.rounds_used)).collect();
    let mut budget = String::from("t_max\thits_at_1\n");
    for (cap, rate) in budget_curve(&outcomes, &caps) {
        budget.push_str(&format!("{cap}\t{}\n", fmt_rate(rate)));
    }
    write_file(&out.join("budget.tsv"), &budget)?;

    let Some(sidecar) = &cfg.data.gold_facts else {
        println!("gold-fact analysis skipped: no sidecar");
        return Ok(());
    };
    let sidecar = require(Some(sidecar), "gold-fact sidecar")?;
    let gold = parse_gold_sidecar(&fs::read_to_string(&sidecar).map_err(|e| CliError::io(&sidecar, e))?)
        .map_err(|e| CliError::Data(format!("{}: {e}", sidecar.display())))?;
    let traj_path: PathBuf = a.trajectories.clone().unwrap_or_else(|| out.join(TRAJECTORIES_FILE));
    let trajectories: Vec<Trajectory> = read_jsonl(&require(Some(&traj_path), "trajectory file")?).map_err(eval_err)?;
    let by_key: HashMap<String, &Trajectory> = trajectories.iter().map(|t| (t.key(), t)).collect();
    let mut positions = Vec::new();
    let mut qualifying = 0usize;
    for r in &first {
        let Some(ids) = gold.get(&r.question_id) else {
            continue;
        };
        if !a.cdf_all && !(r.hit == 1 && r.rounds_used > 3 && is_multi_target(r)) {
            continue;
        }
        let Some(t) = by_key.get(&r.trajectory_ref) else {
            continue;
        };
        if t.search_steps() == 0 {
            continue;
        }
        qualifying += 1;
        if let Some(p) = gold_fact_position(&t.search_results(), ids) {
            positions.push(p);
        }
    }
    let mut cdf = String::from("position\tcdf\n");
    for (x, f) in empirical_cdf(&positions) {
        cdf.push_str(&format!("{x:.4}\t{f:.4}\n"));
    }
    write_file(&out.join("gold_cdf.tsv"), &cdf)?;
    println!(
        "gold-fact CDF over {qualifying} trajectories ({} never surfaced a gold fact)",
        qualifying - positions.len()
    );
    Ok(())
}
