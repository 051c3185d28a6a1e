#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn tkgqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tkgqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn tkgqa")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs the binary and panics with its output unless it exits 0.
pub fn ok(args: &[&str]) -> String {
    let o = tkgqa(args);
    assert!(o.status.success(), "tkgqa {args:?} failed\nstdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

pub fn code(args: &[&str]) -> i32 {
    tkgqa(args).status.code().expect("exit code")
}

pub fn search(query: &str, entity: &str) -> String {
    format!(
        "<think>Look up {entity}.</think><search>{{\"query\":\"{query}\",\"entities\":[{{\"name\":\"{entity}\",\"role\":\"head\"}}],\"limit\":5}}</search>"
    )
}

pub fn answer(a: &str) -> String {
    format!("<think>The observation settles it.</think><answer>{a}</answer>")
}

pub fn reply(text: impl Into<String>) -> Value {
    json!({ "reply": text.into() })
}

/// One synthetic question with its gold answers and labels.
#[derive(Debug, Clone)]
pub struct BenchQuestion {
    pub id: String,
    pub text: String,
    pub answers: Vec<String>,
    pub labels: BTreeMap<String, String>,
    pub solved: bool,
}

const CATEGORIES: &[&str] = &["equal", "before_after", "first_last", "after_first"];
const LEVELS: &[&str] = &["simple", "medium", "complex"];

/// Country_i hosts Leader_i on a distinct day; question i asks who
/// visited Country_i (or when). `solved(i)` decides whether the scripted
/// trajectory ends on the gold answer.
pub fn benchmark(prefix: &str, n: usize, solved: impl Fn(usize) -> bool) -> (String, Vec<BenchQuestion>) {
    let mut graph = String::new();
    let mut questions = Vec::new();
    for i in 0..n {
        let date = format!("2005-{:02}-{:02}", 1 + i % 12, 1 + i % 28);
        graph.push_str(&format!("Country_{i}\tHost_a_visit\tLeader_{i}\t{date}\n"));
        graph.push_str(&format!("Leader_{i}\tMake_statement\tCountry_{}\t2006-{:02}\n", (i + 1) % n, 1 + i % 12));
        let time_answer = i % 3 == 0;
        let multiple = i % 5 == 4;
        let mut answers = vec![if time_answer { date.clone() } else { format!("Leader_{i}") }];
        if multiple {
            answers.push(format!("Envoy_{i}"));
        }
        let labels = BTreeMap::from([
            ("question_type".to_string(), (if multiple { "multiple" } else { "single" }).to_string()),
            ("answer_type".to_string(), (if time_answer { "time" } else { "entity" }).to_string()),
            ("level".to_string(), LEVELS[i % 3].to_string()),
            ("category".to_string(), CATEGORIES[i % 4].to_string()),
        ]);
        let text = if time_answer {
            format!("When did Leader_{i} visit Country_{i}?")
        } else {
            format!("Who visited Country_{i} in 2005?")
        };
        questions.push(BenchQuestion {
            id: format!("{prefix}{i}"),
            text,
            answers,
            labels,
            solved: solved(i),
        });
    }
    (graph, questions)
}

pub fn questions_jsonl(qs: &[BenchQuestion]) -> String {
    qs.iter()
        .map(|q| json!({ "id": q.id, "text": q.text, "answers": q.answers, "labels": q.labels }).to_string() + "\n")
        .collect()
}

/// Per-question script: one constrained search then the gold (or a wrong) answer.
pub fn episode_scripts(qs: &[BenchQuestion]) -> BTreeMap<String, Value> {
    qs.iter()
        .enumerate()
        .map(|(i, q)| {
            let final_answer = if q.solved { q.answers[0].clone() } else { "Nobody".to_string() };
            let rules = json!([reply(search("visit", &format!("Country_{i}"))), reply(answer(&final_answer))]);
            (q.id.clone(), rules)
        })
        .collect()
}

pub fn script_file(scripts: BTreeMap<String, Value>) -> String {
    serde_json::to_string_pretty(&json!({
        "default": [{ "reply": "unscripted", "repeat": true }],
        "scripts": scripts,
    }))
    .unwrap()
}

/// A workspace directory with graph, questions, script and config written.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub questions: Vec<BenchQuestion>,
}

impl Workspace {
    pub fn new(n: usize, solved: impl Fn(usize) -> bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (graph, questions) = benchmark("q", n, solved);
        fs::write(dir.path().join("graph.tsv"), graph).unwrap();
        fs::write(dir.path().join("questions.jsonl"), questions_jsonl(&questions)).unwrap();
        fs::write(dir.path().join("script.json"), script_file(episode_scripts(&questions))).unwrap();
        let ws = Self { dir, questions };
        ws.write_config("run.toml", "");
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    /// Writes a config whose relative paths point into the workspace.
    pub fn write_config(&self, name: &str, extra: &str) -> String {
        let text = format!(
            "seed = 7\nout = \"out\"\n{extra}\n[data]\ngraph = \"graph.tsv\"\nstore_dir = \"store\"\nquestions = \"questions.jsonl\"\n\n[embedder]\nkind = \"hash\"\ndimension = 32\n\n[endpoint]\nurl = \"scripted:script.json\"\n",
        );
        fs::write(self.path(name), text).unwrap();
        self.p(name)
    }

    pub fn config(&self) -> String {
        self.p("run.toml")
    }

    /// ingest + index with the workspace config.
    pub fn prepare(&self) {
        let cfg = self.config();
        ok(&["ingest", "--config", &cfg]);
        ok(&["index", "--config", &cfg]);
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.path("out").join(name)
    }

    pub fn read_out(&self, name: &str) -> String {
        fs::read_to_string(self.out(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    pub fn lines(&self, name: &str) -> Vec<Value> {
        read_lines(&self.out(name))
    }
}

/// Ten training questions (even ones solvable) and eight validation
/// questions. Validation question i is solved only when the system prompt
/// carries lesson marker MARK-i; ranking train group i yields MARK-(i/2).
pub fn mining_workspace(solvable: bool) -> Workspace {
    let ws = Workspace::new(1, |_| true);
    let (graph, train) = benchmark("t", 10, |i| solvable && i % 2 == 0);
    let (_, validation) = benchmark("v", 8, |_| false);
    fs::write(ws.path("graph.tsv"), graph).unwrap();
    fs::write(ws.path("train.jsonl"), questions_jsonl(&train)).unwrap();
    fs::write(ws.path("validation.jsonl"), questions_jsonl(&validation)).unwrap();
    let mut scripts = episode_scripts(&train);
    for i in 0..10 {
        scripts.insert(
            format!("rank:t{i}"),
            json!([reply(format!("RANKING: 2,1\nLESSON 2: Filter by year first. MARK-{}\nLESSON 1: Check both roles.", i / 2))]),
        );
    }
    for (i, v) in validation.iter().enumerate() {
        scripts.insert(
            v.id.clone(),
            json!([
                { "when": { "system_contains": format!("MARK-{i}") }, "reply": answer(&v.answers[0]) },
                reply(answer("Nobody")),
            ]),
        );
    }
    fs::write(ws.path("script.json"), script_file(scripts)).unwrap();
    let extra = "[mining]\ngroup_size = 2\nk_shots = 3\n";
    let text = fs::read_to_string(ws.config()).unwrap().replace(
        "questions = \"questions.jsonl\"",
        "questions = \"questions.jsonl\"\ntrain = \"train.jsonl\"\nvalidation = \"validation.jsonl\"",
    );
    fs::write(ws.path("run.toml"), format!("{text}\n{extra}")).unwrap();
    ws
}

pub fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Parses report.tsv into (group, value) -> (count, hits, rate).
pub fn parse_report(tsv: &str) -> BTreeMap<(String, String), (usize, usize, String)> {
    tsv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            ((f[0].to_string(), f[1].to_string()), (f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].to_string()))
        })
        .collect()
}
