mod common;

use std::fs;

use common::*;
use serde_json::{json, Value};

#[test]
fn ingest_three_line_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.tsv");
    fs::write(&graph, "A\tmet\tB\t2005\nB\tmet\tC\t2006-02\nC\tsaw\tA\t2007-01-03\n").unwrap();
    let store = dir.path().join("store");
    let out = ok(&["ingest", graph.to_str().unwrap(), "--store", store.to_str().unwrap()]);
    assert!(out.contains("facts=3 entities=3 relations=2 timestamps=3"), "{out}");
}

#[test]
fn ingest_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let missing = dir.path().join("absent.tsv");
    let o = tkgqa(&["ingest", missing.to_str().unwrap(), "--store", store.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.tsv"), "{}", stderr(&o));

    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "A\tmet\tB\t2005\nA\tmet\n").unwrap();
    let o = tkgqa(&["ingest", bad.to_str().unwrap(), "--store", store.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains('2'), "line number expected: {}", stderr(&o));

    assert_eq!(code(&["ingest", "--no-such-flag"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn ingest_is_byte_identical_on_rerun() {
    let ws = Workspace::new(6, |_| true);
    let graph = ws.p("graph.tsv");
    ok(&["ingest", &graph, "--store", &ws.p("a")]);
    ok(&["ingest", &graph, "--store", &ws.p("b")]);
    for f in ["facts.tsv", "entities.tsv", "relations.tsv"] {
        let a = fs::read(ws.path("a").join(f)).unwrap();
        let b = fs::read(ws.path("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn index_fingerprint_guard_and_force() {
    let ws = Workspace::new(4, |_| true);
    let cfg = ws.config();
    ok(&["ingest", "--config", &cfg]);
    let out = ok(&["index", "--config", &cfg]);
    assert!(out.contains("rows=8 dimension=32"), "{out}");
    let first = fs::read(ws.path("store/index.bin")).unwrap();
    ok(&["index", "--config", &cfg]);
    assert_eq!(first, fs::read(ws.path("store/index.bin")).unwrap());

    let other = ws.write_config("other.toml", "");
    let text = fs::read_to_string(&other).unwrap().replace("dimension = 32", "dimension = 32\nhash_seed = 99");
    fs::write(&other, text).unwrap();
    let o = tkgqa(&["run", "--config", &other]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    ok(&["run", "--config", &other, "--force"]);
}

#[test]
fn run_writes_trajectories_and_report() {
    let ws = Workspace::new(2, |i| i == 0);
    ws.prepare();
    let out = ok(&["run", "--config", &ws.config()]);
    assert!(out.contains("overall"), "{out}");
    let trajectories = ws.lines("trajectories.jsonl");
    let results = ws.lines("results.jsonl");
    assert_eq!(trajectories.len(), 2);
    assert_eq!(results.len(), 2);
    assert_eq!(results[0]["hit"], 1);
    assert_eq!(results[1]["hit"], 0);
    assert_eq!(results[0]["trajectory_ref"], "q0#s0");
    let report = parse_report(&ws.read_out("report.tsv"));
    assert_eq!(report[&("overall".into(), "all".into())], (2, 1, "0.500".into()));
}

#[test]
fn run_is_idempotent() {
    let ws = Workspace::new(3, |i| i != 1);
    ws.prepare();
    ok(&["run", "--config", &ws.config()]);
    let a = (ws.read_out("trajectories.jsonl"), ws.read_out("results.jsonl"), ws.read_out("report.tsv"));
    ok(&["run", "--config", &ws.config()]);
    let b = (ws.read_out("trajectories.jsonl"), ws.read_out("results.jsonl"), ws.read_out("report.tsv"));
    assert_eq!(a, b);
}

#[test]
fn resume_completes_only_remaining_questions() {
    let ws = Workspace::new(2, |_| true);
    ws.prepare();
    ok(&["run", "--config", &ws.config()]);
    let full = ws.read_out("results.jsonl");
    let first_line = full.lines().next().unwrap().to_string() + "\n";
    fs::write(ws.out("results.jsonl"), &first_line).unwrap();

    let o = tkgqa(&["run", "--config", &ws.config(), "--resume"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("resuming: 1 of 2"), "{}", stderr(&o));
    assert_eq!(stderr(&o).matches("rolling_hits@1").count(), 1);
    assert_eq!(ws.read_out("results.jsonl"), full);
    assert_eq!(ws.lines("trajectories.jsonl").len(), 2);
}

#[test]
fn upstream_failure_leaves_resumable_state() {
    let ws = Workspace::new(2, |_| true);
    ws.prepare();
    let mut scripts = episode_scripts(&ws.questions);
    let good = scripts.clone();
    scripts.insert("q1".into(), json!([{ "fail": "unavailable", "repeat": true }]));
    fs::write(ws.path("script.json"), script_file(scripts)).unwrap();
    let o = tkgqa(&["run", "--config", &ws.config()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("--resume"));
    assert_eq!(ws.lines("results.jsonl").len(), 1);

    fs::write(ws.path("script.json"), script_file(good)).unwrap();
    ok(&["run", "--config", &ws.config(), "--resume"]);
    let ids: Vec<Value> = ws.lines("results.jsonl").iter().map(|r| r["question_id"].clone()).collect();
    assert_eq!(ids, vec![json!("q0"), json!("q1")]);
}

#[test]
fn t_max_flag_is_honored() {
    let ws = Workspace::new(2, |_| true);
    ws.prepare();
    let scripts = ws
        .questions
        .iter()
        .map(|q| (q.id.clone(), json!([{ "reply": search("visit", "Country_0"), "repeat": true }])))
        .collect();
    fs::write(ws.path("script.json"), script_file(scripts)).unwrap();
    ok(&["run", "--config", &ws.config(), "--t-max=3"]);
    for t in ws.lines("trajectories.jsonl") {
        assert_eq!(t["rounds_used"], 3);
        assert_eq!(t["termination"], "max_rounds");
        assert_eq!(t["steps"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn k_shots_zero_runs_without_demonstrations() {
    let ws = Workspace::new(1, |_| true);
    ws.prepare();
    let lib = json!({ "version": 1, "budget": 3, "entries": [
        { "text": "LESSON-MARK", "source": { "question_id": "x", "trace_index": 0 }, "rank_score": 1, "validation_gain": 0.5, "fallback": false }
    ], "provenance": [] });
    fs::write(ws.path("lib.json"), lib.to_string()).unwrap();
    let mut scripts = episode_scripts(&ws.questions);
    scripts.insert(
        "q0".into(),
        json!([{ "when": { "system_contains": "LESSON-MARK" }, "reply": answer(&ws.questions[0].answers[0]) }, { "reply": answer("Nobody") }]),
    );
    fs::write(ws.path("script.json"), script_file(scripts)).unwrap();
    let lib = ws.p("lib.json");
    ok(&["run", "--config", &ws.config(), "--library", &lib]);
    assert_eq!(ws.lines("results.jsonl")[0]["hit"], 1);
    ok(&["run", "--config", &ws.config(), "--library", &lib, "--k-shots", "0"]);
    assert_eq!(ws.lines("results.jsonl")[0]["hit"], 0);
}

#[test]
fn mine_builds_bounded_reproducible_library() {
    let ws = mining_workspace(true);
    ws.prepare();
    let out = ok(&["mine", "--config", &ws.config()]);
    assert!(out.contains("library"), "{out}");
    let first = ws.read_out("library.json");
    let lib: Value = serde_json::from_str(&first).unwrap();
    let entries = lib["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    assert!(ws.read_out("mining_report.tsv").starts_with("round\tquestion_id"));

    ok(&["mine", "--config", &ws.config()]);
    assert_eq!(ws.read_out("library.json"), first);

    ok(&["mine", "--config", &ws.config(), "--k-shots", "2"]);
    let lib: Value = serde_json::from_str(&ws.read_out("library.json")).unwrap();
    assert_eq!(lib["entries"].as_array().unwrap().len(), 2);
}

#[test]
fn mine_without_successes_reports_empty_library() {
    let ws = mining_workspace(false);
    ws.prepare();
    let out = ok(&["mine", "--config", &ws.config()]);
    assert!(out.contains("no successful traces"), "{out}");
    let lib: Value = serde_json::from_str(&ws.read_out("library.json")).unwrap();
    assert!(lib["entries"].as_array().unwrap().is_empty());
}

#[test]
fn report_emits_tables_and_series() {
    let ws = Workspace::new(4, |i| i % 2 == 0);
    ws.prepare();
    ok(&["run", "--config", &ws.config(), "--samples", "3"]);
    assert_eq!(ws.lines("results.jsonl").len(), 12);
    let out = ok(&["report", "--config", &ws.config()]);
    assert!(out.contains("gold-fact analysis skipped"), "{out}");
    let report = parse_report(&ws.read_out("report.tsv"));
    assert_eq!(report[&("overall".into(), "all".into())], (4, 2, "0.500".into()));

    let pass = ws.read_out("pass_at_k.tsv");
    let series: Vec<f64> = pass.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(series.len(), 3);
    assert!(series.windows(2).all(|w| w[0] <= w[1]));

    let budget = ws.read_out("budget.tsv");
    assert!(budget.starts_with("t_max\thits_at_1\n1\t0.0000\n2\t0.5000\n"), "{budget}");
    assert_eq!(budget.lines().count(), 21);
}

#[test]
fn report_gold_fact_cdf_with_sidecar() {
    let ws = Workspace::new(4, |_| true);
    ws.prepare();
    ok(&["run", "--config", &ws.config()]);
    // Fact 2i is Country_i hosting Leader_i, which the scripted search retrieves.
    let sidecar: String = (0..4).map(|i| format!("q{i}\t{}\n", 2 * i)).collect();
    fs::write(ws.path("gold.tsv"), sidecar).unwrap();
    let gold = ws.p("gold.tsv");
    let out = ok(&["report", "--config", &ws.config(), "--gold-facts", &gold]);
    assert!(out.contains("over 0 trajectories"), "{out}");
    let out = ok(&["report", "--config", &ws.config(), "--gold-facts", &gold, "--cdf-all"]);
    assert!(out.contains("over 4 trajectories (0 never"), "{out}");
    assert_eq!(ws.read_out("gold_cdf.tsv"), "position\tcdf\n1.0000\t1.0000\n");
}
