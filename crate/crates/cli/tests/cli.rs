use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use rollout_eval::annotation::{AnnotationPacket, StudyReport};
use rollout_eval::sampler::EpochPlan;
use rollout_eval::util::read_records;

const BIN: &str = env!("CARGO_BIN_EXE_rollout-eval");

fn run(cwd: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).current_dir(cwd);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(cwd: &Path, args: &[&str]) {
    let out = run(cwd, args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn dataset(dir: &Path) {
    ok(dir, &["synth", "--sessions", "5", "--out", "corpus"]);
    ok(dir, &["ingest", "corpus", "--out", "clips.jsonl"]);
    ok(dir, &["build-qa", "--clips", "clips.jsonl", "--out", "qa.jsonl"]);
}

fn plan_budget(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> usize {
    let mut full = vec!["plan-mix", "--dataset", "qa.jsonl", "--out", "plan.jsonl"];
    full.extend_from_slice(args);
    let out = run(dir, &full, env);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, plans) = read_records::<EpochPlan>(&dir.join("plan.jsonl")).unwrap();
    plans[0].budget
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = run(d, &["build-qa", "--clips", "nope.jsonl", "--out", "qa.jsonl"], &[]);
    assert_eq!(missing.status.code(), Some(1));

    dataset(d);
    let bad_mix = run(d, &["plan-mix", "--dataset", "qa.jsonl", "--mix", "lopsided", "--out", "p.jsonl"], &[]);
    assert_eq!(bad_mix.status.code(), Some(1));

    // bind then release a port so nothing is listening on it
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("127.0.0.1:{port}");
    let unreachable = run(d, &["evaluate", "--dataset", "qa.jsonl", "--endpoint", &endpoint, "--out", "eval"], &[]);
    assert_eq!(unreachable.status.code(), Some(2), "{}", String::from_utf8_lossy(&unreachable.stderr));

    let bad_flag = run(d, &["ingest", "--frobnicate"], &[]);
    assert_eq!(bad_flag.status.code(), Some(1));
}

#[test]
fn flag_beats_env_beats_config_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    std::fs::write(d.join("run.json"), r#"{"budget": 300}"#).unwrap();

    assert_eq!(plan_budget(d, &[], &[]), 1000);
    assert_eq!(plan_budget(d, &["--config", "run.json"], &[]), 300);
    assert_eq!(plan_budget(d, &["--config", "run.json"], &[("ROLLOUT_EVAL_BUDGET", "200")]), 200);
    assert_eq!(
        plan_budget(d, &["--config", "run.json", "--budget", "100"], &[("ROLLOUT_EVAL_BUDGET", "200")]),
        100
    );

    std::fs::write(d.join("bad.json"), r#"{"budgett": 300}"#).unwrap();
    let out = run(d, &["plan-mix", "--dataset", "qa.jsonl", "--out", "p.jsonl", "--config", "bad.json"], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn annotate_export_import_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);

    let mut mock = Command::new(BIN)
        .args(["mock-serve", "--dataset", "qa.jsonl", "--port", "0"])
        .current_dir(d)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut banner = String::new();
    BufReader::new(mock.stderr.take().unwrap()).read_line(&mut banner).unwrap();
    let addr = banner.rsplit(' ').next().unwrap().trim().to_string();
    ok(d, &["evaluate", "--dataset", "qa.jsonl", "--clips", "clips.jsonl", "--endpoint", &addr, "--out", "eval"]);
    mock.kill().unwrap();
    mock.wait().unwrap();

    ok(
        d,
        &["annotate", "export", "--dataset", "qa.jsonl", "--predictions", "eval/predictions.jsonl", "--clips", "clips.jsonl", "--out", "packets.jsonl"],
    );
    let (_, packets) = read_records::<AnnotationPacket>(&d.join("packets.jsonl")).unwrap();
    assert_eq!(packets.len(), 5 * 3 * 6);

    let mut lines = String::new();
    for (i, p) in packets.iter().enumerate() {
        let b = if i == 0 { "incorrect" } else { "correct" };
        lines.push_str(&format!(
            "{{\"packet_id\":\"{}\",\"annotator_id\":\"a\",\"value\":\"correct\",\"timestamp\":1}}\n\
             {{\"packet_id\":\"{}\",\"annotator_id\":\"b\",\"value\":\"{b}\",\"timestamp\":1}}\n",
            p.packet_id, p.packet_id
        ));
    }
    std::fs::write(d.join("primary.jsonl"), lines).unwrap();
    ok(d, &["annotate", "import", "--packets", "packets.jsonl", "--ratings", "ratings.jsonl", "primary.jsonl"]);

    let report = ["annotate", "report", "--packets", "packets.jsonl", "--ratings", "ratings.jsonl", "--group", "overall", "--out", "study.jsonl"];
    // one disagreement still lacks an adjudicator
    assert_eq!(run(d, &report, &[]).status.code(), Some(1));

    std::fs::write(
        d.join("adj.jsonl"),
        format!(
            "{{\"packet_id\":\"{}\",\"annotator_id\":\"c\",\"value\":\"incorrect\",\"role\":\"adjudicator\",\"timestamp\":2}}\n",
            packets[0].packet_id
        ),
    )
    .unwrap();
    ok(d, &["annotate", "import", "--packets", "packets.jsonl", "--ratings", "ratings.jsonl", "adj.jsonl"]);
    ok(d, &report);
    let (_, reports) = read_records::<StudyReport>(&d.join("study.jsonl")).unwrap();
    let n = packets.len() as f64;
    assert!((reports[0].strict.unwrap() - (n - 1.0) / n).abs() < 1e-12);
    assert_eq!(reports[0].n_adjudicated, 1);

    std::fs::write(d.join("stray.jsonl"), "{\"packet_id\":\"zzz\",\"annotator_id\":\"a\",\"value\":\"correct\"}\n").unwrap();
    let stray = run(d, &["annotate", "import", "--packets", "packets.jsonl", "--ratings", "ratings.jsonl", "stray.jsonl"], &[]);
    assert_eq!(stray.status.code(), Some(1));
}
