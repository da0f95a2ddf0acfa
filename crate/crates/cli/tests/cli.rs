//! Runs the `interleave` binary end to end.

use std::path::Path;
use std::process::{Command, Output, Stdio};

fn interleave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interleave"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn script_run_report_export() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    let out = dir.path().join("run");

    let o = interleave(&["script", "--domain", "household", "--per-type", "1", "--out", p(&script)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let backend = format!("scripted:{}", p(&script));
    let o = interleave(&[
        "run", "--domain", "household", "--per-type", "1", "--parallel", "3", "--backend", &backend, "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("trial 0: n=6 errored=0 success=1.0000"), "{}", stdout(&o));
    assert!(out.join("episodes.jsonl").exists() && out.join("report.json").exists());

    let o = interleave(&["report", p(&out)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("domain=household strategy=react metric=success"));

    let o = interleave(&["report", p(&out), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["avg"], 1.0);

    let o = interleave(&["export-finetune", p(&out), "--cap", "2"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out.join("finetune.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn errored_episodes_fail_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("empty.json");
    std::fs::write(&script, "").unwrap();
    let backend = format!("scripted:{}", p(&script));
    let out = dir.path().join("run");
    let o = interleave(&["run", "--domain", "wiki-qa", "--strategy", "cot", "--backend", &backend, "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("errored: "), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = interleave(&["run", "--domain", "shop", "--backend", "carrier-pigeon", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scripted:FILE or http"));

    let o = interleave(&["run", "--domain", "shop", "--strategy", "cot", "--backend", "scripted:x", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generated_tasks_feed_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.jsonl");
    let script = dir.path().join("script.json");
    let o = interleave(&["generate-household", "--task", "cool", "--seed", "4", "--count", "3", "--out", p(&tasks)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&tasks).unwrap().lines().count(), 3);

    let common = ["--domain", "household", "--tasks", p(&tasks)];
    let o = interleave(&[&["script"][..], &common, &["--strategy", "react-im", "--out", p(&script)]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let backend = format!("scripted:{}", p(&script));
    let out = dir.path().join("run");
    let o = interleave(&[&["run"][..], &common, &["--strategy", "react-im", "--backend", &backend, "--out", p(&out)]].concat());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("n=3 errored=0 success=1.0000"));
}

#[test]
fn ingest_corpus_segments_text() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.jsonl");
    let out = dir.path().join("corpus.jsonl");
    std::fs::write(
        &input,
        "{\"title\": \"Milhouse\", \"text\": \"Milhouse is a character. He was named after Richard Nixon.\"}\n\
         {\"title\": \"Nixon\", \"sentences\": [\"Nixon was a president.\"]}\n",
    )
    .unwrap();
    let o = interleave(&["ingest-corpus", p(&input), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let corpus = interleave_core::env::wiki::WikiCorpus::load(&out).unwrap();
    assert_eq!(corpus.get("Milhouse").unwrap().sentences.len(), 2);
    assert_eq!(corpus.len(), 2);
}

#[test]
fn tag_report_reads_tag_file() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    let out = dir.path().join("run");
    assert!(interleave(&["script", "--domain", "wiki-fever", "--strategy", "cot", "--out", p(&script)]).status.success());
    let backend = format!("scripted:{}", p(&script));
    let o = interleave(&["run", "--domain", "wiki-fever", "--strategy", "cot", "--backend", &backend, "--out", p(&out)]);
    assert!(o.status.success(), "{}", stdout(&o));

    let tags = dir.path().join("tags.txt");
    std::fs::write(&tags, "# trial:index tag\n0:0 TruePositive\n0:1 Hallucination\n").unwrap();
    let o = interleave(&["tag-report", p(&out), "--tags", p(&tags)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("TruePositive") && text.contains("Hallucination"), "{text}");
    assert_eq!(text.matches("100.0%").count(), 2, "{text}");

    std::fs::write(&tags, "9:9 Hallucination\n").unwrap();
    assert_eq!(interleave(&["tag-report", p(&out), "--tags", p(&tags)]).status.code(), Some(2));
}

#[test]
fn serve_answers_session_requests() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_interleave"))
        .args(["serve", "--addr", &addr, "--token", "s3cret"])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let client = reqwest::blocking::Client::new();
    let url = format!("http://{addr}/sessions");
    let mut status = None;
    for _ in 0..100 {
        match client
            .post(&url)
            .bearer_auth("s3cret")
            .json(&serde_json::json!({"scenario": "edit-demo"}))
            .send()
        {
            Ok(r) => {
                status = Some(r.status().as_u16());
                break;
            }
            Err(_) => std::thread::sleep(std::time::Duration::from_millis(50)),
        }
    }
    let unauthorized = client.post(&url).json(&serde_json::json!({})).send().map(|r| r.status().as_u16());
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(status, Some(201));
    assert_eq!(unauthorized.unwrap(), 401);
}
