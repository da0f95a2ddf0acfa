//! Batch runs end to end: scripted replay, persisted logs, reports, tags,
//! and the finetuning export.

use std::sync::Arc;

use interleave_core::backend::ScriptedBackend;
use interleave_core::combinator::{CombinatorConfig, Strategy};
use interleave_core::eval::{
    export_finetune, read_logs, report_from_logs, run_batch, tag_failure, tag_report, tags_from_logs, write_finetune,
    write_logs, FailureTag,
};
use interleave_core::reference::script_cases;
use interleave_core::suite::{run_case, wiki_cases};
use interleave_core::{Domain, TaskSpec};

fn wiki_batch(strategy: Strategy) -> Vec<interleave_core::eval::EpisodeLog> {
    let cfg = CombinatorConfig::default();
    let cases = wiki_cases(Domain::WikiQa);
    let table = Arc::new(script_cases(&cases, strategy, 1, &cfg));
    let tasks: Vec<TaskSpec> = cases.iter().map(|c| c.task.clone()).collect();
    let run = |task: &TaskSpec, trial: usize| {
        let case = cases.iter().find(|c| c.task.id == task.id).unwrap();
        run_case(case, strategy, trial, Arc::new(ScriptedBackend::new(table.clone())), &cfg)
    };
    run_batch(&tasks, strategy, 1, 3, &run).unwrap().0
}

#[test]
fn logs_survive_a_round_trip() {
    let logs = wiki_batch(Strategy::Cot);
    let dir = tempfile::tempdir().unwrap();
    write_logs(dir.path(), &logs).unwrap();
    let back = read_logs(dir.path()).unwrap();
    assert_eq!(back, logs);
    let report = report_from_logs(&back);
    assert_eq!(report.metric, "em");
    assert_eq!(report.avg, 1.0);
    assert!(report.render_text().contains("trial 0: n=6 errored=0 em=1.0000"));
}

#[test]
fn self_consistency_batch_records_votes() {
    let logs = wiki_batch(Strategy::CotSc);
    for l in &logs {
        let votes = l.result.as_ref().unwrap().votes.as_ref().unwrap();
        assert_eq!(votes.n, 21);
        assert_eq!(votes.count, 21);
    }
}

#[test]
fn tags_and_export() {
    let mut logs = wiki_batch(Strategy::Cot);
    tag_failure(&mut logs[0], FailureTag::ReasoningError);
    tag_failure(&mut logs[1], FailureTag::SearchResultError);
    let rows = tag_report(&tags_from_logs(&logs));
    let total: f64 = rows.iter().map(|r| r.percent).sum();
    assert!((total - 100.0).abs() < 1e-9);

    let records = export_finetune(&logs, Some(4));
    assert_eq!(records.len(), 4);
    assert!(records[0].target.starts_with(&records[0].input));
    let mut out = Vec::new();
    write_finetune(&records, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);
}
