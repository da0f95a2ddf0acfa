//! End-to-end tests of the session API over a real socket.

use std::collections::BTreeMap;

use reqwest::StatusCode;
use serde_json::{json, Value};

use interleave_core::scenario::{act_position, edit_demo};
use interleave_core::{Status, Step};
use interleave_session::{
    router, BranchView, Event, EventBody, EventsPage, ServiceConfig, SessionState, SessionView, Store,
};

struct Client {
    base: String,
    http: reqwest::Client,
    token: Option<String>,
}

async fn start(cfg: ServiceConfig) -> Client {
    let token = cfg.token.clone();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Store::new(cfg))).await });
    Client {
        base: format!("http://{addr}"),
        http: reqwest::Client::new(),
        token,
    }
}

impl Client {
    fn req(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let r = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let resp = self.req(reqwest::Method::POST, path).json(&body).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let resp = self.req(reqwest::Method::GET, path).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap())
    }

    async fn create(&self, body: Value) -> SessionView {
        let (status, v) = self.post("/sessions", body).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        serde_json::from_value(v).unwrap()
    }

    async fn settle(&self, id: &str) -> SessionView {
        let (status, v) = self.get(&format!("/sessions/{id}?wait_ms=5000")).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        serde_json::from_value(v).unwrap()
    }

    async fn events(&self, id: &str, from: u64, wait_ms: u64) -> EventsPage {
        let (status, v) = self
            .get(&format!("/sessions/{id}/events?from={from}&wait_ms={wait_ms}"))
            .await;
        assert_eq!(status, StatusCode::OK, "{v}");
        serde_json::from_value(v).unwrap()
    }

    /// Long-polls until the session is terminal and returns every event.
    async fn drain(&self, id: &str) -> Vec<Event> {
        let mut all = Vec::new();
        let mut from = 0;
        loop {
            let page = self.events(id, from, 2000).await;
            from = page.next;
            all.extend(page.events);
            if page.state.is_terminal() && from == self.settle(id).await.next_seq {
                return all;
            }
        }
    }

    async fn resume(&self, id: &str) -> (StatusCode, Value) {
        self.post(&format!("/sessions/{id}/resume"), json!({})).await
    }

    async fn edit(&self, id: &str, step_index: usize, text: &str) -> (StatusCode, Value) {
        self.post(&format!("/sessions/{id}/edit"), json!({"step_index": step_index, "text": text}))
            .await
    }

    /// Resumes a thought-pausing session until it pauses at `at` or ends.
    async fn run_to_pause(&self, id: &str, at: usize) -> SessionView {
        loop {
            let view = self.settle(id).await;
            match view.state {
                SessionState::Paused { at: p } if p == at => return view,
                SessionState::Paused { .. } => {
                    let (s, v) = self.resume(id).await;
                    assert_eq!(s, StatusCode::OK, "{v}");
                }
                _ => return view,
            }
        }
    }
}

fn demo_body(policy: &str) -> Value {
    json!({"scenario": "edit-demo", "pause_policy": policy})
}

fn current(view: &SessionView) -> &BranchView {
    &view.branches[view.current_branch]
}

fn succeeded(b: &BranchView) -> bool {
    b.outcome.as_ref().and_then(|o| o.success) == Some(true)
}

// ---------------------------------------------------------------------------
// Creation and errors

#[tokio::test(flavor = "multi_thread")]
async fn scripted_session_streams_on_first_poll() {
    let c = start(ServiceConfig::default()).await;
    let view = c.create(demo_body("never")).await;
    assert_eq!(view.domain, "household");
    let page = c.events(&view.id, 0, 2000).await;
    assert!(page.events.iter().any(|e| matches!(e.body, EventBody::Step { .. })));
    let done = c.settle(&view.id).await;
    assert_eq!(done.state, SessionState::Terminal);
    assert_eq!(current(&done).status, Status::StepLimit);
    assert!(!succeeded(current(&done)));
}

#[tokio::test(flavor = "multi_thread")]
async fn create_errors() {
    let c = start(ServiceConfig::default()).await;
    let bad = [
        json!({"task": {"domain": "chess", "question": "x"}, "script": []}),
        json!({"task": {"domain": "wiki-qa"}}),
        json!({"task": {"domain": "wiki-qa", "question": "Who?"}}),
        json!({"scenario": "nope"}),
        json!({"scenario": "edit-demo", "strategy": "cot-sc"}),
        json!({"scenario": "edit-demo", "pause_policy": "sometimes"}),
    ];
    for body in bad {
        let (status, v) = c.post("/sessions", body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {v}");
        assert_eq!(v["error"], "bad_task");
    }
    let (status, v) = c.get("/sessions/s999999").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_session");
    let (status, _) = c.get("/sessions/s999999/events?from=0").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = c.resume("s999999").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn wiki_session_with_inline_script() {
    use interleave_core::agent::script_for;
    use interleave_core::fixtures;
    use interleave_core::prompt::{Composer, Mode};
    use interleave_core::Domain;

    let set = fixtures::bundle(Domain::WikiQa);
    let ex = set.exemplars.iter().find(|e| e.id == "hotpot-milhouse").unwrap();
    let composer = Composer::new(&set, Mode::React, None).unwrap();
    let mut reference = ex.trajectory.clone();
    reference.task.id = "s000001".into();
    reference.task.step_limit = 7;
    let mut buf = Vec::new();
    script_for(&composer, &reference).write(&mut buf).unwrap();
    let script: Vec<Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    let c = start(ServiceConfig::default()).await;
    let view = c
        .create(json!({
            "task": {"domain": "wiki-qa", "question": reference.task.instruction, "gold": reference.task.gold},
            "script": script,
        }))
        .await;
    let done = c.settle(&view.id).await;
    let b = current(&done);
    assert_eq!(b.steps, reference.steps);
    assert_eq!(b.status, reference.status);
}

#[tokio::test(flavor = "multi_thread")]
async fn bearer_token_is_enforced() {
    let mut c = start(ServiceConfig {
        token: Some("s3cret".into()),
        ..Default::default()
    })
    .await;
    c.create(demo_body("manual")).await;
    c.token = None;
    let (status, v) = c.post("/sessions", demo_body("manual")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error"], "unauthorized");
}

// ---------------------------------------------------------------------------
// Pausing

#[tokio::test(flavor = "multi_thread")]
async fn on_every_thought_pauses_after_each_thought() {
    let c = start(ServiceConfig::default()).await;
    let plain = c.create(demo_body("never")).await;
    let plain = c.settle(&plain.id).await;
    let expected: Vec<usize> = current(&plain)
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_thought())
        .map(|(p, _)| p + 1)
        .collect();
    assert_eq!(expected, [2, 4, 26, 30, 34, 40]);

    let view = c.create(demo_body("on_every_thought")).await;
    let mut seen = Vec::new();
    loop {
        let v = c.settle(&view.id).await;
        match v.state {
            SessionState::Paused { at } => {
                let b = current(&v);
                assert_eq!(b.steps.len(), at + 1);
                assert!(b.steps[at - 1].is_thought());
                seen.push(at);
                assert_eq!(c.resume(&view.id).await.0, StatusCode::OK);
            }
            SessionState::Terminal => {
                assert_eq!(current(&v).steps, current(&plain).steps);
                break;
            }
            SessionState::Running => panic!("settle timed out"),
        }
    }
    assert_eq!(seen, expected);
}

#[tokio::test(flavor = "multi_thread")]
async fn manual_policy_starts_paused() {
    let c = start(ServiceConfig::default()).await;
    let view = c.create(demo_body("manual")).await;
    assert_eq!(view.state, SessionState::Paused { at: 0 });
    let (status, _) = c.post(&format!("/sessions/{}/pause", view.id), json!({})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(c.resume(&view.id).await.0, StatusCode::OK);
    let (status, v) = c.post(&format!("/sessions/{}/pause", view.id), json!({})).await;
    assert!(status == StatusCode::OK || status == StatusCode::CONFLICT, "{v}");
    let v = c.settle(&view.id).await;
    assert!(!matches!(v.state, SessionState::Running));
}

// ---------------------------------------------------------------------------
// Editing

#[tokio::test(flavor = "multi_thread")]
async fn two_thought_edits_turn_failure_into_success() {
    let demo = edit_demo();
    let c = start(ServiceConfig::default()).await;

    let unedited = c.create(demo_body("never")).await;
    let unedited = c.settle(&unedited.id).await;
    assert_eq!(current(&unedited).status, Status::StepLimit);

    let id = c.create(demo_body("on_every_thought")).await.id;
    for (k, e) in demo.edits.iter().enumerate() {
        let v = c.run_to_pause(&id, e.position + 1).await;
        assert_eq!(v.state, SessionState::Paused { at: e.position + 1 }, "edit {k}");
        let (status, body) = c.edit(&id, e.position, &e.text).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }
    let v = c.run_to_pause(&id, usize::MAX).await;
    assert_eq!(v.state, SessionState::Terminal);
    assert_eq!(v.branches.len(), 3);
    let last = current(&v);
    assert!(matches!(last.status, Status::Finished { .. }));
    assert!(succeeded(last));
    assert_eq!(last.parent.as_ref().unwrap().position, act_position(23));
    assert_eq!(last.steps[act_position(17)].text(), Some(demo.edits[0].text.as_str()));
    assert_eq!(last.steps[act_position(23)].text(), Some(demo.edits[1].text.as_str()));

    // Pre-edit branches keep their steps up to the pause.
    assert_eq!(v.branches[0].steps[..=act_position(17)], current(&unedited).steps[..=act_position(17)]);
    assert_eq!(v.branches[0].steps.len(), act_position(17) + 2);
    assert_eq!(v.branches[1].steps.len(), act_position(23) + 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn identical_edit_matches_fresh_run() {
    let c = start(ServiceConfig::default()).await;
    let fresh = c.create(demo_body("never")).await;
    let fresh = c.settle(&fresh.id).await;
    let pos = act_position(17);
    let text = current(&fresh).steps[pos].text().unwrap().to_string();

    let id = c.create(demo_body("on_every_thought")).await.id;
    c.run_to_pause(&id, pos + 1).await;
    assert_eq!(c.edit(&id, pos, &text).await.0, StatusCode::OK);
    let v = c.run_to_pause(&id, usize::MAX).await;
    assert_eq!(current(&v).steps, current(&fresh).steps);
    assert_eq!(current(&v).status, current(&fresh).status);
}

#[tokio::test(flavor = "multi_thread")]
async fn edit_errors() {
    let c = start(ServiceConfig::default()).await;
    let id = c.create(demo_body("on_every_thought")).await.id;
    let v = c.run_to_pause(&id, 4).await;
    assert_eq!(v.state, SessionState::Paused { at: 4 });

    let (status, body) = c.edit(&id, 4, "x").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "not_a_thought");
    let (status, body) = c.edit(&id, 5, "x").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "index_out_of_range");
    let (status, body) = c.post(&format!("/sessions/{id}/edit"), json!({"text": "x"})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "malformed");

    let never = c.create(demo_body("never")).await.id;
    c.settle(&never).await;
    let (status, body) = c.edit(&never, 1, "x").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "not_paused");
    assert_eq!(c.resume(&never).await.0, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn deleting_a_thought_truncates_before_it() {
    let c = start(ServiceConfig::default()).await;
    let id = c.create(demo_body("on_every_thought")).await.id;
    c.run_to_pause(&id, 4).await;
    let (status, body) = c.edit(&id, 3, "").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let v: SessionView = serde_json::from_value(body).unwrap();
    let b = &v.branches[1];
    assert_eq!(b.parent.as_ref().unwrap().position, 3);
    assert_eq!(b.steps[..3], v.branches[0].steps[..3]);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_edits_admit_one_writer() {
    let c = start(ServiceConfig::default()).await;
    let id = c.create(demo_body("on_every_thought")).await.id;
    c.run_to_pause(&id, 2).await;
    let (a, b) = tokio::join!(c.edit(&id, 1, "First."), c.edit(&id, 1, "Second."));
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
}

// ---------------------------------------------------------------------------
// Streaming

/// Rebuilds every branch from step and fork events alone.
fn replay_events(events: &[Event]) -> BTreeMap<usize, Vec<Step>> {
    let mut branches: BTreeMap<usize, Vec<Step>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, i as u64);
        match &e.body {
            EventBody::Fork { parent, position, .. } => {
                let prefix = branches[parent][..*position].to_vec();
                assert!(branches.insert(e.branch, prefix).is_none());
            }
            EventBody::Step { position, step, .. } => {
                let b = branches.entry(e.branch).or_default();
                assert_eq!(*position, b.len(), "each position exactly once, in order");
                b.push(step.clone());
            }
            EventBody::State { .. } => {}
        }
    }
    branches
}

#[tokio::test(flavor = "multi_thread")]
async fn stream_is_complete_and_resumable() {
    let demo = edit_demo();
    let c = start(ServiceConfig::default()).await;
    let id = c.create(demo_body("on_every_thought")).await.id;
    let e = &demo.edits[0];
    c.run_to_pause(&id, e.position + 1).await;
    c.edit(&id, e.position, &e.text).await;
    let (events_a, events_b) = tokio::join!(c.drain(&id), async {
        let v = c.run_to_pause(&id, usize::MAX).await;
        (v, c.drain(&id).await)
    });
    let (view, events_b) = events_b;
    assert_eq!(events_a, events_b, "concurrent readers see identical sequences");

    let rebuilt = replay_events(&events_a);
    for b in &view.branches {
        assert_eq!(rebuilt[&b.id], b.steps, "branch {}", b.id);
    }

    let tail = c.events(&id, 3, 0).await;
    assert_eq!(tail.events.first().map(|e| e.seq), Some(3));
    assert_eq!(tail.events[..], events_a[3..]);
}

#[tokio::test(flavor = "multi_thread")]
async fn event_log_is_written_through() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(ServiceConfig {
        log_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    })
    .await;
    let id = c.create(demo_body("never")).await.id;
    let events = c.drain(&id).await;
    let text = std::fs::read_to_string(dir.path().join(format!("{id}.events.jsonl"))).unwrap();
    let logged: Vec<Event> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(logged, events);
}
