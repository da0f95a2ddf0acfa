use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{sha256_hex, suffix_key, Backend, BackendError, CompletionRequest};

pub const DEFAULT_WINDOW: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    Exact,
    Suffix(usize),
}

impl KeyMode {
    pub fn key(&self, prompt: &str) -> String {
        match self {
            KeyMode::Exact => sha256_hex(prompt),
            KeyMode::Suffix(k) => suffix_key(prompt, *k),
        }
    }
}

/// One fixture line: the prompt key and its responses in serving order.
/// `window` is absent for exact keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub responses: Vec<String>,
}

impl FixtureRecord {
    pub fn exact(prompt: &str, responses: Vec<String>) -> Self {
        Self {
            key: sha256_hex(prompt),
            window: None,
            responses,
        }
    }

    pub fn suffix(prompt: &str, window: usize, responses: Vec<String>) -> Self {
        Self {
            key: suffix_key(prompt, window),
            window: Some(window),
            responses,
        }
    }

    fn mode(&self) -> KeyMode {
        self.window.map_or(KeyMode::Exact, KeyMode::Suffix)
    }
}

/// Immutable response table shared by every backend built from one fixture.
#[derive(Debug, Clone, Default)]
pub struct ScriptTable {
    entries: HashMap<(KeyMode, String), Vec<String>>,
    windows: BTreeSet<usize>,
}

impl ScriptTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = FixtureRecord>) -> Self {
        let mut t = Self::new();
        for r in records {
            t.insert(r);
        }
        t
    }

    /// Adds a record; responses for a key already present are appended.
    pub fn insert(&mut self, record: FixtureRecord) {
        let mode = record.mode();
        if let KeyMode::Suffix(k) = mode {
            self.windows.insert(k);
        }
        self.entries
            .entry((mode, record.key))
            .or_default()
            .extend(record.responses);
    }

    /// Adds every entry of `other` whose key is not present yet.
    pub fn merge_distinct(&mut self, other: ScriptTable) {
        self.windows.extend(other.windows);
        for (key, responses) in other.entries {
            self.entries.entry(key).or_insert(responses);
        }
    }

    pub fn insert_exact(&mut self, prompt: &str, responses: Vec<String>) {
        self.insert(FixtureRecord::exact(prompt, responses));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, BackendError> {
        let mut records = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| BackendError::Unavailable(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line)
                .map_err(|e| BackendError::Protocol(format!("fixture line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let file = std::fs::File::open(path)
            .map_err(|e| BackendError::Unavailable(format!("{}: {e}", path.display())))?;
        Self::read(std::io::BufReader::new(file))
    }

    /// Writes records sorted by key so output is stable.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort_by(|a, b| (&a.1, window_of(a.0)).cmp(&(&b.1, window_of(b.0))));
        for k in keys {
            let rec = FixtureRecord {
                key: k.1.clone(),
                window: window_of(k.0),
                responses: self.entries[k].clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    fn lookup_keys(&self, prompt: &str) -> Vec<(KeyMode, String)> {
        let mut keys = vec![(KeyMode::Exact, sha256_hex(prompt))];
        for &k in &self.windows {
            keys.push((KeyMode::Suffix(k), suffix_key(prompt, k)));
        }
        keys
    }
}

fn window_of(mode: KeyMode) -> Option<usize> {
    match mode {
        KeyMode::Exact => None,
        KeyMode::Suffix(k) => Some(k),
    }
}

/// Replays responses from a [`ScriptTable`]. Each instance keeps its own
/// read cursors, so building one backend per episode makes replays
/// independent of scheduling.
#[derive(Debug)]
pub struct ScriptedBackend {
    table: Arc<ScriptTable>,
    cursors: Mutex<HashMap<(KeyMode, String), usize>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(table: Arc<ScriptTable>) -> Self {
        Self {
            table,
            cursors: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_table(table: ScriptTable) -> Self {
        Self::new(Arc::new(table))
    }

    pub fn table(&self) -> &Arc<ScriptTable> {
        &self.table
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let keys = self.table.lookup_keys(&req.prompt);
        let miss_key = keys[0].1.clone();
        let Some(key) = keys.into_iter().find(|k| self.table.entries.contains_key(k)) else {
            return Err(BackendError::ScriptMiss(miss_key));
        };
        let responses = &self.table.entries[&key];
        let mut cursors = self.cursors.lock().expect("cursor lock poisoned");
        let cursor = cursors.entry(key.clone()).or_insert(0);
        let want = if req.temperature == 0.0 { 1 } else { req.n as usize };
        if *cursor + want > responses.len() {
            return Err(BackendError::ScriptMiss(key.1));
        }
        let taken = &responses[*cursor..*cursor + want];
        *cursor += want;
        if req.temperature == 0.0 {
            Ok(vec![taken[0].clone(); req.n as usize])
        } else {
            Ok(taken.to_vec())
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str) -> CompletionRequest {
        CompletionRequest::greedy(prompt, &["\n"])
    }

    #[test]
    fn table_lookup_in_order() {
        let mut t = ScriptTable::new();
        t.insert_exact("P1", vec!["Thought 1: a".into(), "Thought 1: b".into()]);
        let b = ScriptedBackend::from_table(t);
        assert_eq!(b.complete(&req("P1")).unwrap(), vec!["Thought 1: a"]);
        assert_eq!(b.complete(&req("P1")).unwrap(), vec!["Thought 1: b"]);
        assert!(matches!(b.complete(&req("P1")), Err(BackendError::ScriptMiss(_))));
        assert!(matches!(b.complete(&req("P2")), Err(BackendError::ScriptMiss(_))));
        assert_eq!(b.calls(), 4);
    }

    #[test]
    fn sampled_request_takes_n_in_order() {
        let responses: Vec<String> = (0..21).map(|i| format!("s{i}")).collect();
        let mut t = ScriptTable::new();
        t.insert_exact("P", responses.clone());
        let b = ScriptedBackend::from_table(t);
        let got = b
            .complete(&CompletionRequest::sampled("P", &[], 0.7, 21))
            .unwrap();
        assert_eq!(got, responses);
    }

    #[test]
    fn greedy_samples_are_identical() {
        let mut t = ScriptTable::new();
        t.insert_exact("P", vec!["x".into(), "y".into()]);
        let b = ScriptedBackend::from_table(t);
        let got = b.complete(&CompletionRequest::sampled("P", &[], 0.0, 3)).unwrap();
        assert_eq!(got, vec!["x", "x", "x"]);
    }

    #[test]
    fn suffix_window_survives_preamble_edits() {
        let mut t = ScriptTable::new();
        t.insert(FixtureRecord::suffix("old preamble\nQuestion: q\nThought 1:", 20, vec!["r".into()]));
        let b = ScriptedBackend::from_table(t);
        let got = b.complete(&req("NEW preamble!!\nQuestion: q\nThought 1:")).unwrap();
        assert_eq!(got, vec!["r"]);
    }

    #[test]
    fn fixture_round_trip() {
        let mut t = ScriptTable::new();
        t.insert_exact("a", vec!["1".into()]);
        t.insert(FixtureRecord::suffix("b", 8, vec!["2".into(), "3".into()]));
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        let back = ScriptTable::read(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back.len(), 2);
    }
}
