//! Wikipedia-style search/lookup/finish environment.
//!
//! Pages come from a [`PageSource`]: the offline [`WikiCorpus`] (default) or
//! [`LiveWiki`], a MediaWiki API client. Both yield the same
//! [`Fetch`] results so the environment logic is shared.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::sync::{Arc, LazyLock, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{hash_of, EnvError, EnvStep, Environment};
use crate::parser::Syntax;
use crate::trajectory::Action;

/// Sentences returned by a successful search.
pub const SEARCH_SENTENCES: usize = 5;
/// Titles suggested after a failed search.
pub const SUGGESTIONS: usize = 5;
pub const NO_PAGE: &str = "No page loaded.";
pub const NO_MORE: &str = "No more results.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageKind {
    #[default]
    Article,
    /// Exists but is never served by search; a search for it yields
    /// suggestions instead.
    Disambiguation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Page {
    pub title: String,
    pub sentences: Vec<String>,
    /// Length of the lead section in sentences; search returns at most this
    /// many. Absent means the whole page is lead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lead: Option<usize>,
    #[serde(default, skip_serializing_if = "is_article")]
    pub kind: PageKind,
}

fn is_article(kind: &PageKind) -> bool {
    *kind == PageKind::Article
}

impl Page {
    pub fn new(title: impl Into<String>, sentences: Vec<String>) -> Self {
        Self {
            title: title.into(),
            sentences,
            lead: None,
            kind: PageKind::Article,
        }
    }

    /// The first `min(5, lead)` sentences joined by single spaces.
    pub fn summary(&self) -> String {
        let lead = self.lead.unwrap_or(self.sentences.len()).min(self.sentences.len());
        self.sentences[..lead.min(SEARCH_SENTENCES)].join(" ")
    }
}

/// Suggestion list recorded for a specific failed query; overrides the
/// similarity ranking for that query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub query: String,
    pub similar: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusRecord {
    Page(Page),
    Suggestion(Suggestion),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate title `{0}`")]
    DuplicateTitle(String),
    #[error("page `{0}` has no sentences")]
    EmptyPage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result of resolving a search query against a page source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fetch {
    Found(Page),
    Missing { similar: Vec<String> },
}

pub trait PageSource: Send + Sync {
    fn fetch(&self, query: &str) -> Result<Fetch, EnvError>;
}

/// Lowercased, whitespace-collapsed title key.
pub fn title_key(title: &str) -> String {
    title.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Jaccard similarity over normalized title tokens.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Python `repr` of a string, as printed inside suggestion lists.
pub fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

pub fn not_found(query: &str, similar: &[String]) -> String {
    let list: Vec<String> = similar.iter().map(|s| py_repr(s)).collect();
    format!("Could not find [{query}]. Similar: [{}].", list.join(", "))
}

static SENTENCE_END: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.?!](\s+)[A-Z]").unwrap());

/// Splits raw text at sentence punctuation followed by whitespace and an
/// uppercase letter.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    for caps in SENTENCE_END.captures_iter(text) {
        let ws = caps.get(1).unwrap();
        let sentence = text[start..ws.start()].trim();
        if !sentence.is_empty() {
            out.push(sentence.to_string());
        }
        start = ws.end();
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Offline page store.
#[derive(Debug, Clone, Default)]
pub struct WikiCorpus {
    pages: Vec<Page>,
    index: HashMap<String, usize>,
    suggestions: HashMap<String, Vec<String>>,
}

impl WikiCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, page: Page) -> Result<(), CorpusError> {
        if page.sentences.is_empty() {
            return Err(CorpusError::EmptyPage(page.title));
        }
        let key = title_key(&page.title);
        if self.index.contains_key(&key) {
            return Err(CorpusError::DuplicateTitle(page.title));
        }
        self.index.insert(key, self.pages.len());
        self.pages.push(page);
        Ok(())
    }

    pub fn insert_suggestion(&mut self, s: Suggestion) {
        self.suggestions.insert(title_key(&s.query), s.similar);
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, CorpusError> {
        let mut corpus = Self::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            match rec {
                CorpusRecord::Page(p) => corpus.insert(p)?,
                CorpusRecord::Suggestion(s) => corpus.insert_suggestion(s),
            }
        }
        Ok(corpus)
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Self::read(text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn pages(&self) -> &[Page] {
        &self.pages
    }

    pub fn get(&self, title: &str) -> Option<&Page> {
        self.index.get(&title_key(title)).map(|&i| &self.pages[i])
    }

    /// Top titles by Jaccard score, ties broken lexicographically.
    pub fn similar(&self, query: &str, k: usize) -> Vec<String> {
        let mut scored: Vec<(f64, &str)> = self
            .pages
            .iter()
            .map(|p| (jaccard(query, &p.title), p.title.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.into_iter().take(k).map(|(_, t)| t.to_string()).collect()
    }

    /// Writes the corpus back out, pages first, then recorded suggestions
    /// sorted by query.
    pub fn write<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for p in &self.pages {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        let mut queries: Vec<_> = self.suggestions.iter().collect();
        queries.sort();
        for (q, similar) in queries {
            let rec = Suggestion {
                query: q.clone(),
                similar: similar.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

impl PageSource for WikiCorpus {
    fn fetch(&self, query: &str) -> Result<Fetch, EnvError> {
        if let Some(page) = self.get(query).filter(|p| p.kind == PageKind::Article) {
            return Ok(Fetch::Found(page.clone()));
        }
        let similar = match self.suggestions.get(&title_key(query)) {
            Some(recorded) => recorded.iter().take(SUGGESTIONS).cloned().collect(),
            None => self.similar(query, SUGGESTIONS),
        };
        Ok(Fetch::Missing { similar })
    }
}

// ---------------------------------------------------------------------------
// Live source

pub const ENV_WIKI_URL: &str = "INTERLEAVE_WIKI_URL";
pub const ENV_WIKI_MIN_INTERVAL_MS: &str = "INTERLEAVE_WIKI_MIN_INTERVAL_MS";

/// Fetches a URL and returns the body. Abstracted so recorded responses can
/// stand in for the network.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<String, EnvError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, EnvError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent("interleave/0.1")
            .build()
            .map_err(|e| EnvError::Fault(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<String, EnvError> {
        let resp = self
            .client
            .get(url)
            .send()
            .map_err(|e| EnvError::Fault(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EnvError::Fault(format!("{url}: {}", resp.status())));
        }
        resp.text().map_err(|e| EnvError::Fault(e.to_string()))
    }
}

/// Recorded url → body table.
#[derive(Debug, Clone, Default)]
pub struct RecordedTransport {
    pub responses: HashMap<String, String>,
}

impl Transport for RecordedTransport {
    fn get(&self, url: &str) -> Result<String, EnvError> {
        self.responses
            .get(url)
            .cloned()
            .ok_or_else(|| EnvError::Fault(format!("no recorded response for {url}")))
    }
}

/// MediaWiki API client: plain-text extracts for pages and opensearch for
/// suggestions. Requests are spaced by at least `min_interval`.
pub struct LiveWiki {
    endpoint: String,
    transport: Box<dyn Transport>,
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl LiveWiki {
    pub fn new(endpoint: impl Into<String>, transport: Box<dyn Transport>, min_interval: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            transport,
            min_interval,
            last: Mutex::new(None),
        }
    }

    pub fn from_env() -> Result<Self, EnvError> {
        let endpoint = std::env::var(ENV_WIKI_URL)
            .unwrap_or_else(|_| "https://en.wikipedia.org/w/api.php".to_string());
        let interval = std::env::var(ENV_WIKI_MIN_INTERVAL_MS)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(200);
        Ok(Self::new(
            endpoint,
            Box::new(HttpTransport::new(Duration::from_secs(30))?),
            Duration::from_millis(interval),
        ))
    }

    pub fn extract_url(&self, title: &str) -> String {
        format!(
            "{}?action=query&format=json&prop=extracts|pageprops&explaintext=1&redirects=1&titles={}",
            self.endpoint,
            encode(title)
        )
    }

    pub fn opensearch_url(&self, query: &str) -> String {
        format!(
            "{}?action=opensearch&format=json&limit={}&search={}",
            self.endpoint,
            SUGGESTIONS,
            encode(query)
        )
    }

    fn get(&self, url: &str) -> Result<serde_json::Value, EnvError> {
        {
            let mut last = self.last.lock().expect("rate lock poisoned");
            if let Some(prev) = *last {
                let since = prev.elapsed();
                if since < self.min_interval {
                    std::thread::sleep(self.min_interval - since);
                }
            }
            *last = Some(Instant::now());
        }
        let body = self.transport.get(url)?;
        serde_json::from_str(&body).map_err(|e| EnvError::Fault(format!("{url}: {e}")))
    }
}

fn encode(text: &str) -> String {
    let mut out = String::new();
    for b in text.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            b' ' => out.push('+'),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

impl PageSource for LiveWiki {
    fn fetch(&self, query: &str) -> Result<Fetch, EnvError> {
        let v = self.get(&self.extract_url(query))?;
        let pages = v["query"]["pages"]
            .as_object()
            .ok_or_else(|| EnvError::Fault("malformed extract response".into()))?;
        for page in pages.values() {
            if page.get("missing").is_some() {
                continue;
            }
            if page["pageprops"].get("disambiguation").is_some() {
                continue;
            }
            let title = page["title"].as_str().unwrap_or(query).to_string();
            let extract = page["extract"].as_str().unwrap_or("");
            let lead_text = extract.split("\n\n").next().unwrap_or("");
            let lead = segment_sentences(&lead_text.replace('\n', " "));
            let sentences = segment_sentences(&extract.replace('\n', " "));
            if sentences.is_empty() {
                continue;
            }
            return Ok(Fetch::Found(Page {
                title,
                lead: Some(lead.len().max(1)),
                sentences,
                kind: PageKind::Article,
            }));
        }
        let s = self.get(&self.opensearch_url(query))?;
        let similar = s[1]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|t| t.as_str().map(str::to_string))
                    .take(SUGGESTIONS)
                    .collect()
            })
            .unwrap_or_default();
        Ok(Fetch::Missing { similar })
    }
}

// ---------------------------------------------------------------------------
// Environment

/// Per-episode cursor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct WikiCursor {
    pub page: Option<Page>,
    pub keyword: Option<String>,
    pub matches: Vec<String>,
    /// Number of matches already returned.
    pub position: usize,
}

pub struct WikiEnv {
    source: Arc<dyn PageSource>,
    cursor: WikiCursor,
}

impl WikiEnv {
    pub fn new(source: Arc<dyn PageSource>) -> Self {
        Self {
            source,
            cursor: WikiCursor::default(),
        }
    }

    pub fn cursor(&self) -> &WikiCursor {
        &self.cursor
    }

    pub fn search(&mut self, entity: &str) -> Result<String, EnvError> {
        self.cursor = WikiCursor::default();
        match self.source.fetch(entity.trim())? {
            Fetch::Found(page) => {
                let obs = page.summary();
                self.cursor.page = Some(page);
                Ok(obs)
            }
            Fetch::Missing { similar } => Ok(not_found(entity, &similar)),
        }
    }

    pub fn lookup(&mut self, keyword: &str) -> String {
        let Some(page) = &self.cursor.page else {
            return NO_PAGE.to_string();
        };
        if self.cursor.keyword.as_deref() != Some(keyword) {
            let needle = keyword.to_lowercase();
            self.cursor.matches = page
                .sentences
                .iter()
                .filter(|s| s.to_lowercase().contains(&needle))
                .cloned()
                .collect();
            self.cursor.keyword = Some(keyword.to_string());
            self.cursor.position = 0;
        }
        let n = self.cursor.matches.len();
        if n == 0 {
            return format!("(Result 0 / 0) {NO_MORE}");
        }
        if self.cursor.position >= n {
            return NO_MORE.to_string();
        }
        let k = self.cursor.position;
        self.cursor.position += 1;
        format!("(Result {} / {}) {}", k + 1, n, self.cursor.matches[k])
    }
}

impl Environment for WikiEnv {
    fn reset(&mut self) -> Result<Option<String>, EnvError> {
        self.cursor = WikiCursor::default();
        Ok(None)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError> {
        match action.verb.as_str() {
            "search" => Ok(EnvStep::cont(self.search(action.arg())?)),
            "lookup" => Ok(EnvStep::cont(self.lookup(action.arg()))),
            "finish" => Ok(EnvStep::done("Episode finished")),
            _ => Ok(EnvStep::cont(format!(
                "Invalid action: {}[{}]",
                action.verb,
                action.args.join(", ")
            ))),
        }
    }

    fn state_hash(&self) -> u64 {
        hash_of(&self.cursor)
    }

    fn syntax(&self) -> Syntax {
        Syntax::Labeled
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Arc<WikiCorpus> {
        let mut c = WikiCorpus::new();
        let sentences = |n: usize| (1..=n).map(|i| format!("Sentence {i} mentions apple.")).collect();
        c.insert(Page::new("Seven", sentences(7))).unwrap();
        c.insert(Page::new("Five", sentences(5))).unwrap();
        c.insert(Page::new("Three", sentences(3))).unwrap();
        c.insert(Page {
            lead: Some(1),
            ..Page::new("Lead", sentences(4))
        })
        .unwrap();
        c.insert(Page {
            kind: PageKind::Disambiguation,
            ..Page::new("Seven Seas", sentences(1))
        })
        .unwrap();
        c.insert(Page::new("Arthur's Magazine", vec!["A.".into()])).unwrap();
        Arc::new(c)
    }

    #[test]
    fn first_five_rule() {
        let mut env = WikiEnv::new(corpus());
        for (title, n) in [("Seven", 5), ("Five", 5), ("Three", 3), ("Lead", 1)] {
            let obs = env.search(title).unwrap();
            assert_eq!(obs.matches("Sentence").count(), n, "{title}");
        }
    }

    #[test]
    fn miss_returns_five_suggestions() {
        let mut env = WikiEnv::new(corpus());
        let obs = env.search("Seven Seas").unwrap();
        assert!(obs.starts_with("Could not find [Seven Seas]. Similar: ['Seven Seas', 'Seven', "));
        assert_eq!(env.cursor().page, None);
        assert_eq!(env.lookup("apple"), NO_PAGE);
    }

    #[test]
    fn repr_quoting() {
        assert_eq!(py_repr("Arthur's Magazine"), "\"Arthur's Magazine\"");
        assert_eq!(py_repr("Adam Powell"), "'Adam Powell'");
        assert_eq!(py_repr("a'b\"c"), "'a\\'b\"c'");
    }

    #[test]
    fn lookup_iterates_and_resets() {
        let mut env = WikiEnv::new(corpus());
        env.search("Three").unwrap();
        assert_eq!(env.lookup("APPLE"), "(Result 1 / 3) Sentence 1 mentions apple.");
        assert_eq!(env.lookup("APPLE"), "(Result 2 / 3) Sentence 2 mentions apple.");
        assert_eq!(env.lookup("sentence 3"), "(Result 1 / 1) Sentence 3 mentions apple.");
        assert_eq!(env.lookup("sentence 3"), NO_MORE);
        assert_eq!(env.lookup("pear"), "(Result 0 / 0) No more results.");
        env.search("Three").unwrap();
        assert_eq!(env.lookup("sentence 3"), "(Result 1 / 1) Sentence 3 mentions apple.");
    }

    #[test]
    fn segmentation_heuristic() {
        assert_eq!(
            segment_sentences("It was 1989. The film aired. e.g. lowercase stays. Ok!"),
            vec!["It was 1989.", "The film aired. e.g. lowercase stays.", "Ok!"]
        );
    }

    #[test]
    fn duplicate_titles_rejected() {
        let mut c = WikiCorpus::new();
        c.insert(Page::new("A  b", vec!["x".into()])).unwrap();
        assert!(matches!(
            c.insert(Page::new("a B", vec!["y".into()])),
            Err(CorpusError::DuplicateTitle(_))
        ));
        assert!(matches!(c.insert(Page::new("c", vec![])), Err(CorpusError::EmptyPage(_))));
    }

    #[test]
    fn live_source_with_recorded_responses() {
        let endpoint = "https://wiki.test/w/api.php";
        let probe = LiveWiki::new(endpoint, Box::new(RecordedTransport::default()), Duration::ZERO);
        let mut responses = HashMap::new();
        responses.insert(
            probe.extract_url("Milhouse"),
            r#"{"query":{"pages":{"1":{"title":"Milhouse Van Houten","extract":"Milhouse is a character. He wears glasses.\n\nMilhouse was named after Richard Nixon."}}}}"#.to_string(),
        );
        responses.insert(
            probe.extract_url("Nowhere"),
            r#"{"query":{"pages":{"-1":{"title":"Nowhere","missing":""}}}}"#.to_string(),
        );
        responses.insert(
            probe.opensearch_url("Nowhere"),
            r#"["Nowhere",["Nowhere Man","Nowhere (film)"],[],[]]"#.to_string(),
        );
        let live = LiveWiki::new(endpoint, Box::new(RecordedTransport { responses }), Duration::ZERO);
        let mut env = WikiEnv::new(Arc::new(live));
        assert_eq!(env.search("Milhouse").unwrap(), "Milhouse is a character. He wears glasses.");
        assert_eq!(
            env.lookup("named after"),
            "(Result 1 / 1) Milhouse was named after Richard Nixon."
        );
        assert_eq!(
            env.search("Nowhere").unwrap(),
            "Could not find [Nowhere]. Similar: ['Nowhere Man', 'Nowhere (film)']."
        );
    }
}
