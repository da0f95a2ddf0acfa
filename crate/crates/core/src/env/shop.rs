//! Miniature web shop.
//!
//! Pages: the search box, ranked result pages (three items each), product
//! pages with option buttons, and description/features/reviews sub-pages.
//! A purchase ends the episode and is scored by requirement coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{hash_of, EnvError, EnvStep, Environment, Outcome, NOTHING_HAPPENS, THOUGHT_ECHO};
use crate::parser::Syntax;
use crate::trajectory::Action;

pub const RESULTS_PER_PAGE: usize = 3;
pub const MAX_RESULTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionGroup {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub title: String,
    pub price: f64,
    #[serde(default)]
    pub options: Vec<OptionGroup>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionReq {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopGoal {
    pub id: String,
    pub instruction: String,
    pub attributes: Vec<String>,
    #[serde(default)]
    pub options: Vec<OptionReq>,
    pub price_cap: f64,
}

impl ShopGoal {
    pub fn task_spec(&self, step_limit: u32) -> crate::trajectory::TaskSpec {
        crate::trajectory::TaskSpec::new(
            self.id.clone(),
            crate::trajectory::Domain::Shop,
            self.instruction.clone(),
            Some(self.id.clone()),
            step_limit,
        )
    }

    pub fn requirement_count(&self) -> usize {
        self.attributes.len() + self.options.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Purchase {
    pub product: String,
    pub options: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShopScore {
    pub score: f64,
    pub success: bool,
}

/// Equal-weight coverage of attributes, option selections, and the price
/// condition. `None` purchase scores 0.
pub fn score_purchase(goal: &ShopGoal, catalog: &Catalog, purchase: Option<&Purchase>) -> ShopScore {
    let zero = ShopScore {
        score: 0.0,
        success: false,
    };
    let Some(p) = purchase else { return zero };
    let Some(product) = catalog.get(&p.product) else {
        return zero;
    };
    let attrs: BTreeSet<String> = product.attributes.iter().map(|a| a.to_lowercase()).collect();
    let mut covered = goal
        .attributes
        .iter()
        .filter(|a| attrs.contains(&a.to_lowercase()))
        .count();
    covered += goal
        .options
        .iter()
        .filter(|o| {
            p.options
                .get(&o.name)
                .is_some_and(|v| v.eq_ignore_ascii_case(&o.value))
        })
        .count();
    if product.price < goal.price_cap {
        covered += 1;
    }
    let total = goal.requirement_count();
    ShopScore {
        score: covered as f64 / total as f64,
        success: covered == total,
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate product id `{0}`")]
    DuplicateId(String),
    #[error("product `{0}` has a negative price")]
    NegativePrice(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    products: Vec<Product>,
    index: BTreeMap<String, usize>,
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl Catalog {
    pub fn new(products: Vec<Product>) -> Result<Self, CatalogError> {
        let mut c = Self::default();
        for p in products {
            c.insert(p)?;
        }
        Ok(c)
    }

    pub fn insert(&mut self, p: Product) -> Result<(), CatalogError> {
        if p.price < 0.0 {
            return Err(CatalogError::NegativePrice(p.id));
        }
        let key = p.id.to_uppercase();
        if self.index.contains_key(&key) {
            return Err(CatalogError::DuplicateId(p.id));
        }
        self.index.insert(key, self.products.len());
        self.products.push(p);
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, CatalogError> {
        let mut c = Self::default();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Product = serde_json::from_str(&line).map_err(|e| CatalogError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            c.insert(p)?;
        }
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        Self::read(text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn get(&self, id: &str) -> Option<&Product> {
        self.index.get(&id.to_uppercase()).map(|&i| &self.products[i])
    }

    /// Products ranked by the number of distinct query tokens found in
    /// title and description; ties by id; zero-overlap products excluded;
    /// at most [`MAX_RESULTS`].
    pub fn search(&self, query: &str) -> Vec<String> {
        let q = tokens(query);
        let mut scored: Vec<(usize, &str)> = self
            .products
            .iter()
            .map(|p| {
                let doc = tokens(&format!("{} {}", p.title, p.description));
                (q.intersection(&doc).count(), p.id.as_str())
            })
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored
            .into_iter()
            .take(MAX_RESULTS)
            .map(|(_, id)| id.to_string())
            .collect()
    }
}

/// Python-style float text: `85.0`, `10.99`.
pub fn py_float(x: f64) -> String {
    let s = format!("{x}");
    if s.contains(['.', 'e', 'N', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Page {
    Search,
    Results {
        query: String,
        ids: Vec<String>,
        page: usize,
    },
    Product {
        id: String,
        selected: BTreeMap<String, String>,
        back: Box<Page>,
    },
    Detail {
        id: String,
        section: String,
        product: Box<Page>,
    },
    Done,
}

pub struct ShopEnv {
    catalog: std::sync::Arc<Catalog>,
    goal: ShopGoal,
    page: Page,
    purchase: Option<Purchase>,
}

impl ShopEnv {
    pub fn new(catalog: std::sync::Arc<Catalog>, goal: ShopGoal) -> Self {
        Self {
            catalog,
            goal,
            page: Page::Search,
            purchase: None,
        }
    }

    pub fn page(&self) -> &Page {
        &self.page
    }

    pub fn purchase(&self) -> Option<&Purchase> {
        self.purchase.as_ref()
    }

    pub fn score(&self) -> ShopScore {
        score_purchase(&self.goal, &self.catalog, self.purchase.as_ref())
    }

    fn render_results(&self, ids: &[String], page: usize) -> String {
        let mut out = format!("[Back to Search]\nPage {page} (Total results: {})", ids.len());
        if page > 1 {
            out.push_str("\n[Prev]");
        }
        let start = (page - 1) * RESULTS_PER_PAGE;
        if start + RESULTS_PER_PAGE < ids.len() {
            out.push_str("\n[Next]");
        }
        out.push('\n');
        for id in ids.iter().skip(start).take(RESULTS_PER_PAGE) {
            let p = self.catalog.get(id).expect("result ids come from the catalog");
            out.push_str(&format!("\n[{}]\n{}\n${}", p.id, p.title, py_float(p.price)));
        }
        out
    }

    fn render_product(&self, id: &str) -> String {
        let p = self.catalog.get(id).expect("product ids come from the catalog");
        let mut lines = vec!["[Back to Search]".to_string(), "[Prev]".to_string()];
        for g in &p.options {
            let buttons: String = g.values.iter().map(|v| format!("[{v}]")).collect();
            lines.push(format!("{} {buttons}", g.name));
        }
        lines.push(p.title.clone());
        lines.push(format!("Price: ${}", py_float(p.price)));
        lines.push("Rating: N.A.".to_string());
        for b in ["[Description]", "[Features]", "[Reviews]", "[Buy Now]"] {
            lines.push(b.to_string());
        }
        lines.join("\n")
    }

    fn render_detail(&self, id: &str, section: &str) -> String {
        let p = self.catalog.get(id).expect("product ids come from the catalog");
        let body = match section {
            "description" if !p.description.is_empty() => p.description.clone(),
            "features" if !p.features.is_empty() => p.features.join("\n"),
            _ => "N.A.".to_string(),
        };
        format!("[Back to Search]\n[Prev]\n{body}")
    }

    fn click(&mut self, target: &str) -> Option<(String, bool)> {
        let t = target.trim();
        let lower = t.to_lowercase();
        if lower == "back to search" {
            return match self.page {
                Page::Search | Page::Done => None,
                _ => {
                    self.page = Page::Search;
                    Some(("[Search]".to_string(), false))
                }
            };
        }
        match self.page.clone() {
            Page::Search | Page::Done => None,
            Page::Results { query, ids, page } => {
                let pages = ids.len().div_ceil(RESULTS_PER_PAGE).max(1);
                let next = match lower.as_str() {
                    "next" | "next >" if page < pages => Some(page + 1),
                    "prev" | "< prev" if page > 1 => Some(page - 1),
                    _ => None,
                };
                if let Some(n) = next {
                    let obs = self.render_results(&ids, n);
                    self.page = Page::Results { query, ids, page: n };
                    return Some((obs, false));
                }
                let start = (page - 1) * RESULTS_PER_PAGE;
                let visible = ids.iter().skip(start).take(RESULTS_PER_PAGE);
                let id = visible.into_iter().find(|id| id.eq_ignore_ascii_case(t))?.clone();
                let obs = self.render_product(&id);
                self.page = Page::Product {
                    id,
                    selected: BTreeMap::new(),
                    back: Box::new(Page::Results { query, ids, page }),
                };
                Some((obs, false))
            }
            Page::Product { id, mut selected, back } => {
                match lower.as_str() {
                    "prev" | "< prev" => {
                        let obs = match back.as_ref() {
                            Page::Results { ids, page, .. } => self.render_results(ids, *page),
                            _ => return None,
                        };
                        self.page = *back;
                        return Some((obs, false));
                    }
                    "buy now" => {
                        self.purchase = Some(Purchase {
                            product: id.clone(),
                            options: selected,
                        });
                        self.page = Page::Done;
                        let s = self.score();
                        return Some((
                            format!(
                                "Thank you for shopping with us! Your score (min 0.0, max 1.0): {}",
                                py_float(s.score)
                            ),
                            true,
                        ));
                    }
                    "description" | "features" | "reviews" => {
                        let obs = self.render_detail(&id, &lower);
                        self.page = Page::Detail {
                            id: id.clone(),
                            section: lower.clone(),
                            product: Box::new(Page::Product { id, selected, back }),
                        };
                        return Some((obs, false));
                    }
                    _ => {}
                }
                let p = self.catalog.get(&id)?;
                let (group, value) = p.options.iter().find_map(|g| {
                    g.values
                        .iter()
                        .find(|v| v.eq_ignore_ascii_case(t))
                        .map(|v| (g.name.clone(), v.clone()))
                })?;
                selected.insert(group, value.clone());
                self.page = Page::Product { id, selected, back };
                Some((format!("You have clicked {value}."), false))
            }
            Page::Detail { id, product, .. } => {
                if matches!(lower.as_str(), "prev" | "< prev") {
                    let obs = self.render_product(&id);
                    self.page = *product;
                    return Some((obs, false));
                }
                None
            }
        }
    }
}

impl Environment for ShopEnv {
    fn reset(&mut self) -> Result<Option<String>, EnvError> {
        self.page = Page::Search;
        self.purchase = None;
        Ok(None)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError> {
        let result = match action.verb.as_str() {
            "think" => Some((THOUGHT_ECHO.to_string(), false)),
            "search" if self.page == Page::Search => {
                let query = action.arg().to_string();
                let ids = self.catalog.search(&query);
                let obs = self.render_results(&ids, 1);
                self.page = Page::Results { query, ids, page: 1 };
                Some((obs, false))
            }
            "click" => self.click(action.arg()),
            _ => None,
        };
        Ok(match result {
            Some((obs, true)) => EnvStep::done(obs),
            Some((obs, false)) => EnvStep::cont(obs),
            None => EnvStep::cont(NOTHING_HAPPENS),
        })
    }

    fn state_hash(&self) -> u64 {
        let purchase = self.purchase.as_ref().map(|p| (p.product.clone(), p.options.clone()));
        hash_of(&(&self.page, purchase))
    }

    fn syntax(&self) -> Syntax {
        Syntax::Shop
    }

    fn thought_echo(&self) -> Option<&str> {
        Some(THOUGHT_ECHO)
    }

    fn outcome(&self) -> Outcome {
        let s = self.score();
        Outcome {
            success: Some(s.success),
            score: Some(s.score),
            answer: self.purchase.as_ref().map(|p| p.product.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn catalog() -> Arc<Catalog> {
        let p = |id: &str, title: &str, price: f64| Product {
            id: id.into(),
            title: title.into(),
            price,
            options: vec![OptionGroup {
                name: "size".into(),
                values: vec!["small".into(), "large".into()],
            }],
            attributes: vec!["red".into()],
            description: String::new(),
            features: vec![],
        };
        Arc::new(
            Catalog::new(vec![
                p("B2", "red mug large", 12.0),
                p("B1", "red mug", 9.5),
                p("B3", "blue plate", 3.0),
                p("B4", "mug tree", 20.0),
                p("B5", "mug", 1.0),
            ])
            .unwrap(),
        )
    }

    fn goal() -> ShopGoal {
        ShopGoal {
            id: "g".into(),
            instruction: "i want a large red mug, and price lower than 15.00 dollars".into(),
            attributes: vec!["red".into()],
            options: vec![OptionReq {
                name: "size".into(),
                value: "large".into(),
            }],
            price_cap: 15.0,
        }
    }

    fn step(env: &mut ShopEnv, verb: &str, arg: &str) -> EnvStep {
        env.step(&Action::unary(verb, arg)).unwrap()
    }

    #[test]
    fn ranking_and_paging() {
        let c = catalog();
        assert_eq!(c.search("red mug"), vec!["B1", "B2", "B4", "B5"]);
        let mut env = ShopEnv::new(c, goal());
        let obs = step(&mut env, "search", "red mug").observation;
        assert_eq!(
            obs,
            "[Back to Search]\nPage 1 (Total results: 4)\n[Next]\n\n[B1]\nred mug\n$9.5\n[B2]\nred mug large\n$12.0\n[B4]\nmug tree\n$20.0"
        );
        let obs = step(&mut env, "click", "Next").observation;
        assert!(obs.starts_with("[Back to Search]\nPage 2 (Total results: 4)\n[Prev]\n\n[B5]"));
        assert_eq!(step(&mut env, "click", "B1").observation, NOTHING_HAPPENS);
    }

    #[test]
    fn purchase_flow_scores() {
        let mut env = ShopEnv::new(catalog(), goal());
        step(&mut env, "search", "red mug");
        let page = step(&mut env, "click", "b2").observation;
        assert!(page.contains("size [small][large]\nred mug large\nPrice: $12.0\nRating: N.A."));
        assert_eq!(step(&mut env, "click", "large").observation, "You have clicked large.");
        let done = step(&mut env, "click", "Buy Now");
        assert!(done.done);
        assert_eq!(
            done.observation,
            "Thank you for shopping with us! Your score (min 0.0, max 1.0): 1.0"
        );
        assert_eq!(env.outcome().success, Some(true));
        assert_eq!(step(&mut env, "click", "Buy Now").observation, NOTHING_HAPPENS);
    }

    #[test]
    fn partial_scores() {
        let c = catalog();
        let g = goal();
        let buy = |id: &str, size: Option<&str>| Purchase {
            product: id.into(),
            options: size.map(|s| ("size".to_string(), s.to_string())).into_iter().collect(),
        };
        assert_eq!(score_purchase(&g, &c, Some(&buy("B4", None))).score, 1.0 / 3.0);
        assert_eq!(score_purchase(&g, &c, Some(&buy("B1", Some("small")))).score, 2.0 / 3.0);
        assert_eq!(score_purchase(&g, &c, None).score, 0.0);
    }

    #[test]
    fn invalid_widgets() {
        let mut env = ShopEnv::new(catalog(), goal());
        let h = env.state_hash();
        for w in ["Buy Now", "Next", "Back to Search", "B1", "[[", ""] {
            assert_eq!(step(&mut env, "click", w).observation, NOTHING_HAPPENS);
            assert_eq!(env.state_hash(), h);
        }
        step(&mut env, "search", "mug");
        assert_eq!(step(&mut env, "search", "mug").observation, NOTHING_HAPPENS);
    }

    #[test]
    fn detail_pages_round_trip() {
        let mut env = ShopEnv::new(catalog(), goal());
        step(&mut env, "search", "mug");
        let product = step(&mut env, "click", "B1").observation;
        assert_eq!(step(&mut env, "click", "Description").observation, "[Back to Search]\n[Prev]\nN.A.");
        assert_eq!(step(&mut env, "click", "Prev").observation, product);
        assert!(step(&mut env, "click", "Prev").observation.starts_with("[Back to Search]\nPage 1"));
    }

    #[test]
    fn floats() {
        assert_eq!(py_float(85.0), "85.0");
        assert_eq!(py_float(10.99), "10.99");
        assert_eq!(py_float(0.125), "0.125");
    }
}
