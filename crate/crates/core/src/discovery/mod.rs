//! Service discovery market: catalog, lexical shortlist retrieval, attacker
//! registration, selection policies and registry-side defenses.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod experiment;
pub mod fixture;

pub use experiment::{run_selection_experiment, SelectionConfig, SelectionReport};

/// Shortlist length used by the retriever.
pub const DEFAULT_SHORTLIST: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiscoveryError {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("shortlist is empty")]
    EmptyShortlist,
    #[error("shortlist length must be at least 1")]
    BadShortlistLength,
    #[error("config error: {0}")]
    Config(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub server_id: String,
    pub domain: String,
    pub name: String,
    pub description: String,
    pub tags: Vec<String>,
    pub trust_score: f64,
    pub price: u64,
    pub latency_hint: u64,
    pub category: String,
    /// Operator account behind the listing. Visible to the registry only.
    pub registrant: String,
    /// Ground truth for scoring. Policies never read it.
    pub adversarial: bool,
}

impl CatalogEntry {
    /// Searchable tokens from name, description and tags.
    pub fn tokens(&self) -> BTreeSet<String> {
        let mut t = tokenize(&self.name);
        t.extend(tokenize(&self.description));
        for tag in &self.tags {
            t.extend(tokenize(tag));
        }
        t
    }

    /// Last two labels of the domain.
    pub fn registrable_domain(&self) -> String {
        let labels: Vec<&str> = self.domain.split('.').collect();
        let n = labels.len();
        if n <= 2 {
            self.domain.clone()
        } else {
            labels[n - 2..].join(".")
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<(), DiscoveryError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.domain.as_str()) {
                return Err(DiscoveryError::Fixture(format!("duplicate domain {}", e.domain)));
            }
            if !(0.0..=1.0).contains(&e.trust_score) {
                return Err(DiscoveryError::Fixture(format!("trust score out of range for {}", e.server_id)));
            }
        }
        Ok(())
    }

    pub fn honest_count(&self, category: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.category == category && !e.adversarial)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryQueries {
    pub category: String,
    pub queries: Vec<String>,
}

impl CategoryQueries {
    /// Distinct content tokens over all queries, in sorted order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v = BTreeSet::new();
        for q in &self.queries {
            v.extend(tokenize(q));
        }
        v.into_iter().collect()
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "api", "best", "data", "endpoint", "find", "for", "get", "i", "me", "need", "of", "service",
    "the", "to", "with", "agents", "provides",
];

/// Lowercased alphanumeric tokens without stopwords.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Defenses {
    /// Reject listings whose description or tag list is keyword-stuffed.
    pub metadata_validation: bool,
    /// Maximum admitted listings per registrant.
    pub sybil_cap: Option<u32>,
    /// Maximum shortlist entries per registrable domain.
    pub diversify: Option<u32>,
}

/// Longest description (in words) and tag list that pass metadata
/// validation.
pub const MAX_DESCRIPTION_TOKENS: usize = 16;
pub const MAX_TAGS: usize = 6;

impl Defenses {
    pub fn admits_metadata(&self, e: &CatalogEntry) -> bool {
        !self.metadata_validation
            || (e.description.split_whitespace().count() <= MAX_DESCRIPTION_TOKENS && e.tags.len() <= MAX_TAGS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackMode {
    /// One listing whose metadata concatenates the category's query
    /// vocabulary.
    MetadataCrafted,
    /// `r` ordinary-looking listings with distinct domains. With
    /// `shared_parent`, the domains are subdomains of one parent.
    Sybil { r: u32, shared_parent: bool },
    /// One bare listing with no tuned metadata.
    Plain,
}

fn slug(category: &str) -> String {
    category.replace('_', "-")
}

fn title(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

/// Draws `n` distinct words from `vocab`.
pub(crate) fn pick<'a, R: Rng>(rng: &mut R, vocab: &'a [String], n: usize) -> Vec<&'a str> {
    let mut idx: Vec<usize> = (0..vocab.len()).collect();
    let n = n.min(idx.len());
    for i in 0..n {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| vocab[i].as_str()).collect()
}

/// An ordinary-looking listing for a category, as an honest operator or a
/// careful Sybil would write it.
pub(crate) fn realistic_entry<R: Rng>(rng: &mut R, category: &str, vocab: &[String]) -> CatalogEntry {
    let name_words = pick(rng, vocab, 2);
    let n_desc = rng.random_range(2..=5);
    let desc_words = pick(rng, vocab, n_desc);
    let n_tags = rng.random_range(1..=3);
    let tag_words = pick(rng, vocab, n_tags);
    let trust = (rng.random_range(0.30..0.95f64) * 100.0).round() / 100.0;
    let desc = match desc_words.split_last() {
        Some((last, rest)) if !rest.is_empty() => format!("Provides {} and {last} for agents", rest.join(" ")),
        Some((last, _)) => format!("Provides {last} for agents"),
        None => "Provides data for agents".into(),
    };
    CatalogEntry {
        server_id: String::new(),
        domain: String::new(),
        name: format!("{} {} API", title(name_words[0]), title(name_words.get(1).copied().unwrap_or("data"))),
        description: desc,
        tags: tag_words.iter().map(|s| s.to_string()).collect(),
        trust_score: trust,
        price: rng.random_range(100..=5_000),
        latency_hint: rng.random_range(50..=800),
        category: category.to_string(),
        registrant: String::new(),
        adversarial: false,
    }
}

/// Registers attacker listings for one category. Admission applies the
/// metadata and Sybil-cap defenses.
pub fn register_attacker(
    catalog: &Catalog,
    queries: &CategoryQueries,
    mode: AttackMode,
    defenses: &Defenses,
    seed: u64,
) -> Catalog {
    let cat = &queries.category;
    let s = slug(cat);
    let vocab = queries.vocabulary();
    let registrant = format!("attacker-{s}");
    let mut listings = Vec::new();
    match mode {
        AttackMode::MetadataCrafted => {
            let words = vocab.join(" ");
            listings.push(CatalogEntry {
                server_id: format!("adv-{s}-crafted"),
                domain: format!("{s}-pro.xyz"),
                name: format!("{} {} API", title(cat), words),
                description: format!("Best {} {}", words, words),
                tags: vocab.clone(),
                trust_score: 0.5,
                price: 1_000,
                latency_hint: 100,
                category: cat.clone(),
                registrant: registrant.clone(),
                adversarial: true,
            });
        }
        AttackMode::Sybil { r, shared_parent } => {
            for i in 0..r {
                // Per-listing streams: the first `r` Sybils are the same at
                // every `r`.
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(cat) ^ ((i as u64 + 1) << 40));
                let mut e = realistic_entry(&mut rng, cat, &vocab);
                e.server_id = format!("adv-{s}-sybil-{i}");
                e.domain = if shared_parent {
                    format!("s{i}.{s}-hub.net")
                } else {
                    format!("{s}-node{i}.app")
                };
                e.registrant = registrant.clone();
                e.adversarial = true;
                listings.push(e);
            }
        }
        AttackMode::Plain => listings.push(CatalogEntry {
            server_id: format!("adv-{s}-plain"),
            domain: format!("{s}-plain.xyz"),
            name: "General Service".into(),
            description: "General purpose endpoint".into(),
            tags: vec!["general".into()],
            trust_score: 0.5,
            price: 1_000,
            latency_hint: 100,
            category: cat.clone(),
            registrant: registrant.clone(),
            adversarial: true,
        }),
    }
    let mut out = catalog.clone();
    let mut per_registrant: BTreeMap<String, u32> = BTreeMap::new();
    for e in &out.entries {
        *per_registrant.entry(e.registrant.clone()).or_default() += 1;
    }
    for e in listings {
        if !defenses.admits_metadata(&e) {
            continue;
        }
        let n = per_registrant.entry(e.registrant.clone()).or_default();
        if defenses.sybil_cap.is_some_and(|cap| *n >= cap) {
            continue;
        }
        *n += 1;
        out.entries.push(e);
    }
    out
}

pub(crate) fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Index into the catalog.
    pub index: usize,
    pub server_id: String,
    /// Count of query tokens found in the listing.
    pub score: u32,
    pub trust_score: f64,
    pub price: u64,
    /// 1-based shortlist position.
    pub rank: usize,
}

/// Top-`k` listings by token overlap, ties broken by trust descending then
/// server id ascending. With `diversify`, at most that many entries per
/// registrable domain are kept.
pub fn retrieve(catalog: &Catalog, query: &str, k: usize, defenses: &Defenses) -> Result<Vec<Candidate>, DiscoveryError> {
    if catalog.is_empty() {
        return Err(DiscoveryError::EmptyCatalog);
    }
    if k == 0 {
        return Err(DiscoveryError::BadShortlistLength);
    }
    let q = tokenize(query);
    let mut scored: Vec<(u32, usize)> = catalog
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.tokens().intersection(&q).count() as u32, i))
        .collect();
    scored.sort_by(|a, b| {
        let (ea, eb) = (&catalog.entries[a.1], &catalog.entries[b.1]);
        b.0.cmp(&a.0)
            .then(eb.trust_score.total_cmp(&ea.trust_score))
            .then(ea.server_id.cmp(&eb.server_id))
    });
    let mut per_domain: BTreeMap<String, u32> = BTreeMap::new();
    let mut out = Vec::with_capacity(k);
    for (score, i) in scored {
        if out.len() == k {
            break;
        }
        let e = &catalog.entries[i];
        if let Some(d) = defenses.diversify {
            let n = per_domain.entry(e.registrable_domain()).or_default();
            if *n >= d {
                continue;
            }
            *n += 1;
        }
        out.push(Candidate {
            index: i,
            server_id: e.server_id.clone(),
            score,
            trust_score: e.trust_score,
            price: e.price,
            rank: out.len() + 1,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SelectionPolicy {
    /// Rank 1.
    LexicalGreedy,
    /// Highest `score · trust`, ties to the better rank.
    TrustWeighted,
    /// Cheapest entry with a non-zero score, ties to the better rank.
    PriceMin,
    /// Samples with weight `exp(u / T)`,
    /// `u = score + 0.1·trust − 1e-6·rank`.
    SoftmaxLexical { temperature: f64 },
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        match self {
            SelectionPolicy::SoftmaxLexical { temperature } if !(*temperature > 0.0 && temperature.is_finite()) => {
                Err(DiscoveryError::Config("softmax temperature must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

fn softmax_utility(c: &Candidate) -> f64 {
    c.score as f64 + 0.1 * c.trust_score - 1e-6 * c.rank as f64
}

/// Picks one candidate. `u` is a uniform draw in `[0, 1)`, used only by the
/// sampling policy.
pub fn select(shortlist: &[Candidate], policy: SelectionPolicy, u: f64) -> Result<&Candidate, DiscoveryError> {
    let first = shortlist.first().ok_or(DiscoveryError::EmptyShortlist)?;
    Ok(match policy {
        SelectionPolicy::LexicalGreedy => first,
        SelectionPolicy::TrustWeighted => shortlist
            .iter()
            .fold(first, |best, c| {
                if c.score as f64 * c.trust_score > best.score as f64 * best.trust_score {
                    c
                } else {
                    best
                }
            }),
        SelectionPolicy::PriceMin => {
            let pool: Vec<&Candidate> = shortlist.iter().filter(|c| c.score > 0).collect();
            let pool = if pool.is_empty() { shortlist.iter().collect() } else { pool };
            pool.into_iter()
                .fold(None::<&Candidate>, |best, c| match best {
                    Some(b) if b.price <= c.price => Some(b),
                    _ => Some(c),
                })
                .expect("pool is non-empty")
        }
        SelectionPolicy::SoftmaxLexical { temperature } => {
            let w = softmax_weights(shortlist, temperature);
            let total: f64 = w.iter().sum();
            let mut target = u * total;
            let mut chosen = shortlist.last().expect("non-empty");
            for (c, wi) in shortlist.iter().zip(&w) {
                if target < *wi {
                    chosen = c;
                    break;
                }
                target -= wi;
            }
            chosen
        }
    })
}

/// Unnormalized sampling weights, max-shifted.
pub fn softmax_weights(shortlist: &[Candidate], temperature: f64) -> Vec<f64> {
    let us: Vec<f64> = shortlist.iter().map(softmax_utility).collect();
    let max = us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    us.iter().map(|u| ((u - max) / temperature).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn entry(id: &str, name: &str, trust: f64) -> CatalogEntry {
        CatalogEntry {
            server_id: id.into(),
            domain: format!("{id}.com"),
            name: name.into(),
            description: String::new(),
            tags: vec![],
            trust_score: trust,
            price: 100,
            latency_hint: 100,
            category: "weather".into(),
            registrant: id.into(),
            adversarial: false,
        }
    }

    fn queries() -> CategoryQueries {
        CategoryQueries {
            category: "weather".into(),
            queries: vec!["find weather forecast".into(), "hourly rain radar".into()],
        }
    }

    #[test]
    fn tokenizer_drops_stopwords() {
        let t = tokenize("Find the best Weather-Forecast API");
        assert_eq!(t.into_iter().collect::<Vec<_>>(), vec!["forecast", "weather"]);
    }

    #[test]
    fn empty_catalog() {
        let err = retrieve(&Catalog::default(), "weather", 10, &Defenses::default()).unwrap_err();
        assert_eq!(err, DiscoveryError::EmptyCatalog);
    }

    #[test]
    fn exact_name_ranks_first() {
        let cat = Catalog {
            entries: vec![
                entry("a", "Rain Service", 0.9),
                entry("b", "Storm Radar Forecast", 0.1),
                entry("c", "Radar", 0.99),
            ],
        };
        let s = retrieve(&cat, "storm radar forecast", 10, &Defenses::default()).unwrap();
        assert_eq!(s[0].server_id, "b");
        assert_eq!(s[0].score, 3);
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn trust_breaks_ties_then_id() {
        let cat = Catalog {
            entries: vec![
                entry("z", "Radar", 0.5),
                entry("y", "Radar", 0.9),
                entry("x", "Radar", 0.5),
            ],
        };
        let s = retrieve(&cat, "radar", 10, &Defenses::default()).unwrap();
        let ids: Vec<_> = s.iter().map(|c| c.server_id.as_str()).collect();
        assert_eq!(ids, ["y", "x", "z"]);
    }

    #[test]
    fn shortlist_is_truncated() {
        let cat = Catalog {
            entries: (0..25).map(|i| entry(&format!("s{i:02}"), "Radar", 0.5)).collect(),
        };
        let s = retrieve(&cat, "radar", 10, &Defenses::default()).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.last().unwrap().rank, 10);
    }

    #[test]
    fn sybil_registration_counts() {
        let base = Catalog {
            entries: vec![entry("h", "Radar", 0.5)],
        };
        let mode = AttackMode::Sybil {
            r: 5,
            shared_parent: false,
        };
        let c = register_attacker(&base, &queries(), mode, &Defenses::default(), 1);
        assert_eq!(c.entries.iter().filter(|e| e.adversarial).count(), 5);
        let domains: BTreeSet<_> = c.entries.iter().map(|e| e.domain.clone()).collect();
        assert_eq!(domains.len(), 6);
        c.validate().unwrap();

        let capped = Defenses {
            sybil_cap: Some(1),
            ..Defenses::default()
        };
        let c = register_attacker(&base, &queries(), mode, &capped, 1);
        assert_eq!(c.entries.iter().filter(|e| e.adversarial).count(), 1);
    }

    #[test]
    fn sybils_nest_across_r() {
        let base = Catalog::default();
        let d = Defenses::default();
        let small = register_attacker(&base, &queries(), AttackMode::Sybil { r: 1, shared_parent: false }, &d, 9);
        let big = register_attacker(&base, &queries(), AttackMode::Sybil { r: 3, shared_parent: false }, &d, 9);
        assert_eq!(small.entries[0], big.entries[0]);
    }

    #[test]
    fn metadata_validation_rejects_crafted() {
        let base = Catalog::default();
        let q = CategoryQueries {
            category: "weather".into(),
            queries: vec![
                "weather forecast temperature rain wind humidity".into(),
                "climate storm radar hourly precipitation alerts".into(),
            ],
        };
        let on = Defenses {
            metadata_validation: true,
            ..Defenses::default()
        };
        assert_eq!(register_attacker(&base, &q, AttackMode::MetadataCrafted, &on, 0).len(), 0);
        assert_eq!(
            register_attacker(&base, &q, AttackMode::MetadataCrafted, &Defenses::default(), 0).len(),
            1
        );
    }

    #[test]
    fn select_single_and_greedy() {
        let cat = Catalog {
            entries: vec![entry("only", "Radar", 0.5)],
        };
        let s = retrieve(&cat, "radar", 10, &Defenses::default()).unwrap();
        for p in [
            SelectionPolicy::LexicalGreedy,
            SelectionPolicy::TrustWeighted,
            SelectionPolicy::PriceMin,
            SelectionPolicy::SoftmaxLexical { temperature: 1.0 },
        ] {
            assert_eq!(select(&s, p, 0.7).unwrap().server_id, "only");
        }
        assert_eq!(select(&[], SelectionPolicy::LexicalGreedy, 0.0), Err(DiscoveryError::EmptyShortlist));
    }

    #[test]
    fn registrable_domain_takes_last_two_labels() {
        let mut e = entry("a", "x", 0.5);
        e.domain = "s3.weather-hub.net".into();
        assert_eq!(e.registrable_domain(), "weather-hub.net");
        e.domain = "weather.io".into();
        assert_eq!(e.registrable_domain(), "weather.io");
    }

    proptest! {
        #[test]
        fn diversification_bounds_shared_parent_share(r in 1u32..12, d in 1u32..4, seed in 0u64..1000) {
            let honest = Catalog {
                entries: (0..8).map(|i| entry(&format!("h{i}"), "Weather Forecast", 0.4)).collect(),
            };
            let mode = AttackMode::Sybil { r, shared_parent: true };
            let cat = register_attacker(&honest, &queries(), mode, &Defenses::default(), seed);
            let def = Defenses { diversify: Some(d), ..Defenses::default() };
            let s = retrieve(&cat, "weather forecast hourly rain radar", DEFAULT_SHORTLIST, &def).unwrap();
            let adv = s.iter().filter(|c| cat.entries[c.index].adversarial).count();
            prop_assert!(adv as u32 <= d);
            prop_assert!((adv as f64) / (DEFAULT_SHORTLIST as f64) <= d as f64 / DEFAULT_SHORTLIST as f64);
        }

        #[test]
        fn retrieval_is_deterministic(seed in 0u64..50) {
            let cat = fixture::synthetic_market(seed).0;
            let a = retrieve(&cat, "weather forecast rain", 10, &Defenses::default()).unwrap();
            let b = retrieve(&cat, "weather forecast rain", 10, &Defenses::default()).unwrap();
            prop_assert!(a == b);
        }
    }
}
