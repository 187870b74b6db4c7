//! Synthetic discovery market and the bundled fixture files.
//!
//! Twelve categories, fifteen queries each. Honest listing counts per
//! category range from 3 (sparse) to 30 (dense).
//!
//! Catalog schema: `{"entries": [CatalogEntry, ...]}`.
//! Query schema: `[{"category": str, "queries": [str; 15]}, ...]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{realistic_entry, pick, Catalog, CategoryQueries, DiscoveryError};

/// Seed the bundled fixtures were generated from.
pub const FIXTURE_SEED: u64 = 0x402;
pub const QUERIES_PER_CATEGORY: usize = 15;

pub const CATALOG_JSON: &str = include_str!("../../fixtures/catalog.json");
pub const QUERIES_JSON: &str = include_str!("../../fixtures/queries.json");

/// `(category, honest listing count, vocabulary)`, sparse to dense.
pub const CATEGORIES: [(&str, usize, [&str; 12]); 12] = [
    (
        "sentiment",
        3,
        ["sentiment", "emotion", "opinion", "review", "tone", "polarity", "social", "text", "mood", "feedback", "brand", "classify"],
    ),
    (
        "weather",
        4,
        ["weather", "forecast", "temperature", "rain", "wind", "humidity", "climate", "storm", "radar", "hourly", "precipitation", "alerts"],
    ),
    (
        "document",
        4,
        ["document", "pdf", "ocr", "extract", "parse", "invoice", "contract", "scan", "summarize", "convert", "layout", "table"],
    ),
    (
        "compliance",
        5,
        ["compliance", "kyc", "aml", "sanctions", "screening", "regulation", "identity", "risk", "policy", "gdpr", "report", "verification"],
    ),
    (
        "analytics",
        6,
        ["analytics", "metrics", "dashboard", "funnel", "cohort", "events", "traffic", "conversion", "retention", "segment", "insights", "tracking"],
    ),
    (
        "image_gen",
        7,
        ["image", "generate", "art", "illustration", "diffusion", "render", "style", "portrait", "logo", "upscale", "picture", "design"],
    ),
    (
        "dns_network",
        8,
        ["dns", "domain", "whois", "lookup", "network", "ip", "latency", "ping", "traceroute", "resolver", "records", "subnet"],
    ),
    (
        "ai_llm",
        10,
        ["llm", "model", "completion", "chat", "inference", "prompt", "embedding", "language", "agent", "reasoning", "tokens", "assistant"],
    ),
    (
        "security",
        12,
        ["security", "vulnerability", "malware", "threat", "cve", "firewall", "phishing", "exploit", "intrusion", "pentest", "hardening", "breach"],
    ),
    (
        "wallet",
        16,
        ["wallet", "balance", "address", "transaction", "history", "portfolio", "custody", "signer", "keys", "transfer", "account", "nft"],
    ),
    (
        "price_data",
        22,
        ["price", "quote", "ticker", "market", "exchange", "rate", "ohlc", "feed", "stock", "fx", "spread", "realtime"],
    ),
    (
        "crypto",
        30,
        ["crypto", "bitcoin", "ethereum", "token", "defi", "blockchain", "swap", "staking", "onchain", "coin", "altcoin", "yield"],
    ),
];

const TEMPLATES: [&str; 5] = [
    "find {} {} {} api",
    "need {} and {} for {}",
    "get {} {} {} data",
    "best {} {} service",
    "{} {} {} {} endpoint",
];

fn fill(template: &str, words: &[&str]) -> String {
    let mut out = String::new();
    let mut it = words.iter();
    let mut parts = template.split("{}").peekable();
    while let Some(p) = parts.next() {
        out.push_str(p);
        if parts.peek().is_some() {
            out.push_str(it.next().expect("enough words"));
        }
    }
    out
}

/// Generates the honest catalog and query sets.
pub fn synthetic_market(seed: u64) -> (Catalog, Vec<CategoryQueries>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut sets = Vec::new();
    for (cat, density, vocab) in CATEGORIES {
        let vocab: Vec<String> = vocab.iter().map(|s| s.to_string()).collect();
        let slug = cat.replace('_', "-");
        let queries = (0..QUERIES_PER_CATEGORY)
            .map(|_| {
                let t = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
                let words = pick(&mut rng, &vocab, t.matches("{}").count());
                fill(t, &words)
            })
            .collect();
        sets.push(CategoryQueries {
            category: cat.to_string(),
            queries,
        });
        for j in 0..density {
            let mut e = realistic_entry(&mut rng, cat, &vocab);
            e.server_id = format!("{slug}-{j:02}");
            e.domain = format!("{slug}-{j:02}.io");
            e.registrant = format!("op-{slug}-{j:02}");
            entries.push(e);
        }
    }
    (Catalog { entries }, sets)
}

pub fn catalog_to_json(c: &Catalog) -> String {
    serde_json::to_string_pretty(c).expect("catalog serializes") + "\n"
}

pub fn queries_to_json(q: &[CategoryQueries]) -> String {
    serde_json::to_string_pretty(q).expect("queries serialize") + "\n"
}

pub fn parse_catalog(text: &str) -> Result<Catalog, DiscoveryError> {
    let c: Catalog = serde_json::from_str(text).map_err(|e| DiscoveryError::Fixture(e.to_string()))?;
    c.validate()?;
    Ok(c)
}

pub fn parse_queries(text: &str) -> Result<Vec<CategoryQueries>, DiscoveryError> {
    let q: Vec<CategoryQueries> = serde_json::from_str(text).map_err(|e| DiscoveryError::Fixture(e.to_string()))?;
    if q.is_empty() || q.iter().any(|c| c.queries.is_empty()) {
        return Err(DiscoveryError::Fixture("every category needs at least one query".into()));
    }
    Ok(q)
}

/// The bundled catalog and query sets.
pub fn bundled() -> (Catalog, Vec<CategoryQueries>) {
    (
        parse_catalog(CATALOG_JSON).expect("bundled catalog parses"),
        parse_queries(QUERIES_JSON).expect("bundled queries parse"),
    )
}
