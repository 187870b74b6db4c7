//! HTTP messages and the path between client and server: hop delays, a
//! header-duplicating intermediary, a shared cache and a passive observer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::Millis;

pub type ClientId = u32;

pub const X_PAYMENT: &str = "X-PAYMENT";
pub const CACHE_CONTROL: &str = "Cache-Control";
/// Header value emitted on paid responses when cache hardening is on.
pub const NO_STORE_PRIVATE: &str = "no-store, private";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub id: u64,
    pub client: ClientId,
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
}

impl HttpRequest {
    pub fn get(id: u64, client: ClientId, path: &str) -> Self {
        HttpRequest {
            id,
            client,
            method: "GET".into(),
            path: path.into(),
            headers: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn header_values<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.headers
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Duplicate headers resolve to the last value.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .rev()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl HttpResponse {
    pub fn new(status: u16, body: impl Into<String>) -> Self {
        HttpResponse {
            status,
            headers: Vec::new(),
            body: body.into(),
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .rev()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn has_directive(&self, directive: &str) -> bool {
        self.header(CACHE_CONTROL).is_some_and(|v| {
            v.split(',')
                .any(|d| d.trim().eq_ignore_ascii_case(directive))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CachePolicy {
    #[default]
    Caching,
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Intermediary {
    /// Appends a second `X-PAYMENT` value to a deterministic fraction of
    /// requests.
    MitmDuplicateHeader {
        activation_rate: f64,
        #[serde(default = "default_injected")]
        injected_value: String,
    },
    SharedCache {
        #[serde(default)]
        policy: CachePolicy,
    },
    /// Records payment headers in transit without altering anything.
    Observer,
}

fn default_injected() -> String {
    "aW5qZWN0ZWQ=".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathDelays {
    pub c_to_r: Millis,
    pub r_to_f: Millis,
    pub f_to_r: Millis,
    pub r_to_c: Millis,
    /// Extra delay on every facilitator-to-server message.
    pub delta: Millis,
}

impl Default for PathDelays {
    fn default() -> Self {
        PathDelays {
            c_to_r: 20,
            r_to_f: 0,
            f_to_r: 0,
            r_to_c: 20,
            delta: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub delays: PathDelays,
    pub intermediaries: Vec<Intermediary>,
}

impl PathConfig {
    pub fn validate(&self) -> Result<(), String> {
        for i in &self.intermediaries {
            if let Intermediary::MitmDuplicateHeader { activation_rate, .. } = i {
                if !(0.0..=1.0).contains(activation_rate) {
                    return Err(format!("activation rate {activation_rate} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Total facilitator-to-server delay including the injected `δ`.
    pub fn f_to_r_total(&self) -> Millis {
        self.delays.f_to_r + self.delays.delta
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedResponse {
    pub response: HttpResponse,
    pub stored_at: Millis,
}

/// URL-keyed shared cache. `private` responses are stored under a key that
/// includes the requester identity.
#[derive(Debug, Clone, Default)]
pub struct SharedCache {
    pub policy: CachePolicy,
    entries: BTreeMap<String, CachedResponse>,
}

impl SharedCache {
    pub fn new(policy: CachePolicy) -> Self {
        SharedCache {
            policy,
            entries: BTreeMap::new(),
        }
    }

    fn shared_key(req: &HttpRequest) -> String {
        format!("{} {}", req.method, req.path)
    }

    fn private_key(req: &HttpRequest) -> String {
        format!("{} {} #{}", req.method, req.path, req.client)
    }

    pub fn lookup(&self, req: &HttpRequest) -> Option<&CachedResponse> {
        if self.policy == CachePolicy::PassThrough {
            return None;
        }
        self.entries
            .get(&Self::private_key(req))
            .or_else(|| self.entries.get(&Self::shared_key(req)))
    }

    pub fn store(&mut self, req: &HttpRequest, response: &HttpResponse, now: Millis) -> bool {
        if self.policy == CachePolicy::PassThrough || response.status != 200 || response.has_directive("no-store") {
            return false;
        }
        let key = if response.has_directive("private") {
            Self::private_key(req)
        } else {
            Self::shared_key(req)
        };
        self.entries.insert(
            key,
            CachedResponse {
                response: response.clone(),
                stored_at: now,
            },
        );
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cold-cache reset between experimental conditions.
    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Mitm {
        rate: f64,
        injected: String,
        seen: u64,
    },
    Cache(SharedCache),
    Observer,
}

/// Result of pushing a request through the intermediaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forwarded {
    pub request: HttpRequest,
    pub mutated: bool,
    /// Set when a cache answered without contacting the origin.
    pub cache_hit: Option<HttpResponse>,
    /// Payment header values seen by observers.
    pub observed: Vec<String>,
}

/// Stateful client-to-server path.
#[derive(Debug, Clone)]
pub struct WebPath {
    config: PathConfig,
    stages: Vec<Stage>,
}

/// Whether the `i`-th request (0-based) is hit at a given activation rate.
/// Exactly `⌊n·rate⌋` of the first `n` requests activate.
pub fn mitm_activates(i: u64, rate: f64) -> bool {
    ((i + 1) as f64 * rate).floor() > (i as f64 * rate).floor()
}

impl WebPath {
    pub fn new(config: PathConfig) -> Self {
        let stages = config
            .intermediaries
            .iter()
            .map(|i| match i {
                Intermediary::MitmDuplicateHeader {
                    activation_rate,
                    injected_value,
                } => Stage::Mitm {
                    rate: *activation_rate,
                    injected: injected_value.clone(),
                    seen: 0,
                },
                Intermediary::SharedCache { policy } => Stage::Cache(SharedCache::new(*policy)),
                Intermediary::Observer => Stage::Observer,
            })
            .collect();
        WebPath { config, stages }
    }

    pub fn config(&self) -> &PathConfig {
        &self.config
    }

    pub fn delays(&self) -> &PathDelays {
        &self.config.delays
    }

    /// Client-to-server direction, applying intermediaries in order.
    pub fn forward(&mut self, mut request: HttpRequest) -> Forwarded {
        let mut mutated = false;
        let mut observed = Vec::new();
        for stage in &mut self.stages {
            match stage {
                Stage::Mitm { rate, injected, seen } => {
                    if mitm_activates(*seen, *rate) {
                        request.headers.push((X_PAYMENT.into(), injected.clone()));
                        mutated = true;
                    }
                    *seen += 1;
                }
                Stage::Cache(cache) => {
                    if let Some(hit) = cache.lookup(&request) {
                        let response = hit.response.clone();
                        return Forwarded {
                            request,
                            mutated,
                            cache_hit: Some(response),
                            observed,
                        };
                    }
                }
                Stage::Observer => observed.extend(request.header_values(X_PAYMENT).map(str::to_string)),
            }
        }
        Forwarded {
            request,
            mutated,
            cache_hit: None,
            observed,
        }
    }

    /// Server-to-client direction: caches see the origin response.
    pub fn on_response(&mut self, request: &HttpRequest, response: &HttpResponse, now: Millis) {
        for stage in self.stages.iter_mut().rev() {
            if let Stage::Cache(cache) = stage {
                cache.store(request, response, now);
            }
        }
    }

    pub fn clear_caches(&mut self) {
        for stage in &mut self.stages {
            if let Stage::Cache(c) = stage {
                c.clear();
            }
        }
    }
}
