//! Atomic idempotency claims keyed by payment identity and resource.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::model::{Millis, PayId};

/// Claim table with a fixed TTL. An entry recorded at `t` blocks the key for
/// every `now ≤ t + ttl`; later it is treated as absent.
#[derive(Debug)]
pub struct ClaimStore {
    ttl_ms: Millis,
    claims: Mutex<HashMap<String, Millis>>,
}

impl ClaimStore {
    pub fn new(ttl_ms: Millis) -> Self {
        ClaimStore {
            ttl_ms,
            claims: Mutex::new(HashMap::new()),
        }
    }

    pub fn ttl_ms(&self) -> Millis {
        self.ttl_ms
    }

    pub fn key(pay_id: &PayId, resource_id: &str) -> String {
        format!("{}:{}", pay_id.to_hex(), resource_id)
    }

    /// True iff no unexpired entry existed; the entry is then recorded.
    pub fn claim(&self, pay_id: &PayId, resource_id: &str, now: Millis) -> bool {
        let key = Self::key(pay_id, resource_id);
        let mut claims = self.claims.lock().expect("claim store lock poisoned");
        match claims.get(&key) {
            Some(&at) if now <= at.saturating_add(self.ttl_ms) => false,
            _ => {
                claims.insert(key, now);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.claims.lock().expect("claim store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Clone for ClaimStore {
    fn clone(&self) -> Self {
        ClaimStore {
            ttl_ms: self.ttl_ms,
            claims: Mutex::new(self.claims.lock().expect("claim store lock poisoned").clone()),
        }
    }
}
