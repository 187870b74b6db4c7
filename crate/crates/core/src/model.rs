//! x402 message types, canonical payload encoding, payment identity and the
//! simulated signature scheme.
//!
//! # Canonical encoding
//!
//! A payment payload's signed content is rendered as `name=value` lines joined
//! by `\n`, sorted by ASCII field name. Integers are decimal without leading
//! zeros, byte fields (addresses, nonces) are lowercase hex without a prefix,
//! and absent optional fields are omitted. The bytes never carry a trailing
//! newline.
//!
//! # Payment identity
//!
//! `pay_id` is the SHA-256 digest of the canonical bytes. Two payloads that
//! differ only in source representation (field order, whitespace, leading
//! zeros, hex case) therefore share a `pay_id`.
//!
//! # Signatures
//!
//! Signatures are HMAC-SHA256 over the canonical bytes, keyed by the payer's
//! signing secret. Verification goes through a [`SignatureProvider`] that
//! holds the registered secrets, which models perfect unforgeability: a party
//! that does not hold a secret cannot produce a tag that verifies for the
//! corresponding address.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Logical time and durations in milliseconds.
pub type Millis = u64;

/// Default freshness window (60 s).
pub const DEFAULT_FRESHNESS_WINDOW_MS: Millis = 60_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invalid value for field `{name}`: {reason}")]
    InvalidField { name: String, reason: String },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("malformed payload source: {0}")]
    Malformed(String),
    #[error("signing key is not registered for the payer address")]
    UnknownSigner,
}

fn invalid(name: &str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidField {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn parse_hex_bytes<const N: usize>(name: &str, raw: &str) -> Result<[u8; N], ModelError> {
    let trimmed = raw.trim();
    let digits = trimmed
        .strip_prefix("0x")
        .or_else(|| trimmed.strip_prefix("0X"))
        .unwrap_or(trimmed);
    if digits.len() != N * 2 {
        return Err(invalid(name, format!("expected {} hex digits", N * 2)));
    }
    let mut out = [0u8; N];
    hex::decode_to_slice(digits.to_ascii_lowercase(), &mut out).map_err(|e| invalid(name, e.to_string()))?;
    Ok(out)
}

fn parse_decimal(name: &str, raw: &str) -> Result<u64, ModelError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || !trimmed.bytes().all(|b| b.is_ascii_digit()) {
        return Err(invalid(name, "expected a non-negative decimal integer"));
    }
    let digits = trimmed.trim_start_matches('0');
    if digits.is_empty() {
        return Ok(0);
    }
    digits.parse().map_err(|_| invalid(name, "integer out of range"))
}

macro_rules! hex_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            /// Lowercase hex without prefix (the canonical rendering).
            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "0x{}", self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}(0x{})", stringify!($name), &self.to_hex()[..8])
            }
        }

        impl FromStr for $name {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                parse_hex_bytes::<$len>(stringify!($name), s).map($name)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_newtype!(
    /// A 20-byte account address.
    Address,
    20
);
hex_newtype!(
    /// Logical payment identifier derived from the canonical payload bytes.
    PayId,
    32
);
hex_newtype!(
    /// Single-use 32-byte authorization nonce.
    Nonce,
    32
);
hex_newtype!(
    /// Simulated transaction hash.
    TxHash,
    32
);

impl Nonce {
    pub fn from_u64(n: u64) -> Self {
        let mut out = [0u8; 32];
        out[24..].copy_from_slice(&n.to_be_bytes());
        Nonce(out)
    }
}

/// Quote returned with a 402 response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentRequirements {
    pub resource_id: String,
    pub amount: u64,
    pub token: String,
    pub chain_id: u64,
    pub receiver: Address,
    pub expiry: Millis,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl PaymentRequirements {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.resource_id.is_empty() {
            return Err(invalid("resource_id", "must be non-empty"));
        }
        if self.amount == 0 {
            return Err(invalid("amount", "must be positive"));
        }
        Ok(())
    }
}

/// The signed content of a payment payload: every field except the derived
/// `payment_id` and the signature itself.
///
/// `resource_id` and `facilitator` are only populated when the corresponding
/// binding mitigation is enabled; the baseline protocol leaves them out.
///
/// `receiver` is signed so that the settlement destination cannot be chosen by
/// whoever submits the authorization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentFields {
    pub payer_addr: Address,
    pub receiver: Address,
    pub amount: u64,
    pub chain_id: u64,
    pub nonce: Nonce,
    pub ts: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facilitator: Option<Address>,
}

const MANDATORY: [&str; 6] = ["amount", "chain_id", "nonce", "payer_addr", "receiver", "ts"];
const OPTIONAL: [&str; 2] = ["facilitator", "resource_id"];

/// Loosely formatted payment fields as they arrive from a source text, before
/// normalization. Keys are field names, values are the raw textual values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FieldSet(pub BTreeMap<String, String>);

impl FieldSet {
    /// Parses either a JSON object (string or number values) or `name=value`
    /// lines with arbitrary surrounding whitespace.
    pub fn parse(source: &str) -> Result<Self, ModelError> {
        let trimmed = source.trim();
        if trimmed.starts_with('{') {
            Self::parse_json(trimmed)
        } else {
            Self::parse_lines(trimmed)
        }
    }

    fn parse_json(source: &str) -> Result<Self, ModelError> {
        let value: serde_json::Value =
            serde_json::from_str(source).map_err(|e| ModelError::Malformed(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| ModelError::Malformed("expected a JSON object".into()))?;
        let mut out = BTreeMap::new();
        for (k, v) in obj {
            let raw = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                _ => return Err(invalid(k, "expected a string or number")),
            };
            out.insert(k.trim().to_string(), raw);
        }
        Ok(FieldSet(out))
    }

    fn parse_lines(source: &str) -> Result<Self, ModelError> {
        let mut out = BTreeMap::new();
        for line in source.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Malformed(format!("line without `=`: {line}")))?;
            let name = name.trim();
            if out.insert(name.to_string(), value.trim().to_string()).is_some() {
                return Err(ModelError::Malformed(format!("duplicate field `{name}`")));
            }
        }
        Ok(FieldSet(out))
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

impl PaymentFields {
    /// Normalizes a loose field set into typed fields. Keys other than the
    /// signed field names, `payment_id` and `sigma` are rejected.
    pub fn from_field_set(set: &FieldSet) -> Result<Self, ModelError> {
        for key in set.0.keys() {
            let known = MANDATORY.contains(&key.as_str())
                || OPTIONAL.contains(&key.as_str())
                || key == "payment_id"
                || key == "sigma";
            if !known {
                return Err(ModelError::UnknownField(key.clone()));
            }
        }
        let req = |name: &str| set.get(name).ok_or_else(|| ModelError::MissingField(name.to_string()));
        let resource_id = match set.get("resource_id") {
            Some(r) => {
                if r.is_empty() || r.contains('\n') {
                    return Err(invalid("resource_id", "must be a non-empty single line"));
                }
                Some(r.to_string())
            }
            None => None,
        };
        Ok(PaymentFields {
            amount: parse_decimal("amount", req("amount")?)?,
            chain_id: parse_decimal("chain_id", req("chain_id")?)?,
            nonce: Nonce(parse_hex_bytes("nonce", req("nonce")?)?),
            payer_addr: Address(parse_hex_bytes("payer_addr", req("payer_addr")?)?),
            receiver: Address(parse_hex_bytes("receiver", req("receiver")?)?),
            ts: parse_decimal("ts", req("ts")?)?,
            resource_id,
            facilitator: set
                .get("facilitator")
                .map(|f| parse_hex_bytes("facilitator", f).map(Address))
                .transpose()?,
        })
    }

    /// Canonical `name=value` bytes; see the module docs.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut fields: Vec<(&str, String)> = vec![
            ("amount", self.amount.to_string()),
            ("chain_id", self.chain_id.to_string()),
            ("nonce", self.nonce.to_hex()),
            ("payer_addr", self.payer_addr.to_hex()),
            ("receiver", self.receiver.to_hex()),
            ("ts", self.ts.to_string()),
        ];
        if let Some(f) = &self.facilitator {
            fields.push(("facilitator", f.to_hex()));
        }
        if let Some(r) = &self.resource_id {
            fields.push(("resource_id", r.clone()));
        }
        fields.sort_by(|a, b| a.0.cmp(b.0));
        fields
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("\n")
            .into_bytes()
    }

    /// Inverse of [`PaymentFields::canonical_bytes`].
    pub fn decode_canonical(bytes: &[u8]) -> Result<Self, ModelError> {
        let text = std::str::from_utf8(bytes).map_err(|e| ModelError::Malformed(e.to_string()))?;
        let set = FieldSet::parse_lines(text)?;
        if set.0.contains_key("payment_id") || set.0.contains_key("sigma") {
            return Err(ModelError::Malformed("canonical bytes carry no id or signature".into()));
        }
        Self::from_field_set(&set)
    }

    pub fn pay_id(&self) -> PayId {
        PayId(Sha256::digest(self.canonical_bytes()).into())
    }
}

/// Canonical bytes of a loosely formatted field set.
pub fn canonical_encode(fields: &FieldSet) -> Result<Vec<u8>, ModelError> {
    Ok(PaymentFields::from_field_set(fields)?.canonical_bytes())
}

/// Payment identity of a loosely formatted field set.
pub fn derive_pay_id(fields: &FieldSet) -> Result<PayId, ModelError> {
    Ok(PaymentFields::from_field_set(fields)?.pay_id())
}

/// Signed payment payload carried in the `X-PAYMENT` header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentPayload {
    pub payment_id: PayId,
    #[serde(flatten)]
    pub fields: PaymentFields,
    #[serde(with = "hex_vec")]
    pub sigma: Vec<u8>,
}

mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("0x{}", hex::encode(v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s.trim_start_matches("0x")).map_err(serde::de::Error::custom)
    }
}

impl PaymentPayload {
    pub fn pay_id(&self) -> PayId {
        self.payment_id
    }

    /// Header encoding: base64 of a JSON object with sorted keys.
    pub fn to_header(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("payment_id", self.payment_id.to_string());
        map.insert("payer_addr", self.fields.payer_addr.to_string());
        map.insert("receiver", self.fields.receiver.to_string());
        map.insert("amount", self.fields.amount.to_string());
        map.insert("chain_id", self.fields.chain_id.to_string());
        map.insert("nonce", self.fields.nonce.to_string());
        map.insert("ts", self.fields.ts.to_string());
        if let Some(r) = &self.fields.resource_id {
            map.insert("resource_id", r.clone());
        }
        if let Some(f) = &self.fields.facilitator {
            map.insert("facilitator", f.to_string());
        }
        map.insert("sigma", format!("0x{}", hex::encode(&self.sigma)));
        let json = serde_json::to_string(&map).expect("string map serializes");
        base64::engine::general_purpose::STANDARD.encode(json)
    }

    /// Decodes a header value. Any JSON key order, whitespace or integer
    /// padding decodes to the same payload.
    pub fn from_header(value: &str) -> Result<Self, ModelError> {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(value.trim())
            .map_err(|e| ModelError::Malformed(format!("base64: {e}")))?;
        let text = String::from_utf8(raw).map_err(|e| ModelError::Malformed(e.to_string()))?;
        Self::from_source(&text)
    }

    pub fn from_source(source: &str) -> Result<Self, ModelError> {
        let set = FieldSet::parse(source)?;
        let fields = PaymentFields::from_field_set(&set)?;
        let payment_id = set
            .get("payment_id")
            .ok_or_else(|| ModelError::MissingField("payment_id".into()))?
            .parse::<PayId>()?;
        let sigma_raw = set.get("sigma").ok_or_else(|| ModelError::MissingField("sigma".into()))?;
        let sigma = hex::decode(sigma_raw.trim().trim_start_matches("0x").to_ascii_lowercase())
            .map_err(|e| invalid("sigma", e.to_string()))?;
        Ok(PaymentPayload {
            payment_id,
            fields,
            sigma,
        })
    }
}

/// Payer signing secret.
#[derive(Clone, PartialEq, Eq)]
pub struct SigningKey([u8; 32]);

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey({})", self.address())
    }
}

impl SigningKey {
    /// Deterministic key derived from a label, e.g. `"client-0"`.
    pub fn derive(label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"x402-testbed/signing-key\n");
        h.update(label.as_bytes());
        SigningKey(h.finalize().into())
    }

    pub fn address(&self) -> Address {
        let mut h = Sha256::new();
        h.update(b"x402-testbed/address\n");
        h.update(self.0);
        let digest = h.finalize();
        let mut out = [0u8; 20];
        out.copy_from_slice(&digest[..20]);
        Address(out)
    }

    fn tag(&self, msg: &[u8]) -> Vec<u8> {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(msg);
        mac.finalize().into_bytes().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignatureMode {
    /// Only holders of a registered secret can produce verifying signatures.
    #[default]
    WellFormed,
    /// Every signature verifies; models a broken signature scheme in tests.
    ForgeableForTest,
}

/// Registry of signing secrets used to verify signatures.
#[derive(Debug, Clone, Default)]
pub struct SignatureProvider {
    keys: BTreeMap<Address, SigningKey>,
    mode: SignatureMode,
}

impl SignatureProvider {
    pub fn new(mode: SignatureMode) -> Self {
        SignatureProvider {
            keys: BTreeMap::new(),
            mode,
        }
    }

    pub fn mode(&self) -> SignatureMode {
        self.mode
    }

    pub fn register(&mut self, key: SigningKey) -> Address {
        let addr = key.address();
        self.keys.insert(addr, key);
        addr
    }

    /// Derives, registers and returns a labelled key.
    pub fn register_label(&mut self, label: &str) -> (Address, SigningKey) {
        let key = SigningKey::derive(label);
        let addr = self.register(key.clone());
        (addr, key)
    }

    pub fn sign(&self, key: &SigningKey, msg: &[u8]) -> Vec<u8> {
        key.tag(msg)
    }

    pub fn verify(&self, addr: &Address, msg: &[u8], sig: &[u8]) -> bool {
        match self.mode {
            SignatureMode::ForgeableForTest => true,
            SignatureMode::WellFormed => match self.keys.get(addr) {
                Some(key) => {
                    let mut mac = Hmac::<Sha256>::new_from_slice(&key.0).expect("hmac key");
                    mac.update(msg);
                    mac.verify_slice(sig).is_ok()
                }
                None => false,
            },
        }
    }

    /// Signs `fields` and derives the payment id. The key must be registered
    /// here and belong to `fields.payer_addr`.
    pub fn sign_payload(&self, fields: PaymentFields, key: &SigningKey) -> Result<PaymentPayload, ModelError> {
        let addr = key.address();
        if addr != fields.payer_addr || !self.keys.contains_key(&addr) {
            return Err(ModelError::UnknownSigner);
        }
        if let Some(r) = &fields.resource_id {
            if r.is_empty() || r.contains('\n') {
                return Err(invalid("resource_id", "must be a non-empty single line"));
            }
        }
        let bytes = fields.canonical_bytes();
        let sigma = key.tag(&bytes);
        Ok(PaymentPayload {
            payment_id: PayId(Sha256::digest(&bytes).into()),
            fields,
            sigma,
        })
    }

    pub fn verify_payload(&self, pp: &PaymentPayload) -> Result<(), PayloadRejection> {
        let bytes = pp.fields.canonical_bytes();
        if PayId(Sha256::digest(&bytes).into()) != pp.payment_id {
            return Err(PayloadRejection::IdMismatch);
        }
        if !self.verify(&pp.fields.payer_addr, &bytes, &pp.sigma) {
            return Err(PayloadRejection::BadSignature);
        }
        Ok(())
    }
}

/// Reason a payload fails structural verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum PayloadRejection {
    #[error("payment_id does not match the canonical encoding")]
    IdMismatch,
    #[error("signature does not verify for the payer")]
    BadSignature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum FreshnessError {
    #[error("payload timestamp is older than the freshness window")]
    Stale,
    #[error("payload timestamp is too far in the future")]
    FutureDated,
}

/// Accepts iff `ts ∈ [now − window, now + window]`, both ends inclusive.
pub fn validate_freshness(pp: &PaymentPayload, now: Millis, window: Millis) -> Result<(), FreshnessError> {
    check_timestamp(pp.fields.ts, now, window)
}

pub fn check_timestamp(ts: Millis, now: Millis, window: Millis) -> Result<(), FreshnessError> {
    let (ts, now, w) = (ts as i128, now as i128, window as i128);
    if ts < now - w {
        Err(FreshnessError::Stale)
    } else if ts > now + w {
        Err(FreshnessError::FutureDated)
    } else {
        Ok(())
    }
}
