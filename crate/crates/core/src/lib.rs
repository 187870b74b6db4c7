//! Deterministic discrete-event testbed for the x402 HTTP payment protocol.
//!
//! The crate models the four protocol parties (client, resource server,
//! facilitator, settlement chain) together with the web path between them
//! and a Bazaar-style discovery market. On top of those parties it wires the
//! settlement-path, replay, proxy and server-selection attacks, the metric
//! kernel used to score them, and Monte Carlo validation of the security
//! bounds that govern optimistic and conservative execution.
//!
//! Every run is driven by a logical millisecond clock and seeded RNGs, so the
//! same configuration and seed reproduce every trace and report byte for byte.
//! Sweeps fan out across independent simulation instances with rayon when the
//! `parallel` feature is enabled (the default) and run sequentially otherwise.

pub mod chain;
pub mod discovery;
pub mod exec;
pub mod facilitator;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod server;
pub mod settlement;
pub mod sim;
pub mod stats;
pub mod trace;
pub mod web;

pub use model::{Address, PayId, PaymentFields, PaymentPayload, PaymentRequirements, TxHash};
