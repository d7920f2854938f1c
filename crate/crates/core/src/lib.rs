//! Lightweight collective memory (LCM).
//!
//! A group of mutually trusting clients runs a stateful service inside a
//! trusted execution context hosted by an untrusted server. The server can
//! restart the context from stale sealed state (rollback) or run several
//! instances side by side (fork). The protocol lets clients detect both, and
//! reports which operations a majority of clients has already observed.
//!
//! * [`crypto`]: AES-128-GCM envelopes, the chain hash, emulated `get-key`.
//! * [`wire`]: canonical message and state encodings.
//! * [`client`] / [`context`]: the two protocol roles.
//! * [`kvs`]: the key-value store run inside the context.
//! * [`host`]: deterministic simulator of a correct or adversarial server.
//! * [`checker`]: offline fork-linearizability and stability oracles.
//! * [`harness`]: workloads, scenario files, fuzzing and benchmarks.

pub mod checker;
pub mod client;
pub mod context;
pub mod crypto;
pub mod harness;
pub mod host;
pub mod kvs;
pub mod trace;
pub mod wire;

pub use client::{ClientError, ClientState, ClientViolation, Completion, LcmClient, Stability};
pub use context::{
    majority_stable, AdminProvision, ContextError, ContextViolation, Functionality, TrustedContext,
};
pub use crypto::{Digest, Envelope, PlatformIdentity, SymKey};
pub use kvs::{KvsOperation, KvsResult, KvsState};

/// The context specialised to the key-value store.
pub type KvsContext = TrustedContext<KvsState>;
