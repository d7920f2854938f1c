//! The trusted execution context.
//!
//! The context executes client operations one at a time, assigns each a
//! sequence number, extends the hash chain and keeps one [`VEntry`] per client.
//! Before executing, it checks that the `(t_c, h_c)` a client sends matches
//! the context's record of that client's last operation; a mismatch means the
//! server replayed a message, rolled the context back or forked it, and the
//! context halts.
//!
//! Persistence uses two keys: the snapshot `(s, V, k_C, head)` is encrypted
//! under the protocol-state key `k_P`, and `k_P` itself is sealed under the
//! platform-bound key `k_S`. Only the latter depends on the hardware, which is
//! what makes migration possible.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{
    auth_decrypt, auth_encrypt, chain_hash, get_key, Digest, Envelope, PlatformIdentity, SymKey, KEY_LEN,
};
use crate::wire::{
    AdminCommand, ContextStateSnapshot, InvokeMessage, ReplyMessage, SealedBlobPair, VEntry, WireError,
};

/// Default upper bound on the number of invokes handled per batch.
pub const DEFAULT_MAX_BATCH: usize = 16;

/// The application executed inside the context.
pub trait Functionality: Sized + Default {
    /// Applies `op_bytes` and returns the result bytes. Must be deterministic.
    fn execute(&mut self, op_bytes: &[u8]) -> Vec<u8>;
    fn snapshot(&self) -> Vec<u8>;
    fn restore(bytes: &[u8]) -> Result<Self, WireError>;
}

/// Server misbehaviour detected by the context. Always fatal.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContextViolation {
    #[error("authentication failure on {0}")]
    AuthenticationFailure(&'static str),
    #[error("view mismatch for client {client}: context has ({expected_t}, {expected_h:?}), invoke carries ({got_t}, {got_h:?})")]
    ViewMismatch {
        client: u32,
        expected_t: u64,
        expected_h: Digest,
        got_t: u64,
        got_h: Digest,
    },
    #[error("malformed input: {0}")]
    Malformed(WireError),
    #[error("invoke from client {0} outside the group")]
    UnknownClient(u32),
    #[error("sealed state inconsistent: {0}")]
    CorruptState(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContextError {
    #[error("context halted: {0}")]
    Halted(ContextViolation),
    #[error("protocol violation: {0}")]
    Violation(ContextViolation),
    #[error("context has migrated away")]
    Migrated,
    #[error("context already bootstrapped")]
    AlreadyBootstrapped,
    #[error("context not ready")]
    NotReady,
    #[error("migration target is not a fresh context")]
    TargetNotFresh,
    #[error("unknown client {0}")]
    UnknownClient(u32),
    #[error("duplicate client {0}")]
    DuplicateClient(u32),
    #[error("batch of {0} exceeds the configured maximum")]
    BatchTooLarge(usize),
}

/// Keys and membership an admin injects at bootstrap.
#[derive(Clone, Debug)]
pub struct AdminProvision {
    pub protocol_key: SymKey,
    pub comm_key: SymKey,
    pub clients: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitOutcome {
    /// Nothing on storage; waiting for [`TrustedContext::bootstrap`].
    NeedsBootstrap,
    /// Resumed from sealed state at the given sequence number.
    Recovered { t: u64 },
}

/// Context-side record of one handled invoke. Used by hosts and tests for
/// introspection; never sent on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Executed {
    pub client_id: u32,
    pub t: u64,
    pub t_ack: u64,
    pub prev_h: Digest,
    pub h: Digest,
    pub q: u64,
    pub op_bytes: Vec<u8>,
    pub result: Vec<u8>,
    pub dummy: bool,
    /// Answered from the retry cache without executing.
    pub cached: bool,
}

#[derive(Clone, Debug)]
pub struct Processed {
    pub reply: Envelope,
    /// New sealed state; `None` when nothing changed (cached retry).
    pub blob: Option<SealedBlobPair>,
    pub executed: Executed,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub replies: Vec<(Envelope, Executed)>,
    pub blob: Option<SealedBlobPair>,
    /// Set when the batch stopped early; the context is then halted.
    pub error: Option<ContextError>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Phase {
    Created,
    AwaitingBootstrap,
    Ready,
    Halted(ContextViolation),
    MigratedOut,
}

pub struct TrustedContext<F: Functionality> {
    platform: PlatformIdentity,
    program_id: Vec<u8>,
    epoch: u64,
    sealing_key: SymKey,
    protocol_key: Option<SymKey>,
    comm_key: Option<SymKey>,
    t: u64,
    h: Digest,
    views: BTreeMap<u32, VEntry>,
    app: F,
    phase: Phase,
    max_batch: usize,
    exec_calls: u64,
}

/// Highest sequence number acknowledged by more than half of the group:
/// `max { s in {0} ∪ {V[j].t_ack} : |{ j : V[j].t_ack >= s }| > n/2 }`.
pub fn majority_stable(views: &BTreeMap<u32, VEntry>) -> u64 {
    let mut acks: Vec<u64> = views.values().map(|e| e.t_ack).collect();
    let n = acks.len();
    if n == 0 {
        return 0;
    }
    // The (floor(n/2)+1)-th largest ack is the largest value that more than
    // n/2 entries reach.
    acks.sort_unstable_by(|a, b| b.cmp(a));
    acks[n / 2]
}

impl<F: Functionality> TrustedContext<F> {
    /// Starts a new epoch on `platform`. Derives the sealing key right away.
    pub fn new(platform: PlatformIdentity, program_id: impl Into<Vec<u8>>, epoch: u64) -> Self {
        let program_id = program_id.into();
        let sealing_key = get_key(&platform, &program_id);
        Self {
            platform,
            program_id,
            epoch,
            sealing_key,
            protocol_key: None,
            comm_key: None,
            t: 0,
            h: Digest::ZERO,
            views: BTreeMap::new(),
            app: F::default(),
            phase: Phase::Created,
            max_batch: DEFAULT_MAX_BATCH,
            exec_calls: 0,
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn platform(&self) -> &PlatformIdentity {
        &self.platform
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn program_id(&self) -> &[u8] {
        &self.program_id
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn head(&self) -> Digest {
        self.h
    }

    pub fn views(&self) -> &BTreeMap<u32, VEntry> {
        &self.views
    }

    pub fn app(&self) -> &F {
        &self.app
    }

    pub fn group_size(&self) -> usize {
        self.views.len()
    }

    /// Number of times the application was actually executed in this epoch.
    pub fn exec_calls(&self) -> u64 {
        self.exec_calls
    }

    pub fn is_ready(&self) -> bool {
        self.phase == Phase::Ready
    }

    pub fn violation(&self) -> Option<&ContextViolation> {
        match &self.phase {
            Phase::Halted(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_fresh(&self) -> bool {
        matches!(self.phase, Phase::Created | Phase::AwaitingBootstrap)
    }

    fn halt(&mut self, v: ContextViolation) -> ContextError {
        self.phase = Phase::Halted(v.clone());
        ContextError::Violation(v)
    }

    fn require_ready(&self) -> Result<(), ContextError> {
        match &self.phase {
            Phase::Ready => Ok(()),
            Phase::Halted(v) => Err(ContextError::Halted(v.clone())),
            Phase::MigratedOut => Err(ContextError::Migrated),
            Phase::Created | Phase::AwaitingBootstrap => Err(ContextError::NotReady),
        }
    }

    /// Entry point of every epoch. `loaded` is whatever the host returned
    /// from stable storage; a stale but authentic blob is accepted here and
    /// caught later by the view check.
    pub fn init(&mut self, loaded: Option<&SealedBlobPair>) -> Result<InitOutcome, ContextError> {
        if self.phase != Phase::Created {
            return Err(ContextError::AlreadyBootstrapped);
        }
        let Some(blob) = loaded else {
            self.phase = Phase::AwaitingBootstrap;
            return Ok(InitOutcome::NeedsBootstrap);
        };
        let key_bytes = auth_decrypt(&blob.blob_key, &self.sealing_key)
            .map_err(|_| self.halt(ContextViolation::AuthenticationFailure("blob_key")))?;
        let key_bytes: [u8; KEY_LEN] = key_bytes
            .try_into()
            .map_err(|_| self.halt(ContextViolation::CorruptState("protocol key length")))?;
        let protocol_key = SymKey::from_bytes(key_bytes);
        let plain = auth_decrypt(&blob.blob_state, &protocol_key)
            .map_err(|_| self.halt(ContextViolation::AuthenticationFailure("blob_state")))?;
        let snap = ContextStateSnapshot::decode(&plain).map_err(|e| self.halt(ContextViolation::Malformed(e)))?;
        self.install_snapshot(snap, protocol_key)?;
        Ok(InitOutcome::Recovered { t: self.t })
    }

    fn install_snapshot(&mut self, snap: ContextStateSnapshot, protocol_key: SymKey) -> Result<(), ContextError> {
        // The stored head must dominate argmax(V); it only differs from it
        // after the client holding the latest operation was removed.
        if let Some(top) = snap.views.values().max_by_key(|e| e.t_last) {
            if top.t_last > snap.head_t || (top.t_last == snap.head_t && top.h_last != snap.head_h && top.t_last > 0)
            {
                return Err(self.halt(ContextViolation::CorruptState("head behind V")));
            }
        }
        let app = F::restore(&snap.app_state).map_err(|e| self.halt(ContextViolation::Malformed(e)))?;
        self.app = app;
        self.t = snap.head_t;
        self.h = snap.head_h;
        self.views = snap.views;
        self.comm_key = Some(snap.comm_key);
        self.protocol_key = Some(protocol_key);
        self.phase = Phase::Ready;
        Ok(())
    }

    /// Installs admin-generated keys on a context that found no state.
    pub fn bootstrap(&mut self, provision: AdminProvision) -> Result<SealedBlobPair, ContextError> {
        match self.phase {
            Phase::Created => {
                self.phase = Phase::AwaitingBootstrap;
            }
            Phase::AwaitingBootstrap => {}
            _ => return Err(ContextError::AlreadyBootstrapped),
        }
        let mut views = BTreeMap::new();
        for id in provision.clients {
            if id == 0 || views.insert(id, VEntry::default()).is_some() {
                return Err(ContextError::DuplicateClient(id));
            }
        }
        self.views = views;
        self.protocol_key = Some(provision.protocol_key);
        self.comm_key = Some(provision.comm_key);
        self.t = 0;
        self.h = Digest::ZERO;
        self.app = F::default();
        self.phase = Phase::Ready;
        Ok(self.seal())
    }

    fn snapshot(&self) -> ContextStateSnapshot {
        ContextStateSnapshot {
            head_t: self.t,
            head_h: self.h,
            app_state: self.app.snapshot(),
            views: self.views.clone(),
            comm_key: self.comm_key.clone().expect("ready context has k_C"),
        }
    }

    fn seal(&self) -> SealedBlobPair {
        let protocol_key = self.protocol_key.as_ref().expect("ready context has k_P");
        SealedBlobPair {
            blob_key: auth_encrypt(protocol_key.as_bytes(), &self.sealing_key),
            blob_state: auth_encrypt(&self.snapshot().encode(), protocol_key),
        }
    }

    /// Handles one invoke and seals the resulting state.
    pub fn handle_invoke(&mut self, invoke: &Envelope) -> Result<Processed, ContextError> {
        self.require_ready()?;
        match self.process(invoke) {
            Ok((reply, executed)) => {
                let blob = (!executed.cached).then(|| self.seal());
                Ok(Processed { reply, blob, executed })
            }
            Err(v) => Err(self.halt(v)),
        }
    }

    /// Handles invokes in order and seals once at the end. A violation stops
    /// the batch; replies produced before it are still returned together with
    /// a blob covering them.
    pub fn handle_batch(&mut self, invokes: &[Envelope]) -> Result<BatchOutcome, ContextError> {
        self.require_ready()?;
        if invokes.len() > self.max_batch {
            return Err(ContextError::BatchTooLarge(invokes.len()));
        }
        let mut replies = Vec::with_capacity(invokes.len());
        let mut mutated = false;
        let mut failure = None;
        for env in invokes {
            match self.process(env) {
                Ok((reply, executed)) => {
                    mutated |= !executed.cached;
                    replies.push((reply, executed));
                }
                Err(v) => {
                    failure = Some(v);
                    break;
                }
            }
        }
        let blob = mutated.then(|| self.seal());
        let error = failure.map(|v| self.halt(v));
        Ok(BatchOutcome { replies, blob, error })
    }

    fn process(&mut self, invoke: &Envelope) -> Result<(Envelope, Executed), ContextViolation> {
        let comm_key = self.comm_key.clone().expect("ready context has k_C");
        let plain =
            auth_decrypt(invoke, &comm_key).map_err(|_| ContextViolation::AuthenticationFailure("invoke"))?;
        let msg = InvokeMessage::decode(&plain).map_err(ContextViolation::Malformed)?;
        let i = msg.client_id;
        let entry = self.views.get(&i).ok_or(ContextViolation::UnknownClient(i))?;

        if entry.t_last != msg.t_c || entry.h_last != msg.h_c {
            // Retry of an operation that was executed and stored, but whose
            // reply never arrived: answer from the cache.
            if msg.request.is_retry && entry.t_ack == msg.t_c && entry.t_last > msg.t_c {
                let executed = Executed {
                    client_id: i,
                    t: entry.t_last,
                    t_ack: entry.t_ack,
                    prev_h: msg.h_c,
                    h: entry.h_last,
                    // stability only grows, so capping at t keeps q a valid lower bound
                    q: majority_stable(&self.views).min(entry.t_last),
                    op_bytes: msg.request.op_bytes.clone(),
                    result: entry.last_result.clone(),
                    dummy: msg.request.is_dummy,
                    cached: true,
                };
                let reply = self.seal_reply(&executed, msg.h_c, &comm_key);
                return Ok((reply, executed));
            }
            return Err(ContextViolation::ViewMismatch {
                client: i,
                expected_t: entry.t_last,
                expected_h: entry.h_last,
                got_t: msg.t_c,
                got_h: msg.h_c,
            });
        }

        self.t += 1;
        let result = if msg.request.is_dummy {
            Vec::new()
        } else {
            self.exec_calls += 1;
            self.app.execute(&msg.request.op_bytes)
        };
        let prev_h = self.h;
        self.h = chain_hash(&prev_h, &msg.request.op_bytes, self.t, i);
        self.views.insert(
            i,
            VEntry {
                t_ack: msg.t_c,
                t_last: self.t,
                h_last: self.h,
                last_result: result.clone(),
            },
        );
        let executed = Executed {
            client_id: i,
            t: self.t,
            t_ack: msg.t_c,
            prev_h,
            h: self.h,
            q: majority_stable(&self.views),
            op_bytes: msg.request.op_bytes,
            result,
            dummy: msg.request.is_dummy,
            cached: false,
        };
        let reply = self.seal_reply(&executed, msg.h_c, &comm_key);
        Ok((reply, executed))
    }

    fn seal_reply(&self, executed: &Executed, echo: Digest, comm_key: &SymKey) -> Envelope {
        let reply = ReplyMessage {
            t: executed.t,
            h: executed.h,
            result: executed.result.clone(),
            q: executed.q,
            h_c_echo: echo,
        };
        auth_encrypt(&reply.encode(), comm_key)
    }

    /// Applies an authenticated membership command.
    pub fn handle_admin(&mut self, command: &Envelope) -> Result<SealedBlobPair, ContextError> {
        self.require_ready()?;
        let comm_key = self.comm_key.clone().expect("ready context has k_C");
        let plain = match auth_decrypt(command, &comm_key) {
            Ok(p) => p,
            Err(_) => return Err(self.halt(ContextViolation::AuthenticationFailure("admin command"))),
        };
        let cmd = match AdminCommand::decode(&plain) {
            Ok(c) => c,
            Err(e) => return Err(self.halt(ContextViolation::Malformed(e))),
        };
        match cmd {
            AdminCommand::AddClient { client_id } => {
                if client_id == 0 || self.views.contains_key(&client_id) {
                    return Err(ContextError::DuplicateClient(client_id));
                }
                self.views.insert(client_id, VEntry::default());
            }
            AdminCommand::RemoveClient {
                client_id,
                new_comm_key,
            } => {
                if self.views.remove(&client_id).is_none() {
                    return Err(ContextError::UnknownClient(client_id));
                }
                self.comm_key = Some(new_comm_key);
            }
        }
        Ok(self.seal())
    }

    /// Hands the full state to a fresh context on another platform and stops
    /// serving. Returns the target's first sealed blob pair, sealed under the
    /// target's own platform key.
    pub fn migrate_out(&mut self, target: &mut TrustedContext<F>) -> Result<SealedBlobPair, ContextError> {
        self.require_ready()?;
        if !target.is_fresh() {
            return Err(ContextError::TargetNotFresh);
        }
        let protocol_key = self.protocol_key.clone().expect("ready context has k_P");
        target.install_snapshot(self.snapshot(), protocol_key)?;
        self.phase = Phase::MigratedOut;
        Ok(target.seal())
    }
}

/// Builds an authenticated admin command envelope.
pub fn admin_envelope(cmd: &AdminCommand, comm_key: &SymKey) -> Envelope {
    auth_encrypt(&cmd.encode(), comm_key)
}
