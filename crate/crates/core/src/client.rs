//! Client side of the protocol.
//!
//! A client keeps the sequence number and chain head of its last completed
//! operation and sends them along with each new invoke. The context checks
//! them against its own record of the client, and the client checks that the
//! reply echoes the chain head it sent. Either mismatch means the server
//! rolled back, forked or replayed something; the client halts for good.

use thiserror::Error;

use crate::crypto::{auth_decrypt, auth_encrypt, CryptoError, Digest, Envelope, SymKey};
use crate::wire::{put_bytes, InvokeMessage, OperationRequest, Reader, ReplyMessage, WireError};

/// Evidence of server misbehaviour observed by a client.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientViolation {
    #[error("reply failed authentication")]
    AuthenticationFailure,
    #[error("reply echoes {got:?}, expected {expected:?}")]
    EchoMismatch { expected: Digest, got: Digest },
    #[error("reply received with no outstanding invoke")]
    UnexpectedReply,
    #[error("malformed reply: {0}")]
    Malformed(WireError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("an operation is already outstanding")]
    PendingOperation,
    #[error("no outstanding operation")]
    NoPending,
    #[error("client halted after violation: {0}")]
    Halted(ClientViolation),
    #[error("protocol violation: {0}")]
    Violation(ClientViolation),
}

impl From<CryptoError> for ClientViolation {
    fn from(_: CryptoError) -> Self {
        ClientViolation::AuthenticationFailure
    }
}

/// What a completed operation returns to the application.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub result: Vec<u8>,
    pub t: u64,
    pub q: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stability {
    StableAmongMajority,
    NotYet,
}

/// Durable client state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientState {
    pub client_id: u32,
    pub t_c: u64,
    pub t_s: u64,
    pub h_c: Digest,
    pub comm_key: SymKey,
    pub pending: Option<OperationRequest>,
}

impl ClientState {
    pub fn new(client_id: u32, comm_key: SymKey) -> Self {
        assert!(client_id >= 1, "client ids start at 1");
        Self {
            client_id,
            t_c: 0,
            t_s: 0,
            h_c: Digest::ZERO,
            comm_key,
            pending: None,
        }
    }

    /// Stable-storage encoding:
    /// `client u32 || t_c u64 || t_s u64 || h_c [32] || k_C [16] || has_pending u8 || [flags u8 || len u32 || op]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.client_id.to_be_bytes());
        out.extend_from_slice(&self.t_c.to_be_bytes());
        out.extend_from_slice(&self.t_s.to_be_bytes());
        out.extend_from_slice(&self.h_c.0);
        out.extend_from_slice(self.comm_key.as_bytes());
        match &self.pending {
            None => out.push(0),
            Some(req) => {
                out.push(1);
                out.push(u8::from(req.is_dummy) | (u8::from(req.is_retry) << 1));
                put_bytes(&mut out, &req.op_bytes);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let client_id = r.u32("client id")?;
        let t_c = r.u64("t_c")?;
        let t_s = r.u64("t_s")?;
        let h_c = Digest(r.take(32, "h_c")?.try_into().unwrap());
        let comm_key = SymKey::from_bytes(r.take(16, "key")?.try_into().unwrap());
        let pending = match r.u8("pending flag")? {
            0 => None,
            1 => {
                let flags = r.u8("flags")?;
                Some(OperationRequest {
                    is_dummy: flags & 1 != 0,
                    is_retry: flags & 2 != 0,
                    op_bytes: r.bytes("op")?.to_vec(),
                })
            }
            _ => return Err(WireError::MalformedMessage("pending flag")),
        };
        r.finish()?;
        if t_s > t_c || client_id == 0 {
            return Err(WireError::MalformedMessage("client state invariant"));
        }
        Ok(Self {
            client_id,
            t_c,
            t_s,
            h_c,
            comm_key,
            pending,
        })
    }
}

/// A protocol client. Strictly sequential: one outstanding operation.
#[derive(Clone, Debug)]
pub struct LcmClient {
    state: ClientState,
    halted: Option<ClientViolation>,
}

impl LcmClient {
    pub fn new(client_id: u32, comm_key: SymKey) -> Self {
        Self::from_state(ClientState::new(client_id, comm_key))
    }

    /// Resumes from a durable snapshot, e.g. after a client crash.
    pub fn from_state(state: ClientState) -> Self {
        Self { state, halted: None }
    }

    pub fn state(&self) -> &ClientState {
        &self.state
    }

    pub fn id(&self) -> u32 {
        self.state.client_id
    }

    pub fn halted(&self) -> Option<&ClientViolation> {
        self.halted.as_ref()
    }

    pub fn is_pending(&self) -> bool {
        self.state.pending.is_some()
    }

    /// Installs a fresh communication key distributed by the admin.
    pub fn rekey(&mut self, comm_key: SymKey) {
        self.state.comm_key = comm_key;
    }

    fn check_live(&self) -> Result<(), ClientError> {
        match &self.halted {
            Some(v) => Err(ClientError::Halted(v.clone())),
            None => Ok(()),
        }
    }

    fn seal_invoke(&self, request: OperationRequest) -> Envelope {
        let msg = InvokeMessage {
            t_c: self.state.t_c,
            h_c: self.state.h_c,
            request,
            client_id: self.state.client_id,
        };
        auth_encrypt(&msg.encode(), &self.state.comm_key)
    }

    pub fn invoke(&mut self, mut op: OperationRequest) -> Result<Envelope, ClientError> {
        self.check_live()?;
        if self.state.pending.is_some() {
            return Err(ClientError::PendingOperation);
        }
        op.is_retry = false;
        let env = self.seal_invoke(op.clone());
        self.state.pending = Some(op);
        Ok(env)
    }

    /// Re-sends the outstanding invoke marked as a retry.
    pub fn retry(&mut self) -> Result<Envelope, ClientError> {
        self.check_live()?;
        let mut op = self.state.pending.clone().ok_or(ClientError::NoPending)?;
        op.is_retry = true;
        Ok(self.seal_invoke(op))
    }

    pub fn handle_reply(&mut self, reply: &Envelope) -> Result<Completion, ClientError> {
        self.check_live()?;
        match self.verify_reply(reply) {
            Ok(msg) => {
                self.state.t_c = msg.t;
                self.state.t_s = msg.q;
                self.state.h_c = msg.h;
                self.state.pending = None;
                Ok(Completion {
                    result: msg.result,
                    t: msg.t,
                    q: msg.q,
                })
            }
            Err(v) => {
                self.halted = Some(v.clone());
                Err(ClientError::Violation(v))
            }
        }
    }

    fn verify_reply(&self, reply: &Envelope) -> Result<ReplyMessage, ClientViolation> {
        let plain = auth_decrypt(reply, &self.state.comm_key)?;
        let msg = ReplyMessage::decode(&plain).map_err(ClientViolation::Malformed)?;
        if self.state.pending.is_none() {
            return Err(ClientViolation::UnexpectedReply);
        }
        if msg.h_c_echo != self.state.h_c {
            return Err(ClientViolation::EchoMismatch {
                expected: self.state.h_c,
                got: msg.h_c_echo,
            });
        }
        Ok(msg)
    }

    pub fn stability_of(&self, t_op: u64) -> Stability {
        debug_assert!(t_op <= self.state.t_c);
        if t_op <= self.state.t_s {
            Stability::StableAmongMajority
        } else {
            Stability::NotYet
        }
    }
}
