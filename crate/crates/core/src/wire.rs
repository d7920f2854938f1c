//! Plaintext message and state formats with their canonical byte encodings.
//!
//! | item                  | layout                                                                                      |
//! |-----------------------|---------------------------------------------------------------------------------------------|
//! | `OperationRequest`    | `flags u8 (bit0 dummy, bit1 retry) \|\| len u32 \|\| op`                                    |
//! | `InvokeMessage`       | `0x01 \|\| t_c u64 \|\| h_c [32] \|\| client u32 \|\| OperationRequest`                     |
//! | `ReplyMessage`        | `0x02 \|\| t u64 \|\| h [32] \|\| q u64 \|\| h_c' [32] \|\| len u32 \|\| r`                 |
//! | `AdminCommand`        | `0x03 \|\| 0x01 \|\| client u32` (add), `0x03 \|\| 0x02 \|\| client u32 \|\| k_C' [16]` (remove) |
//! | `VEntry`              | `t_ack u64 \|\| t_last u64 \|\| h_last [32] \|\| len u32 \|\| last_result`                  |
//! | `ContextStateSnapshot`| `head_t u64 \|\| head_h [32] \|\| k_C [16] \|\| count u32 \|\| (client u32 \|\| VEntry)* \|\| len u32 \|\| s` |
//! | `SealedBlobPair`      | `len u32 \|\| blob_key \|\| len u32 \|\| blob_state` (each an envelope)                      |
//!
//! All integers are big-endian. `V` entries are sorted by client id, so each
//! value has exactly one encoding.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{Digest, Envelope, SymKey, DIGEST_LEN, KEY_LEN};

pub const TAG_INVOKE: u8 = 0x01;
pub const TAG_REPLY: u8 = 0x02;
pub const TAG_ADMIN: u8 = 0x03;

const FLAG_DUMMY: u8 = 0b01;
const FLAG_RETRY: u8 = 0b10;

/// Fixed bytes an encoded invoke adds to the raw operation.
pub const INVOKE_OVERHEAD: usize = 1 + 8 + DIGEST_LEN + 4 + 1 + 4;
/// Fixed bytes an encoded reply adds to the raw result.
pub const REPLY_OVERHEAD: usize = 1 + 8 + DIGEST_LEN + 8 + DIGEST_LEN + 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed message: {0}")]
    MalformedMessage(&'static str),
}

type Result<T> = std::result::Result<T, WireError>;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(WireError::MalformedMessage(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn digest(&mut self, what: &'static str) -> Result<Digest> {
        Ok(Digest(self.take(DIGEST_LEN, what)?.try_into().unwrap()))
    }

    fn key(&mut self, what: &'static str) -> Result<SymKey> {
        Ok(SymKey::from_bytes(self.take(KEY_LEN, what)?.try_into().unwrap()))
    }

    pub(crate) fn bytes(&mut self, what: &'static str) -> Result<&'a [u8]> {
        let len = self.u32(what)? as usize;
        self.take(len, what)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::MalformedMessage("trailing bytes"))
        }
    }
}

pub(crate) fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// The operation `o` a client submits, plus the dummy and retry markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperationRequest {
    pub op_bytes: Vec<u8>,
    pub is_dummy: bool,
    pub is_retry: bool,
}

impl OperationRequest {
    pub fn new(op_bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            op_bytes: op_bytes.into(),
            is_dummy: false,
            is_retry: false,
        }
    }

    pub fn dummy() -> Self {
        Self {
            op_bytes: Vec::new(),
            is_dummy: true,
            is_retry: false,
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        let mut flags = 0;
        if self.is_dummy {
            flags |= FLAG_DUMMY;
        }
        if self.is_retry {
            flags |= FLAG_RETRY;
        }
        out.push(flags);
        put_bytes(out, &self.op_bytes);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        let flags = r.u8("request flags")?;
        if flags & !(FLAG_DUMMY | FLAG_RETRY) != 0 {
            return Err(WireError::MalformedMessage("unknown request flag"));
        }
        let op_bytes = r.bytes("operation")?.to_vec();
        let is_dummy = flags & FLAG_DUMMY != 0;
        if op_bytes.is_empty() && !is_dummy {
            return Err(WireError::MalformedMessage("empty operation"));
        }
        Ok(Self {
            op_bytes,
            is_dummy,
            is_retry: flags & FLAG_RETRY != 0,
        })
    }
}

/// `<invoke | t_c, h_c, o, i>`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvokeMessage {
    pub t_c: u64,
    pub h_c: Digest,
    pub request: OperationRequest,
    pub client_id: u32,
}

impl InvokeMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(INVOKE_OVERHEAD + self.request.op_bytes.len());
        out.push(TAG_INVOKE);
        out.extend_from_slice(&self.t_c.to_be_bytes());
        out.extend_from_slice(&self.h_c.0);
        out.extend_from_slice(&self.client_id.to_be_bytes());
        self.request.encode_into(&mut out);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.u8("message tag")? != TAG_INVOKE {
            return Err(WireError::MalformedMessage("not an invoke"));
        }
        let t_c = r.u64("t_c")?;
        let h_c = r.digest("h_c")?;
        let client_id = r.u32("client id")?;
        if client_id == 0 {
            return Err(WireError::MalformedMessage("client id 0"));
        }
        let request = OperationRequest::decode_from(&mut r)?;
        r.finish()?;
        Ok(Self {
            t_c,
            h_c,
            request,
            client_id,
        })
    }
}

/// `<reply | t, h, r, q, h_c'>`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplyMessage {
    pub t: u64,
    pub h: Digest,
    pub result: Vec<u8>,
    pub q: u64,
    pub h_c_echo: Digest,
}

impl ReplyMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(REPLY_OVERHEAD + self.result.len());
        out.push(TAG_REPLY);
        out.extend_from_slice(&self.t.to_be_bytes());
        out.extend_from_slice(&self.h.0);
        out.extend_from_slice(&self.q.to_be_bytes());
        out.extend_from_slice(&self.h_c_echo.0);
        put_bytes(&mut out, &self.result);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.u8("message tag")? != TAG_REPLY {
            return Err(WireError::MalformedMessage("not a reply"));
        }
        let t = r.u64("t")?;
        let h = r.digest("h")?;
        let q = r.u64("q")?;
        let h_c_echo = r.digest("h_c echo")?;
        let result = r.bytes("result")?.to_vec();
        r.finish()?;
        if q > t {
            return Err(WireError::MalformedMessage("q exceeds t"));
        }
        Ok(Self {
            t,
            h,
            result,
            q,
            h_c_echo,
        })
    }
}

/// Group membership commands issued by the admin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdminCommand {
    AddClient { client_id: u32 },
    RemoveClient { client_id: u32, new_comm_key: SymKey },
}

impl AdminCommand {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![TAG_ADMIN];
        match self {
            AdminCommand::AddClient { client_id } => {
                out.push(0x01);
                out.extend_from_slice(&client_id.to_be_bytes());
            }
            AdminCommand::RemoveClient {
                client_id,
                new_comm_key,
            } => {
                out.push(0x02);
                out.extend_from_slice(&client_id.to_be_bytes());
                out.extend_from_slice(new_comm_key.as_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.u8("message tag")? != TAG_ADMIN {
            return Err(WireError::MalformedMessage("not an admin command"));
        }
        let cmd = match r.u8("admin kind")? {
            0x01 => AdminCommand::AddClient {
                client_id: r.u32("client id")?,
            },
            0x02 => AdminCommand::RemoveClient {
                client_id: r.u32("client id")?,
                new_comm_key: r.key("new key")?,
            },
            _ => return Err(WireError::MalformedMessage("unknown admin kind")),
        };
        r.finish()?;
        Ok(cmd)
    }
}

/// Per-client record held by the context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VEntry {
    /// Sequence number the client acknowledged with its latest invoke.
    pub t_ack: u64,
    /// Sequence number of the client's latest executed operation.
    pub t_last: u64,
    /// Chain head right after that operation.
    pub h_last: Digest,
    /// Result of that operation, kept for retries.
    pub last_result: Vec<u8>,
}

impl Default for VEntry {
    fn default() -> Self {
        Self {
            t_ack: 0,
            t_last: 0,
            h_last: Digest::ZERO,
            last_result: Vec::new(),
        }
    }
}

impl VEntry {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.t_ack.to_be_bytes());
        out.extend_from_slice(&self.t_last.to_be_bytes());
        out.extend_from_slice(&self.h_last.0);
        put_bytes(out, &self.last_result);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        let entry = Self {
            t_ack: r.u64("t_ack")?,
            t_last: r.u64("t_last")?,
            h_last: r.digest("h_last")?,
            last_result: r.bytes("last result")?.to_vec(),
        };
        if entry.t_ack > entry.t_last {
            return Err(WireError::MalformedMessage("t_ack exceeds t_last"));
        }
        Ok(entry)
    }
}

/// Everything the context persists under `k_P`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextStateSnapshot {
    pub head_t: u64,
    pub head_h: Digest,
    pub app_state: Vec<u8>,
    pub views: BTreeMap<u32, VEntry>,
    pub comm_key: SymKey,
}

impl ContextStateSnapshot {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.head_t.to_be_bytes());
        out.extend_from_slice(&self.head_h.0);
        out.extend_from_slice(self.comm_key.as_bytes());
        out.extend_from_slice(&(self.views.len() as u32).to_be_bytes());
        for (id, entry) in &self.views {
            out.extend_from_slice(&id.to_be_bytes());
            entry.encode_into(&mut out);
        }
        put_bytes(&mut out, &self.app_state);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let head_t = r.u64("head t")?;
        let head_h = r.digest("head h")?;
        let comm_key = r.key("comm key")?;
        let count = r.u32("view count")?;
        let mut views = BTreeMap::new();
        let mut last_id = 0u32;
        for _ in 0..count {
            let id = r.u32("client id")?;
            if id <= last_id {
                return Err(WireError::MalformedMessage("views not sorted"));
            }
            last_id = id;
            views.insert(id, VEntry::decode_from(&mut r)?);
        }
        let app_state = r.bytes("app state")?.to_vec();
        r.finish()?;
        Ok(Self {
            head_t,
            head_h,
            app_state,
            views,
            comm_key,
        })
    }
}

/// The pair the context hands to stable storage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlobPair {
    /// `k_P` sealed under `k_S`.
    pub blob_key: Envelope,
    /// Encoded [`ContextStateSnapshot`] under `k_P`.
    pub blob_state: Envelope,
}

impl SealedBlobPair {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_bytes(&mut out, &self.blob_key.to_bytes());
        put_bytes(&mut out, &self.blob_state.to_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let key = r.bytes("blob key")?;
        let state = r.bytes("blob state")?;
        r.finish()?;
        let env = |b: &[u8]| Envelope::from_bytes(b).map_err(|_| WireError::MalformedMessage("short envelope"));
        Ok(Self {
            blob_key: env(key)?,
            blob_state: env(state)?,
        })
    }

    pub fn encoded_len(&self) -> usize {
        8 + self.blob_key.encoded_len() + self.blob_state.encoded_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn invoke(op: &[u8]) -> InvokeMessage {
        InvokeMessage {
            t_c: 0,
            h_c: Digest::ZERO,
            request: OperationRequest::new(op),
            client_id: 1,
        }
    }

    #[test]
    fn initial_invoke_layout() {
        let bytes = invoke(b"abc").encode();
        assert_eq!(bytes.len(), INVOKE_OVERHEAD + 3);
        assert_eq!(bytes[0], TAG_INVOKE);
        assert_eq!(&bytes[1..9], &[0; 8]);
        assert_eq!(&bytes[9..41], &[0; 32]);
        assert_eq!(&bytes[41..45], &[0, 0, 0, 1]);
        assert_eq!(bytes[45], 0);
        assert_eq!(&bytes[46..50], &[0, 0, 0, 3]);
        assert_eq!(&bytes[50..], b"abc");
        assert_eq!(InvokeMessage::decode(&bytes).unwrap(), invoke(b"abc"));
    }

    #[test]
    fn truncated_invoke_is_malformed() {
        let bytes = invoke(b"abc").encode();
        for cut in 0..bytes.len() {
            assert!(InvokeMessage::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = invoke(b"abc").encode();
        bytes.push(0);
        assert!(InvokeMessage::decode(&bytes).is_err());
    }

    #[test]
    fn empty_non_dummy_rejected() {
        let mut msg = invoke(b"x");
        msg.request.op_bytes.clear();
        assert!(InvokeMessage::decode(&msg.encode()).is_err());
        msg.request = OperationRequest::dummy();
        assert_eq!(InvokeMessage::decode(&msg.encode()).unwrap(), msg);
    }

    #[test]
    fn flags_round_trip() {
        let mut msg = invoke(b"op");
        msg.request.is_retry = true;
        let bytes = msg.encode();
        assert_eq!(bytes[45], FLAG_RETRY);
        assert_eq!(InvokeMessage::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn reply_rejects_q_above_t() {
        let reply = ReplyMessage {
            t: 1,
            h: Digest::ZERO,
            result: vec![],
            q: 2,
            h_c_echo: Digest::ZERO,
        };
        assert!(ReplyMessage::decode(&reply.encode()).is_err());
    }

    #[test]
    fn tags_are_not_interchangeable() {
        let bytes = invoke(b"abc").encode();
        assert!(ReplyMessage::decode(&bytes).is_err());
        assert!(AdminCommand::decode(&bytes).is_err());
    }

    #[test]
    fn admin_commands_round_trip() {
        let add = AdminCommand::AddClient { client_id: 4 };
        assert_eq!(AdminCommand::decode(&add.encode()).unwrap(), add);
        let rm = AdminCommand::RemoveClient {
            client_id: 2,
            new_comm_key: SymKey::from_bytes([9; 16]),
        };
        assert_eq!(AdminCommand::decode(&rm.encode()).unwrap(), rm);
    }

    #[test]
    fn snapshot_round_trips_and_rejects_unsorted() {
        let mut views = BTreeMap::new();
        views.insert(1, VEntry::default());
        views.insert(
            3,
            VEntry {
                t_ack: 1,
                t_last: 2,
                h_last: Digest([7; 32]),
                last_result: b"ok".to_vec(),
            },
        );
        let snap = ContextStateSnapshot {
            head_t: 2,
            head_h: Digest([7; 32]),
            app_state: b"state".to_vec(),
            views,
            comm_key: SymKey::from_bytes([1; 16]),
        };
        let bytes = snap.encode();
        assert_eq!(ContextStateSnapshot::decode(&bytes).unwrap(), snap);

        // swap the two client ids in place: 1 <-> 3
        let mut swapped = bytes.clone();
        let first = 8 + 32 + 16 + 4;
        swapped[first + 3] = 3;
        let second = first + 4 + 8 + 8 + 32 + 4;
        swapped[second + 3] = 1;
        assert!(ContextStateSnapshot::decode(&swapped).is_err());
    }
}
