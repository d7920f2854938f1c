//! Untrusted stable storage.

use crate::wire::SealedBlobPair;

/// Append-only history of stored blob pairs with a pointer to the version a
/// correct `load` returns. Old versions stay around, which is exactly what a
/// malicious host needs for a rollback.
#[derive(Clone, Debug, Default)]
pub struct StableStore {
    history: Vec<SealedBlobPair>,
    current: Option<usize>,
    substitute: Option<usize>,
}

impl StableStore {
    /// Stores a new version and returns its index.
    pub fn store(&mut self, blob: SealedBlobPair) -> usize {
        self.history.push(blob);
        let v = self.history.len() - 1;
        self.current = Some(v);
        v
    }

    /// Returns the latest stored version, unless a substitution is armed.
    pub fn load(&mut self) -> Option<(usize, SealedBlobPair)> {
        let v = self.substitute.take().or(self.current)?;
        Some((v, self.history[v].clone()))
    }

    pub fn load_version(&self, version: usize) -> Option<SealedBlobPair> {
        self.history.get(version).cloned()
    }

    /// Makes the next `load` return `version` (clamped to what exists).
    pub fn substitute_next_load(&mut self, version: usize) {
        if let Some(last) = self.history.len().checked_sub(1) {
            self.substitute = Some(version.min(last));
        }
    }

    pub fn current(&self) -> Option<usize> {
        self.current
    }

    pub fn versions(&self) -> usize {
        self.history.len()
    }

    /// A copy of this store's history up to and including `current`, used
    /// when the host forks the context.
    pub fn branch(&self) -> StableStore {
        let upto = self.current.map_or(0, |c| c + 1);
        StableStore {
            history: self.history[..upto].to_vec(),
            current: self.current,
            substitute: None,
        }
    }
}
