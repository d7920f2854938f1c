//! Scripted server behaviour.
//!
//! A script is a list of actions keyed by the server's arrival counter: the
//! action fires when the `at`-th invoke (0-based, retries included) reaches
//! the host. The host holds no keys, so every action only moves, drops,
//! repeats or substitutes ciphertexts it has already seen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Action {
    /// Normal FIFO delivery; a no-op placeholder.
    DeliverFifo,
    /// Discard the arriving invoke.
    Drop,
    /// Deliver the invoke but discard its reply.
    DropReply,
    /// Discard every reply addressed to `client` from now on.
    DropRepliesTo { client: u32 },
    /// Deliver again the invoke that arrived `back` arrivals ago (0 = this one).
    Replay { back: usize },
    /// Send the arriving invoke's client the reply it got `back` replies ago.
    ReplayReply { back: usize },
    /// Hold this and the next `window - 1` invokes, then deliver them reversed.
    Reorder { window: usize },
    /// Restart the context serving this client from a stored version.
    RestartContextFrom { version: usize },
    /// Run an extra context instance per group after the first; each gets its
    /// own storage lineage branched from the current state.
    ForkContexts { groups: Vec<Vec<u32>> },
    /// Route a client to another instance.
    Route { client: u32, instance: usize },
    /// Route every client back to instance 0.
    MergeForks,
    /// Crash the context after it processed this invoke but before the store.
    CrashBeforeStore,
    /// Crash after the store but before the reply leaves the host.
    CrashAfterStore,
    /// The next load of this client's lineage returns `version`.
    SubstituteBlob { version: usize },
    /// Operator action: migrate the serving context to a fresh platform.
    Migrate,
}

impl Action {
    /// Actions a correct server may also perform.
    pub fn is_benign(&self) -> bool {
        matches!(
            self,
            Action::DeliverFifo | Action::CrashBeforeStore | Action::CrashAfterStore | Action::Migrate
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledAction {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryScript {
    pub actions: Vec<ScheduledAction>,
}

impl AdversaryScript {
    pub fn correct() -> Self {
        Self::default()
    }

    pub fn single(at: u64, action: Action) -> Self {
        Self {
            actions: vec![ScheduledAction { at, action }],
        }
    }

    pub fn then(mut self, at: u64, action: Action) -> Self {
        self.actions.push(ScheduledAction { at, action });
        self
    }

    /// Actions firing at arrival `step`, in script order.
    pub fn at(&self, step: u64) -> impl Iterator<Item = &Action> {
        self.actions.iter().filter(move |a| a.at == step).map(|a| &a.action)
    }

    pub fn is_correct(&self) -> bool {
        self.actions.iter().all(|a| a.action.is_benign())
    }

    /// A random script of at most `budget` actions spread over the first
    /// `horizon` arrivals. Deterministic in `seed`.
    pub fn random(seed: u64, budget: usize, horizon: u64, clients: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = if budget == 0 { 0 } else { rng.gen_range(1..=budget) };
        let mut actions = Vec::with_capacity(count);
        for _ in 0..count {
            let at = rng.gen_range(0..horizon.max(1));
            let client = rng.gen_range(1..=clients);
            let action = match rng.gen_range(0..14) {
                0 => Action::Drop,
                1 => Action::DropReply,
                2 => Action::Replay { back: rng.gen_range(0..8) },
                3 => Action::ReplayReply { back: rng.gen_range(0..4) },
                4 => Action::Reorder { window: rng.gen_range(2..=4) },
                5 => Action::RestartContextFrom {
                    version: rng.gen_range(0..horizon as usize + 1),
                },
                6 | 7 => {
                    let mut ids: Vec<u32> = (1..=clients).collect();
                    ids.shuffle(&mut rng);
                    let cut = rng.gen_range(1..clients.max(2)) as usize;
                    let cut = cut.min(ids.len());
                    let (a, b) = ids.split_at(cut);
                    Action::ForkContexts {
                        groups: vec![a.to_vec(), b.to_vec()],
                    }
                }
                8 => Action::Route {
                    client,
                    instance: rng.gen_range(0..3),
                },
                9 => Action::MergeForks,
                10 => Action::CrashBeforeStore,
                11 => Action::CrashAfterStore,
                12 => Action::SubstituteBlob {
                    version: rng.gen_range(0..horizon as usize + 1),
                },
                _ => Action::DropRepliesTo { client },
            };
            actions.push(ScheduledAction { at, action });
        }
        actions.sort_by_key(|a| a.at);
        Self { actions }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scripts_are_deterministic_and_bounded() {
        for seed in 0..50 {
            let a = AdversaryScript::random(seed, 8, 100, 3);
            assert_eq!(a, AdversaryScript::random(seed, 8, 100, 3));
            assert!(!a.actions.is_empty() && a.actions.len() <= 8);
        }
        assert!(AdversaryScript::random(1, 0, 100, 3).actions.is_empty());
    }

    #[test]
    fn toml_shape() {
        let script: AdversaryScript = toml::from_str(
            r#"
            [[actions]]
            at = 3
            action = "restart-context-from"
            version = 1

            [[actions]]
            at = 5
            action = "fork-contexts"
            groups = [[1], [2, 3]]
            "#,
        )
        .unwrap();
        assert_eq!(script.actions[0].action, Action::RestartContextFrom { version: 1 });
        assert_eq!(script.at(5).count(), 1);
        assert!(!script.is_correct());
    }
}
