use std::collections::BTreeMap;

use proptest::prelude::*;

use lcm::checker::{self, q_monotone};
use lcm::harness::workload::WorkloadSpec;
use lcm::host::{simulate, AdversaryScript, SimConfig, StoreMode, PROGRAM_ID};
use lcm::trace::EventKind;
use lcm::wire::OperationRequest;
use lcm::{AdminProvision, KvsContext, KvsOperation, KvsResult, LcmClient, PlatformIdentity, SymKey};

fn op() -> impl Strategy<Value = KvsOperation> {
    let key = prop::sample::select(vec!["a", "b", "c", "d"]);
    prop_oneof![
        key.clone().prop_map(KvsOperation::get),
        (key.clone(), prop::collection::vec(any::<u8>(), 0..16)).prop_map(|(k, v)| KvsOperation::put(k, v)),
        key.prop_map(KvsOperation::del),
    ]
}

fn provisioned(n: u32, batch: usize) -> (KvsContext, Vec<LcmClient>) {
    let comm_key = SymKey::from_bytes([3; 16]);
    let mut ctx = KvsContext::new(PlatformIdentity::new("p", [9; 32]), PROGRAM_ID, 0).with_max_batch(batch);
    ctx.init(None).unwrap();
    ctx.bootstrap(AdminProvision {
        protocol_key: SymKey::from_bytes([4; 16]),
        comm_key: comm_key.clone(),
        clients: (1..=n).collect(),
    })
    .unwrap();
    let clients = (1..=n).map(|i| LcmClient::new(i, comm_key.clone())).collect();
    (ctx, clients)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Results through the protocol match a plain map, and t, q behave.
    #[test]
    fn honest_context_matches_model(ops in prop::collection::vec((0..3usize, op()), 1..60)) {
        let (mut ctx, mut clients) = provisioned(3, 1);
        let mut model: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
        let mut last_t = 0;
        let mut last_q = [0u64; 3];
        for (c, op) in ops {
            let inv = clients[c].invoke(OperationRequest::new(op.encode())).unwrap();
            let p = ctx.handle_invoke(&inv).unwrap();
            prop_assert!(!p.executed.cached && p.blob.is_some());
            let done = clients[c].handle_reply(&p.reply).unwrap();
            let expected = match &op {
                KvsOperation::Get { key } => model.get(key).cloned().map_or(KvsResult::NotFound, KvsResult::Value),
                KvsOperation::Put { key, value } => {
                    model.insert(key.clone(), value.clone());
                    KvsResult::Ok
                }
                KvsOperation::Del { key } => {
                    if model.remove(key).is_some() { KvsResult::Ok } else { KvsResult::NotFound }
                }
            };
            prop_assert_eq!(KvsResult::decode(&done.result).unwrap(), expected);
            prop_assert_eq!(done.t, last_t + 1);
            prop_assert!(done.q <= done.t && done.q >= last_q[c]);
            last_t = done.t;
            last_q[c] = done.q;
        }
        prop_assert_eq!(&ctx.app().entries, &model);
    }

    /// A batch of one invoke per client behaves like handing them over one by one.
    #[test]
    fn batch_equals_sequential(rounds in prop::collection::vec(prop::collection::vec(op(), 4), 1..8)) {
        let (mut seq_ctx, mut seq_clients) = provisioned(4, 1);
        let (mut batch_ctx, mut batch_clients) = provisioned(4, 4);
        for round in rounds {
            let mut seq_results = Vec::new();
            for (c, op) in round.iter().enumerate() {
                let inv = seq_clients[c].invoke(OperationRequest::new(op.encode())).unwrap();
                let p = seq_ctx.handle_invoke(&inv).unwrap();
                seq_results.push(seq_clients[c].handle_reply(&p.reply).unwrap());
            }
            let envs: Vec<_> = round
                .iter()
                .enumerate()
                .map(|(c, op)| batch_clients[c].invoke(OperationRequest::new(op.encode())).unwrap())
                .collect();
            let out = batch_ctx.handle_batch(&envs).unwrap();
            prop_assert!(out.error.is_none());
            prop_assert!(out.blob.is_some());
            for (c, (reply, _)) in out.replies.iter().enumerate() {
                let done = batch_clients[c].handle_reply(reply).unwrap();
                prop_assert_eq!(&done.result, &seq_results[c].result);
                prop_assert_eq!(done.t, seq_results[c].t);
            }
        }
        prop_assert_eq!(seq_ctx.head(), batch_ctx.head());
        prop_assert_eq!(seq_ctx.app(), batch_ctx.app());
    }

    /// Without an adversary nobody raises a violation, every operation
    /// completes and the trace is linearizable with monotone q.
    #[test]
    fn correct_host_is_clean(
        seed in any::<u64>(),
        clients in 1..6u32,
        ops in 1..60u64,
        batch in 1..5usize,
        sync in any::<bool>(),
    ) {
        let config = SimConfig {
            workload: WorkloadSpec { clients, ops, seed, ..WorkloadSpec::default() },
            seed,
            batch_size: batch,
            store_mode: if sync { StoreMode::SyncFaithful } else { StoreMode::Async },
            ..SimConfig::default()
        };
        let sim = simulate(config, AdversaryScript::correct());
        let trace = sim.trace();
        prop_assert_eq!(trace.violations().count(), 0);
        prop_assert_eq!((1..=clients).map(|c| sim.completed(c)).sum::<u64>(), ops);
        prop_assert!(checker::check_linearizable(trace).is_ok());
        prop_assert!(checker::check_stable_prefix(trace).is_ok());
        prop_assert!(q_monotone(trace).unwrap());

        // per client, accepted sequence numbers strictly increase
        let mut last: BTreeMap<u32, u64> = BTreeMap::new();
        for e in &trace.events {
            if let EventKind::Response { client, t, .. } = e.kind {
                let prev = last.insert(client, t).unwrap_or(0);
                prop_assert!(t > prev);
            }
        }
    }

    /// Random adversaries never slip an inconsistency past the clients.
    #[test]
    fn random_attacks_are_detected_or_harmless(seed in any::<u64>(), budget in 1..10usize) {
        let config = SimConfig {
            workload: WorkloadSpec { clients: 3, ops: 50, seed, ..WorkloadSpec::default() },
            seed,
            ..SimConfig::default()
        };
        let sim = simulate(config, AdversaryScript::random(seed, budget, 50, 3));
        prop_assert!(checker::check_undetected(sim.trace()).is_ok());
    }
}
