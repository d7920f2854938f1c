//! The untrusted server, as a deterministic discrete-event simulation.
//!
//! The host owns the stable storage, every context instance and the network
//! between clients and contexts. With an empty [`AdversaryScript`] it behaves
//! like a correct server: FIFO delivery, store-before-reply, restart after a
//! crash. Script actions turn it into an attacker that rolls back, forks,
//! replays, drops or reorders. Time is counted in ticks; nothing reads the
//! wall clock, so a run is a pure function of its configuration and script.

pub mod adversary;
pub mod store;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adversary::{Action, AdversaryScript, ScheduledAction};
pub use store::StableStore;

use crate::client::{ClientError, LcmClient};
use crate::context::{AdminProvision, ContextError, Executed, DEFAULT_MAX_BATCH};
use crate::crypto::{Envelope, PlatformIdentity, SymKey};
use crate::harness::workload::WorkloadSpec;
use crate::kvs::{KvsOperation, KvsState};
use crate::trace::{EventKind, Party, Trace};
use crate::wire::{OperationRequest, SealedBlobPair};
use crate::KvsContext;

pub const PROGRAM_ID: &[u8] = b"lcm-kvs-v1";

/// When the host writes the sealed state relative to forwarding replies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreMode {
    /// Forward replies first, persist afterwards. Loses acknowledged
    /// operations if the context crashes in between.
    Async,
    /// Persist, then forward. Required for crash tolerance.
    #[default]
    SyncFaithful,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub workload: WorkloadSpec,
    /// Seeds keys, think times and the host's platform secrets.
    pub seed: u64,
    /// Invokes handed to the context per call; 1 disables batching.
    pub batch_size: usize,
    pub store_mode: StoreMode,
    pub retry_timeout: u64,
    pub max_retries: u32,
    pub latency: u64,
    pub think_min: u64,
    pub think_max: u64,
    /// Issue a dummy operation after every `k` real ones.
    pub dummy_every: Option<u32>,
    /// Dummy operations each client issues after its workload.
    pub trailing_dummies: u32,
    pub horizon: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec::default(),
            seed: 0,
            batch_size: 1,
            store_mode: StoreMode::SyncFaithful,
            retry_timeout: 100,
            max_retries: 8,
            latency: 2,
            think_min: 1,
            think_max: 6,
            dummy_every: None,
            trailing_dummies: 0,
            horizon: 10_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Meta {
    client: u32,
    op_idx: u64,
    drop_reply: bool,
}

enum Event {
    ClientReady(u32),
    InvokeArrive { env: Envelope, meta: Meta },
    ReplyArrive { client: u32, env: Envelope },
    RetryTimer { client: u32, op_idx: u64, attempt: u32 },
    Flush(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceState {
    Live,
    Halted,
    MigratedOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Crash {
    BeforeStore,
    AfterStore,
}

struct Instance {
    ctx: KvsContext,
    lineage: usize,
    platform: usize,
    state: InstanceState,
    batch: Vec<(Envelope, Meta)>,
    flush_scheduled: bool,
    crash: Option<Crash>,
}

struct SimClient {
    client: LcmClient,
    ops: VecDeque<KvsOperation>,
    next_op_idx: u64,
    current: Option<u64>,
    attempts: u32,
    since_dummy: u32,
    dummies_left: u32,
    stalled: bool,
    completed: u64,
    durable: Vec<u8>,
    replies: Vec<Envelope>,
}

pub struct Simulator {
    config: SimConfig,
    script: AdversaryScript,
    rng: ChaCha8Rng,
    time: u64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, Event>,
    platforms: Vec<PlatformIdentity>,
    instances: Vec<Instance>,
    lineages: Vec<StableStore>,
    lineage_halted: Vec<bool>,
    routes: BTreeMap<u32, usize>,
    clients: Vec<SimClient>,
    trace: Trace,
    arrivals: u64,
    seen: Vec<(Envelope, Meta)>,
    reorder: Option<(usize, Vec<(Envelope, Meta)>)>,
    muted: BTreeSet<u32>,
    comm_key: SymKey,
    ran: bool,
}

impl Simulator {
    pub fn new(config: SimConfig, script: AdversaryScript) -> Self {
        config.workload.validate().expect("valid workload");
        assert!(
            (1..=DEFAULT_MAX_BATCH).contains(&config.batch_size),
            "batch size must be within 1..=16"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let platform = PlatformIdentity::generate_with("platform-0", &mut rng);
        let comm_key = SymKey::generate_with(&mut rng);
        let protocol_key = SymKey::generate_with(&mut rng);
        let n = config.workload.clients;

        let mut ctx = KvsContext::new(platform.clone(), PROGRAM_ID, 0).with_max_batch(config.batch_size);
        ctx.init(None).expect("fresh context");
        let boot = ctx
            .bootstrap(AdminProvision {
                protocol_key,
                comm_key: comm_key.clone(),
                clients: (1..=n).collect(),
            })
            .expect("bootstrap fresh context");

        let mut trace = Trace::default();
        let mut store = StableStore::default();
        let v = store.store(boot);
        trace.push(
            0,
            EventKind::Store {
                instance: 0,
                lineage: 0,
                version: v,
            },
        );

        let workload = config.workload.generate();
        let clients = workload
            .into_iter()
            .enumerate()
            .map(|(i, ops)| {
                let client = LcmClient::new(i as u32 + 1, comm_key.clone());
                SimClient {
                    durable: client.state().encode(),
                    client,
                    ops: ops.into(),
                    next_op_idx: 0,
                    current: None,
                    attempts: 0,
                    since_dummy: 0,
                    dummies_left: config.trailing_dummies,
                    stalled: false,
                    completed: 0,
                    replies: Vec::new(),
                }
            })
            .collect();

        Self {
            routes: (1..=n).map(|c| (c, 0)).collect(),
            instances: vec![Instance {
                ctx,
                lineage: 0,
                platform: 0,
                state: InstanceState::Live,
                batch: Vec::new(),
                flush_scheduled: false,
                crash: None,
            }],
            lineages: vec![store],
            lineage_halted: vec![false],
            platforms: vec![platform],
            config,
            script,
            rng,
            time: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            events: HashMap::new(),
            clients,
            trace,
            arrivals: 0,
            seen: Vec::new(),
            reorder: None,
            muted: BTreeSet::new(),
            comm_key,
            ran: false,
        }
    }

    /// Runs until no event is left or the horizon passes.
    pub fn run(&mut self) -> &Trace {
        if !self.ran {
            self.ran = true;
            for c in 1..=self.config.workload.clients {
                let delay = self.think();
                self.schedule(delay, Event::ClientReady(c));
            }
            while let Some(Reverse((time, seq))) = self.queue.pop() {
                if time > self.config.horizon {
                    break;
                }
                self.time = time;
                let event = self.events.remove(&seq).expect("scheduled event");
                self.dispatch(event);
            }
        }
        &self.trace
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn clients(&self) -> u32 {
        self.clients.len() as u32
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn instance(&self, x: usize) -> Option<(&KvsContext, InstanceState)> {
        self.instances.get(x).map(|i| (&i.ctx, i.state))
    }

    pub fn instance_lineage(&self, x: usize) -> usize {
        self.instances[x].lineage
    }

    /// Instance currently serving `client`.
    pub fn route_of(&self, client: u32) -> usize {
        self.routes[&client]
    }

    pub fn lineage(&self, l: usize) -> &StableStore {
        &self.lineages[l]
    }

    pub fn platform(&self, p: usize) -> &PlatformIdentity {
        &self.platforms[p]
    }

    pub fn instance_platform(&self, x: usize) -> usize {
        self.instances[x].platform
    }

    pub fn client(&self, c: u32) -> &LcmClient {
        &self.clients[c as usize - 1].client
    }

    /// The client's last durable snapshot (written after each completion).
    pub fn client_durable_state(&self, c: u32) -> &[u8] {
        &self.clients[c as usize - 1].durable
    }

    pub fn completed(&self, c: u32) -> u64 {
        self.clients[c as usize - 1].completed
    }

    pub fn stalled(&self, c: u32) -> bool {
        self.clients[c as usize - 1].stalled
    }

    pub fn comm_key(&self) -> &SymKey {
        &self.comm_key
    }

    /// Final key-value state of an instance.
    pub fn kvs(&self, x: usize) -> &KvsState {
        self.instances[x].ctx.app()
    }

    fn think(&mut self) -> u64 {
        self.rng.gen_range(self.config.think_min..=self.config.think_max.max(self.config.think_min))
    }

    fn schedule(&mut self, delay: u64, event: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.insert(seq, event);
        self.queue.push(Reverse((self.time + delay, seq)));
    }

    fn record(&mut self, kind: EventKind) {
        self.trace.push(self.time, kind);
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::ClientReady(c) => self.client_ready(c),
            Event::InvokeArrive { env, meta } => self.invoke_arrive(env, meta),
            Event::ReplyArrive { client, env } => self.reply_arrive(client, env),
            Event::RetryTimer {
                client,
                op_idx,
                attempt,
            } => self.retry_timer(client, op_idx, attempt),
            Event::Flush(x) => self.flush(x),
        }
    }

    // ---- clients ---------------------------------------------------------

    fn client_ready(&mut self, c: u32) {
        let dummy_every = self.config.dummy_every;
        let sc = &mut self.clients[c as usize - 1];
        if sc.client.halted().is_some() || sc.stalled || sc.current.is_some() {
            return;
        }
        let request = if dummy_every.is_some_and(|k| sc.since_dummy >= k) && !sc.ops.is_empty() {
            sc.since_dummy = 0;
            OperationRequest::dummy()
        } else if let Some(op) = sc.ops.pop_front() {
            sc.since_dummy += 1;
            OperationRequest::new(op.encode())
        } else if sc.dummies_left > 0 {
            sc.dummies_left -= 1;
            OperationRequest::dummy()
        } else {
            return;
        };
        let op_idx = sc.next_op_idx;
        sc.next_op_idx += 1;
        sc.current = Some(op_idx);
        sc.attempts = 0;
        let t_c = sc.client.state().t_c;
        let env = sc.client.invoke(request.clone()).expect("idle live client can invoke");
        self.record(EventKind::Invoke {
            client: c,
            op_idx,
            t_c,
            op: request.op_bytes,
            dummy: request.is_dummy,
            retry: false,
        });
        self.send_invoke(c, op_idx, env);
        self.schedule(
            self.config.retry_timeout,
            Event::RetryTimer {
                client: c,
                op_idx,
                attempt: 0,
            },
        );
    }

    fn send_invoke(&mut self, client: u32, op_idx: u64, env: Envelope) {
        let meta = Meta {
            client,
            op_idx,
            drop_reply: false,
        };
        self.schedule(self.config.latency, Event::InvokeArrive { env, meta });
    }

    fn retry_timer(&mut self, c: u32, op_idx: u64, attempt: u32) {
        let max_retries = self.config.max_retries;
        let sc = &mut self.clients[c as usize - 1];
        if sc.current != Some(op_idx) || sc.attempts != attempt || sc.client.halted().is_some() {
            return;
        }
        if attempt >= max_retries {
            sc.stalled = true;
            self.record(EventKind::Stalled { client: c, op_idx });
            return;
        }
        sc.attempts += 1;
        let t_c = sc.client.state().t_c;
        let env = sc.client.retry().expect("pending live client can retry");
        let pending = sc.client.state().pending.clone().expect("pending");
        self.record(EventKind::Invoke {
            client: c,
            op_idx,
            t_c,
            op: pending.op_bytes,
            dummy: pending.is_dummy,
            retry: true,
        });
        self.send_invoke(c, op_idx, env);
        self.schedule(
            self.config.retry_timeout,
            Event::RetryTimer {
                client: c,
                op_idx,
                attempt: attempt + 1,
            },
        );
    }

    fn reply_arrive(&mut self, c: u32, env: Envelope) {
        let sc = &mut self.clients[c as usize - 1];
        let op_idx = sc.current;
        match sc.client.handle_reply(&env) {
            Ok(done) => {
                sc.current = None;
                sc.completed += 1;
                sc.durable = sc.client.state().encode();
                let h = sc.client.state().h_c;
                self.record(EventKind::Response {
                    client: c,
                    op_idx: op_idx.expect("accepted reply had a pending op"),
                    t: done.t,
                    q: done.q,
                    h,
                    result: done.result,
                });
                let delay = self.think();
                self.schedule(delay, Event::ClientReady(c));
            }
            Err(ClientError::Violation(v)) => {
                self.record(EventKind::Violation {
                    party: Party::Client(c),
                    client: Some(c),
                    op_idx,
                    reason: v.to_string(),
                });
            }
            Err(_) => {}
        }
    }

    // ---- host ------------------------------------------------------------

    fn invoke_arrive(&mut self, env: Envelope, mut meta: Meta) {
        let step = self.arrivals;
        self.arrivals += 1;
        self.seen.push((env.clone(), meta));

        let actions: Vec<Action> = self.script.at(step).cloned().collect();
        let mut dropped = false;
        let mut replays = Vec::new();
        let mut reorder_window = None;
        for action in actions {
            let x = self.routes[&meta.client];
            match action {
                Action::DeliverFifo => {}
                Action::Drop => dropped = true,
                Action::DropReply => meta.drop_reply = true,
                Action::DropRepliesTo { client } => {
                    self.muted.insert(client);
                }
                Action::Replay { back } => replays.push(back),
                Action::ReplayReply { back } => {
                    let replies = &self.clients[meta.client as usize - 1].replies;
                    if let Some(old) = replies.len().checked_sub(back + 1).map(|i| replies[i].clone()) {
                        self.schedule(
                            self.config.latency,
                            Event::ReplyArrive {
                                client: meta.client,
                                env: old,
                            },
                        );
                    }
                }
                Action::Reorder { window } => reorder_window = Some(window.max(1)),
                Action::RestartContextFrom { version } => self.restart(x, Some(version)),
                Action::ForkContexts { groups } => self.fork(x, &groups),
                Action::Route { client, instance } => {
                    if instance < self.instances.len() && self.routes.contains_key(&client) {
                        self.routes.insert(client, instance);
                        self.record(EventKind::Route { client, instance });
                    }
                }
                Action::MergeForks => {
                    let ids: Vec<u32> = self.routes.keys().copied().collect();
                    for client in ids {
                        if self.routes[&client] != 0 {
                            self.routes.insert(client, 0);
                            self.record(EventKind::Route { client, instance: 0 });
                        }
                    }
                }
                Action::CrashBeforeStore => self.instances[x].crash = Some(Crash::BeforeStore),
                Action::CrashAfterStore => self.instances[x].crash = Some(Crash::AfterStore),
                Action::SubstituteBlob { version } => {
                    let l = self.instances[x].lineage;
                    self.lineages[l].substitute_next_load(version);
                }
                Action::Migrate => self.migrate(x),
            }
        }

        if !dropped {
            match (&mut self.reorder, reorder_window) {
                (Some((window, held)), _) => {
                    held.push((env, meta));
                    if held.len() >= *window {
                        let (_, held) = self.reorder.take().expect("reorder buffer");
                        for (e, m) in held.into_iter().rev() {
                            self.deliver(e, m);
                        }
                    }
                }
                (None, Some(window)) if window > 1 => {
                    self.reorder = Some((window, vec![(env, meta)]));
                }
                _ => self.deliver(env, meta),
            }
        }
        for back in replays {
            if let Some(i) = self.seen.len().checked_sub(back + 1) {
                let (e, mut m) = self.seen[i].clone();
                m.drop_reply = false;
                self.deliver(e, m);
            }
        }
    }

    fn deliver(&mut self, env: Envelope, meta: Meta) {
        let x = self.routes[&meta.client];
        if self.instances[x].state != InstanceState::Live {
            return;
        }
        if self.config.batch_size <= 1 {
            self.process(x, vec![(env, meta)]);
        } else {
            let inst = &mut self.instances[x];
            inst.batch.push((env, meta));
            if !inst.flush_scheduled {
                inst.flush_scheduled = true;
                self.schedule(0, Event::Flush(x));
            }
        }
    }

    fn flush(&mut self, x: usize) {
        let inst = &mut self.instances[x];
        inst.flush_scheduled = false;
        if inst.state != InstanceState::Live || inst.batch.is_empty() {
            inst.batch.clear();
            return;
        }
        let take = inst.batch.len().min(self.config.batch_size);
        let msgs: Vec<_> = inst.batch.drain(..take).collect();
        if !inst.batch.is_empty() {
            inst.flush_scheduled = true;
            self.schedule(0, Event::Flush(x));
        }
        self.process(x, msgs);
    }

    fn process(&mut self, x: usize, msgs: Vec<(Envelope, Meta)>) {
        let crash = self.instances[x].crash.take();
        let ctx = &mut self.instances[x].ctx;
        let mut handled: Vec<(Envelope, Executed, Meta)> = Vec::new();
        let mut blob: Option<SealedBlobPair> = None;
        let mut failure: Option<(ContextError, Meta)> = None;

        if msgs.len() == 1 && self.config.batch_size <= 1 {
            let (env, meta) = &msgs[0];
            match ctx.handle_invoke(env) {
                Ok(p) => {
                    blob = p.blob;
                    handled.push((p.reply, p.executed, *meta));
                }
                Err(e) => failure = Some((e, *meta)),
            }
        } else {
            let envs: Vec<Envelope> = msgs.iter().map(|(e, _)| e.clone()).collect();
            match ctx.handle_batch(&envs) {
                Ok(out) => {
                    let n = out.replies.len();
                    for ((reply, executed), (_, meta)) in out.replies.into_iter().zip(&msgs) {
                        handled.push((reply, executed, *meta));
                    }
                    blob = out.blob;
                    failure = out.error.map(|e| (e, msgs[n].1));
                }
                Err(e) => failure = Some((e, msgs[0].1)),
            }
        }

        let committed = blob.is_some() && crash != Some(Crash::BeforeStore);
        for (_, ex, meta) in &handled {
            let kind = if ex.cached {
                EventKind::CachedReply {
                    instance: x,
                    client: ex.client_id,
                    op_idx: meta.op_idx,
                    t: ex.t,
                }
            } else {
                EventKind::Exec {
                    instance: x,
                    client: ex.client_id,
                    op_idx: meta.op_idx,
                    t: ex.t,
                    t_ack: ex.t_ack,
                    q: ex.q,
                    prev_h: ex.prev_h,
                    h: ex.h,
                    op: ex.op_bytes.clone(),
                    result: ex.result.clone(),
                    dummy: ex.dummy,
                    committed,
                }
            };
            self.record(kind);
        }

        let replies: Vec<(Envelope, Meta)> = handled.into_iter().map(|(r, _, m)| (r, m)).collect();
        match self.config.store_mode {
            StoreMode::SyncFaithful => {
                if crash != Some(Crash::BeforeStore) {
                    if let Some(b) = blob {
                        self.store(x, b);
                    }
                    if crash.is_none() {
                        self.forward(replies);
                    }
                }
            }
            StoreMode::Async => {
                self.forward(replies);
                if crash != Some(Crash::BeforeStore) {
                    if let Some(b) = blob {
                        self.store(x, b);
                    }
                }
            }
        }

        if let Some((err, meta)) = failure {
            self.halt_instance(x, Some(meta), err.to_string());
        }
        if crash.is_some() && self.instances[x].state == InstanceState::Live {
            self.restart(x, None);
        }
    }

    fn forward(&mut self, replies: Vec<(Envelope, Meta)>) {
        for (env, meta) in replies {
            if meta.drop_reply || self.muted.contains(&meta.client) {
                continue;
            }
            self.clients[meta.client as usize - 1].replies.push(env.clone());
            self.schedule(
                self.config.latency,
                Event::ReplyArrive {
                    client: meta.client,
                    env,
                },
            );
        }
    }

    fn store(&mut self, x: usize, blob: SealedBlobPair) {
        let lineage = self.instances[x].lineage;
        let version = self.lineages[lineage].store(blob);
        self.record(EventKind::Store {
            instance: x,
            lineage,
            version,
        });
    }

    fn halt_instance(&mut self, x: usize, meta: Option<Meta>, reason: String) {
        let inst = &mut self.instances[x];
        inst.state = InstanceState::Halted;
        inst.batch.clear();
        self.lineage_halted[inst.lineage] = true;
        self.record(EventKind::Violation {
            party: Party::Context(x),
            client: meta.map(|m| m.client),
            op_idx: meta.map(|m| m.op_idx),
            reason,
        });
    }

    /// Starts a new epoch for instance `x` from its lineage's storage.
    fn restart(&mut self, x: usize, version: Option<usize>) {
        let lineage = self.instances[x].lineage;
        if self.lineage_halted[lineage] || self.instances[x].state == InstanceState::MigratedOut {
            return;
        }
        if let Some(v) = version {
            self.lineages[lineage].substitute_next_load(v);
        }
        let epoch = self.instances[x].ctx.epoch() + 1;
        let platform = self.platforms[self.instances[x].platform].clone();
        let mut ctx = KvsContext::new(platform, PROGRAM_ID, epoch).with_max_batch(self.config.batch_size);
        let loaded = self.lineages[lineage].load();
        let loaded_version = loaded.as_ref().map(|(v, _)| *v);
        self.record(EventKind::Load {
            instance: x,
            lineage,
            version: loaded_version,
        });
        let init = ctx.init(loaded.as_ref().map(|(_, b)| b));
        let inst = &mut self.instances[x];
        inst.ctx = ctx;
        inst.batch.clear();
        inst.flush_scheduled = false;
        inst.crash = None;
        inst.state = InstanceState::Live;
        self.record(EventKind::ContextRestart {
            instance: x,
            lineage,
            epoch,
            version: loaded_version,
        });
        if let Err(e) = init {
            self.halt_instance(x, None, e.to_string());
        }
    }

    fn fork(&mut self, x: usize, groups: &[Vec<u32>]) {
        if self.instances[x].state != InstanceState::Live {
            return;
        }
        let source_lineage = self.instances[x].lineage;
        let platform_idx = self.instances[x].platform;
        for group in groups.iter().skip(1) {
            let members: Vec<u32> = group.iter().copied().filter(|c| self.routes.contains_key(c)).collect();
            if members.is_empty() {
                continue;
            }
            let mut store = self.lineages[source_lineage].branch();
            let lineage = self.lineages.len();
            let instance = self.instances.len();
            let loaded = store.load();
            self.lineages.push(store);
            self.lineage_halted.push(false);
            let mut ctx = KvsContext::new(self.platforms[platform_idx].clone(), PROGRAM_ID, 0)
                .with_max_batch(self.config.batch_size);
            let init = ctx.init(loaded.as_ref().map(|(_, b)| b));
            self.instances.push(Instance {
                ctx,
                lineage,
                platform: platform_idx,
                state: InstanceState::Live,
                batch: Vec::new(),
                flush_scheduled: false,
                crash: None,
            });
            self.record(EventKind::Fork {
                instance,
                from_instance: x,
                lineage,
                clients: members.clone(),
            });
            for c in members {
                self.routes.insert(c, instance);
            }
            if let Err(e) = init {
                self.halt_instance(instance, None, e.to_string());
            }
        }
    }

    fn migrate(&mut self, x: usize) {
        if self.instances[x].state != InstanceState::Live {
            return;
        }
        let platform_idx = self.platforms.len();
        let platform = PlatformIdentity::generate_with(format!("platform-{platform_idx}"), &mut self.rng);
        self.platforms.push(platform.clone());
        let mut target = KvsContext::new(platform, PROGRAM_ID, 0).with_max_batch(self.config.batch_size);
        let blob = match self.instances[x].ctx.migrate_out(&mut target) {
            Ok(b) => b,
            Err(_) => return,
        };
        let lineage = self.instances[x].lineage;
        let pending: Vec<(Envelope, Meta)> = std::mem::take(&mut self.instances[x].batch);
        self.instances[x].state = InstanceState::MigratedOut;
        let y = self.instances.len();
        self.instances.push(Instance {
            ctx: target,
            lineage,
            platform: platform_idx,
            state: InstanceState::Live,
            batch: Vec::new(),
            flush_scheduled: false,
            crash: None,
        });
        self.record(EventKind::Migrate {
            from_instance: x,
            to_instance: y,
        });
        self.store(y, blob);
        let moved: Vec<u32> = self.routes.iter().filter(|(_, &r)| r == x).map(|(&c, _)| c).collect();
        for c in moved {
            self.routes.insert(c, y);
        }
        for (e, m) in pending {
            self.deliver(e, m);
        }
    }
}

/// Convenience: run one simulation to completion.
pub fn simulate(config: SimConfig, script: AdversaryScript) -> Simulator {
    let mut sim = Simulator::new(config, script);
    sim.run();
    sim
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(clients: u32, ops: u64) -> SimConfig {
        SimConfig {
            workload: WorkloadSpec {
                clients,
                ops,
                ..WorkloadSpec::default()
            },
            ..SimConfig::default()
        }
    }

    fn violations(sim: &Simulator) -> usize {
        sim.trace().violations().count()
    }

    #[test]
    fn correct_server_completes_everything() {
        let sim = simulate(config(3, 150), AdversaryScript::correct());
        assert_eq!(violations(&sim), 0);
        for c in 1..=3 {
            assert_eq!(sim.completed(c), 50);
        }
        let (ctx, state) = sim.instance(0).unwrap();
        assert_eq!(state, InstanceState::Live);
        assert_eq!(ctx.t(), 150);
    }

    #[test]
    fn same_inputs_same_trace() {
        let script = AdversaryScript::random(3, 8, 60, 3);
        let a = simulate(config(3, 60), script.clone()).into_trace().to_jsonl();
        let b = simulate(config(3, 60), script).into_trace().to_jsonl();
        assert_eq!(a, b);
    }

    #[test]
    fn rollback_detected() {
        let sim = simulate(
            config(3, 60),
            AdversaryScript::single(30, Action::RestartContextFrom { version: 5 }),
        );
        assert!(violations(&sim) >= 1);
    }

    #[test]
    fn crash_restart_completes_via_retry() {
        for action in [Action::CrashBeforeStore, Action::CrashAfterStore] {
            let sim = simulate(config(3, 30), AdversaryScript::single(10, action.clone()));
            assert_eq!(violations(&sim), 0, "{action:?}");
            assert!((1..=3).all(|c| sim.completed(c) == 10), "{action:?}");
        }
    }

    #[test]
    fn async_store_with_crash_loses_acknowledged_state() {
        let cfg = SimConfig {
            store_mode: StoreMode::Async,
            ..config(3, 30)
        };
        let sim = simulate(cfg, AdversaryScript::single(10, Action::CrashBeforeStore));
        assert!(violations(&sim) >= 1);
    }

    #[test]
    fn dropping_all_replies_is_only_denial_of_service() {
        let sim = simulate(config(3, 30), AdversaryScript::single(0, Action::DropRepliesTo { client: 2 }));
        assert_eq!(violations(&sim), 0);
        assert_eq!(sim.completed(2), 0);
        assert!(sim.stalled(2));
        assert_eq!(sim.completed(1), 10);
    }

    #[test]
    fn batching_preserves_final_state() {
        let plain = simulate(config(4, 80), AdversaryScript::correct());
        let batched = simulate(
            SimConfig {
                batch_size: 16,
                ..config(4, 80)
            },
            AdversaryScript::correct(),
        );
        assert_eq!(violations(&batched), 0);
        assert_eq!(plain.kvs(0), batched.kvs(0));
    }

    #[test]
    fn migration_keeps_serving() {
        let sim = simulate(config(3, 30), AdversaryScript::single(12, Action::Migrate));
        assert_eq!(violations(&sim), 0);
        assert!((1..=3).all(|c| sim.completed(c) == 10));
        assert_eq!(sim.instance(0).unwrap().1, InstanceState::MigratedOut);
        assert_eq!(sim.instance(1).unwrap().0.t(), 30);
    }

    #[test]
    fn durable_client_state_tracks_completions() {
        let sim = simulate(config(2, 10), AdversaryScript::correct());
        let state = crate::client::ClientState::decode(sim.client_durable_state(1)).unwrap();
        assert_eq!(&state, sim.client(1).state());
    }
}
