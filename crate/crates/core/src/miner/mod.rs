//! The miner adapter: announce, addBlock, update and sendTransaction
//! handlers, tick-driven proof of work, unsynced detection and contract state
//! kept as a pure function of the chain.
//!
//! A miner is an actor. Everything below runs on its host's executor, one
//! envelope or tick at a time; swarms it starts report back through
//! [`Adapter::on_event`].

mod replay;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use replay::{
    apply_block_contracts, replay_chain, replay_contract_states, BlockEffects, ContractStates, Receipt, Replay,
    TxOutcome,
};

use crate::blockchain::{
    resolve_fork, validate_block, Block, Chain, ChainRules, ForkChoice, PowSearch, Transaction, ValidationError,
};
use crate::bus::{AdapterId, GroupName, RegistrationHandle, SwarmId};
use crate::choreography::builtin::{self, INTERNAL};
use crate::choreography::{Adapter, AdapterCtx, AdapterHost, SwarmClient, SwarmEngine, SwarmError, SwarmEvent};
use crate::contracts::{ContractRegistry, DEFAULT_CONTRACT_TIMEOUT_MS};

pub const MINERS_GROUP: &str = "miners";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinerConfig {
    pub rules: ChainRules,
    /// Simulated milliseconds a contract call may take.
    pub contract_timeout_ms: u64,
    /// Nonces tried per scheduler tick.
    pub nonces_per_tick: u64,
    /// Ticks to wait for every announce answer.
    pub join_timeout_ticks: u64,
    /// Ticks to wait for an update reply.
    pub update_timeout_ticks: u64,
    /// Re-derive contract states from the chain after every applied block
    /// and count disagreements.
    pub verify_replay: bool,
    pub seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            rules: ChainRules::default(),
            contract_timeout_ms: DEFAULT_CONTRACT_TIMEOUT_MS,
            nonces_per_tick: 16,
            join_timeout_ticks: 50,
            update_timeout_ticks: 50,
            verify_replay: false,
            seed: 0,
        }
    }
}

/// Ledger-facing state of one miner.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MinerState {
    pub id: AdapterId,
    pub chain: Chain,
    pub pending_pool: Vec<Transaction>,
    pub awaiting_pool: Vec<Transaction>,
    pub peers: BTreeSet<AdapterId>,
    pub contract_states: ContractStates,
    /// Outcome of every on-chain transaction, by id.
    pub receipts: BTreeMap<String, Receipt>,
}

impl MinerState {
    pub fn new(id: AdapterId) -> Self {
        MinerState {
            id,
            chain: Chain::genesis(),
            pending_pool: Vec::new(),
            awaiting_pool: Vec::new(),
            peers: BTreeSet::new(),
            contract_states: ContractStates::new(),
            receipts: BTreeMap::new(),
        }
    }

    pub fn knows_tx(&self, tx_id: &str) -> bool {
        self.chain.contains_tx(tx_id)
            || self.pending_pool.iter().any(|t| t.tx_id == tx_id)
            || self.awaiting_pool.iter().any(|t| t.tx_id == tx_id)
    }

    pub fn tip_hash(&self) -> &str {
        &self.chain.tip().block_hash
    }

    fn add_peer(&mut self, name: &str) {
        if name != self.id.as_str() {
            if let Ok(peer) = AdapterId::new(name) {
                self.peers.insert(peer);
            }
        }
    }

    /// Appends transactions unknown so far, keeping order.
    fn pool(&mut self, txs: impl IntoIterator<Item = Transaction>) {
        for tx in txs {
            if tx.has_valid_id() && tx.is_well_formed() && !self.knows_tx(&tx.tx_id) {
                self.pending_pool.push(tx);
            }
        }
    }
}

/// What a miner hands out when asked for an update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UpdatePayload {
    pub chain: Chain,
    pub pending_pool: Vec<Transaction>,
    pub awaiting_pool: Vec<Transaction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TxVerdict {
    Pooled,
    Duplicate,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "camelCase")]
pub enum AddBlockOutcome {
    Accepted,
    Stale,
    Unsynced,
    Invalid { error: ValidationError },
}

/// Notable things that happened to a miner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "camelCase")]
pub enum MinerEvent {
    Joined {
        dispatched: usize,
        peers: usize,
    },
    JoinTimeout {
        dispatched: Option<usize>,
        responded: usize,
    },
    Mined {
        index: u64,
        hash: String,
    },
    Accepted {
        index: u64,
        from: String,
    },
    Stale {
        index: u64,
        from: String,
    },
    Unsynced {
        index: u64,
        from: String,
    },
    InvalidBlock {
        index: u64,
        from: String,
        error: ValidationError,
    },
    /// Mining stopped because the tip moved; `returned` transactions went
    /// back to the pending pool.
    Cancelled {
        returned: usize,
    },
    ChainAdopted {
        from: String,
        length: usize,
    },
    UpdateRequested {
        peer: String,
    },
    UpdateApplied {
        peer: String,
        length: usize,
    },
    UpdateRejected {
        peer: String,
    },
    UpdateTimeout {
        peer: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub tick: u64,
    #[serde(flatten)]
    pub event: MinerEvent,
}

struct MiningJob {
    search: PowSearch,
    scratch: ContractStates,
    effects: BlockEffects,
}

struct JoinWait {
    instance: SwarmId,
    dispatched: Option<usize>,
    responders: BTreeSet<String>,
    deadline: u64,
}

struct UpdateWait {
    peer: AdapterId,
    deadline: u64,
}

/// A miner's actor state. Attach it to a bus with [`spawn_miner`].
pub struct MinerNode {
    state: MinerState,
    config: MinerConfig,
    contracts: Arc<ContractRegistry>,
    rng: ChaCha8Rng,
    job: Option<MiningJob>,
    join: Option<JoinWait>,
    joined: bool,
    updates: BTreeMap<SwarmId, UpdateWait>,
    log: Vec<LogEntry>,
    replay_checks: u64,
    replay_mismatches: u64,
}

/// Registers the choreographies miners speak. Safe to call repeatedly.
pub fn register_protocol(engine: &SwarmEngine) -> Result<(), SwarmError> {
    for descriptor in [builtin::internal(), builtin::add_transaction()] {
        match engine.register_choreography(descriptor) {
            Ok(()) | Err(SwarmError::DuplicateChoreography(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Creates a miner and registers it in the miners group. It stays silent
/// until [`MinerNode::join_network`] is called.
pub fn spawn_miner(
    engine: &Arc<SwarmEngine>,
    id: AdapterId,
    config: MinerConfig,
    contracts: Arc<ContractRegistry>,
) -> Result<(Arc<AdapterHost<MinerNode>>, RegistrationHandle), SwarmError> {
    register_protocol(engine)?;
    let node = MinerNode::new(id.clone(), config, contracts);
    let group = GroupName::new(MINERS_GROUP).expect("non-empty");
    AdapterHost::attach(engine, id, group, node)
}

fn seed_for(seed: u64, id: &AdapterId) -> u64 {
    id.as_str().bytes().fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl MinerNode {
    pub fn new(id: AdapterId, config: MinerConfig, contracts: Arc<ContractRegistry>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed_for(config.seed, &id));
        MinerNode {
            state: MinerState::new(id),
            config,
            contracts,
            rng,
            job: None,
            join: None,
            joined: false,
            updates: BTreeMap::new(),
            log: Vec::new(),
            replay_checks: 0,
            replay_mismatches: 0,
        }
    }

    pub fn id(&self) -> &AdapterId {
        &self.state.id
    }

    pub fn state(&self) -> &MinerState {
        &self.state
    }

    pub fn config(&self) -> &MinerConfig {
        &self.config
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn is_mining(&self) -> bool {
        self.job.is_some()
    }

    pub fn has_joined(&self) -> bool {
        self.joined
    }

    /// Number of update requests still awaiting a reply.
    pub fn pending_updates(&self) -> usize {
        self.updates.len()
    }

    /// Nothing in flight and nothing left to mine.
    pub fn is_idle(&self) -> bool {
        self.joined
            && self.job.is_none()
            && self.updates.is_empty()
            && self.state.pending_pool.is_empty()
            && self.state.awaiting_pool.is_empty()
    }

    /// `(checks, mismatches)` of the replay verification.
    pub fn replay_stats(&self) -> (u64, u64) {
        (self.replay_checks, self.replay_mismatches)
    }

    fn record(&mut self, ctx: &AdapterCtx, event: MinerEvent) {
        self.log.push(LogEntry { tick: ctx.now, event });
    }

    fn internal(&self, ctx: &AdapterCtx, args: &[Value]) -> Result<SwarmId, SwarmError> {
        let client = SwarmClient::Adapter(self.state.id.clone());
        ctx.engine.execute_swarm(INTERNAL, "ctor", args, client).map(|h| h.id())
    }

    /// Announces this miner to the group with its chain. Answers are counted
    /// against the `announce_success` total as they arrive; when all are in,
    /// or the wait expires, the miner asks a random peer for an update.
    pub fn join_network(&mut self, ctx: &AdapterCtx) -> Result<SwarmId, SwarmError> {
        let params = json!({ "chain": self.state.chain });
        let id = self.state.id.to_string();
        let instance = self.internal(ctx, &[json!("broadcast"), json!(id), json!("announce"), params])?;
        self.join = Some(JoinWait {
            instance,
            dispatched: None,
            responders: BTreeSet::new(),
            deadline: ctx.now + self.config.join_timeout_ticks,
        });
        Ok(instance)
    }

    /// Registers the announcer and answers with this miner's name. A longer
    /// chain carried by the announcement is adopted.
    pub fn handle_announce(&mut self, ctx: &AdapterCtx, sender: &str, chain: Option<Chain>) -> String {
        self.state.add_peer(sender);
        if let Some(chain) = chain {
            if resolve_fork(&self.state.chain, &chain, &self.config.rules) == ForkChoice::AdoptRemote {
                let length = chain.len();
                self.adopt_chain(ctx, chain);
                self.record(ctx, MinerEvent::ChainAdopted { from: sender.to_string(), length });
            }
        }
        self.state.id.to_string()
    }

    pub fn handle_send_transaction(&mut self, tx: Transaction) -> TxVerdict {
        if !tx.has_valid_id() || !tx.is_well_formed() {
            TxVerdict::Invalid
        } else if self.state.knows_tx(&tx.tx_id) {
            TxVerdict::Duplicate
        } else {
            self.state.pending_pool.push(tx);
            TxVerdict::Pooled
        }
    }

    pub fn handle_update(&mut self, requester: &str) -> UpdatePayload {
        self.state.add_peer(requester);
        UpdatePayload {
            chain: self.state.chain.clone(),
            pending_pool: self.state.pending_pool.clone(),
            awaiting_pool: self.state.awaiting_pool.clone(),
        }
    }

    /// Asks `peer` for its chain and pools through a direct `update` call.
    pub fn request_update(&mut self, ctx: &AdapterCtx, peer: &AdapterId) -> Result<SwarmId, SwarmError> {
        let me = self.state.id.to_string();
        let instance = self.internal(ctx, &[json!("direct"), json!(peer.as_str()), json!(me), json!("update")])?;
        self.updates
            .insert(instance, UpdateWait { peer: peer.clone(), deadline: ctx.now + self.config.update_timeout_ticks });
        self.record(ctx, MinerEvent::UpdateRequested { peer: peer.to_string() });
        Ok(instance)
    }

    fn request_update_from_any(&mut self, ctx: &AdapterCtx) {
        if let Some(peer) = self.state.peers.iter().choose(&mut self.rng).cloned() {
            let _ = self.request_update(ctx, &peer);
        }
    }

    /// Applies an update reply; returns whether the remote chain was adopted.
    pub fn apply_update(&mut self, ctx: &AdapterCtx, peer: &AdapterId, payload: UpdatePayload) -> bool {
        if resolve_fork(&self.state.chain, &payload.chain, &self.config.rules) == ForkChoice::KeepLocal {
            self.record(ctx, MinerEvent::UpdateRejected { peer: peer.to_string() });
            return false;
        }
        let length = payload.chain.len();
        self.adopt_chain(ctx, payload.chain);
        self.state.pool(payload.pending_pool.into_iter().chain(payload.awaiting_pool));
        self.record(ctx, MinerEvent::UpdateApplied { peer: peer.to_string(), length });
        true
    }

    /// Handles a block pushed by `sender`.
    pub fn handle_add_block(&mut self, ctx: &AdapterCtx, sender: &str, block: Block) -> AddBlockOutcome {
        let tip = self.state.chain.tip();
        let (tip_index, tip_hash) = (tip.index, tip.block_hash.clone());
        let index = block.index;
        let from = sender.to_string();

        if index <= tip_index {
            let known = &self.state.chain.blocks[index as usize];
            // an equal-height rival with a lower hash wins the tie-break, but
            // only a full chain can be adopted, so fetch it
            let rival = index == tip_index
                && known.block_hash != block.block_hash
                && block.block_hash.as_bytes() < known.block_hash.as_bytes();
            if rival {
                self.record(ctx, MinerEvent::Unsynced { index, from });
                self.update_from_block_source(ctx, &block, sender);
                return AddBlockOutcome::Unsynced;
            }
            self.record(ctx, MinerEvent::Stale { index, from });
            return AddBlockOutcome::Stale;
        }
        if index > tip_index + 1 || block.prev_hash != tip_hash {
            self.record(ctx, MinerEvent::Unsynced { index, from });
            self.update_from_block_source(ctx, &block, sender);
            return AddBlockOutcome::Unsynced;
        }
        if let Err(error) = validate_block(&block, self.state.chain.tip(), &self.config.rules) {
            self.record(ctx, MinerEvent::InvalidBlock { index, from, error });
            return AddBlockOutcome::Invalid { error };
        }
        let mut states = std::mem::take(&mut self.state.contract_states);
        let effects = apply_block_contracts(
            &self.contracts,
            &self.state.chain.blocks,
            &block,
            &mut states,
            self.config.contract_timeout_ms,
            &self.state.id,
        );
        self.state.contract_states = states;
        self.commit_block(block, effects);
        self.cancel_job(ctx);
        self.record(ctx, MinerEvent::Accepted { index, from });
        AddBlockOutcome::Accepted
    }

    fn update_from_block_source(&mut self, ctx: &AdapterCtx, block: &Block, sender: &str) {
        let candidate = [block.miner_id.as_str(), sender]
            .into_iter()
            .filter_map(|n| AdapterId::new(n).ok())
            .find(|p| p != &self.state.id && (self.state.peers.contains(p) || ctx.engine.bus().is_registered(p)));
        match candidate {
            Some(peer) => {
                let _ = self.request_update(ctx, &peer);
            }
            None => self.request_update_from_any(ctx),
        }
    }

    /// Appends an already validated block whose contract effects are known.
    fn commit_block(&mut self, block: Block, effects: BlockEffects) {
        let on_block: BTreeSet<&str> = block.transactions.iter().map(|t| t.tx_id.as_str()).collect();
        self.state.pending_pool.retain(|t| !on_block.contains(t.tx_id.as_str()));
        self.state.awaiting_pool.retain(|t| !on_block.contains(t.tx_id.as_str()));
        self.state.chain.blocks.push(block);
        self.state.receipts.extend(effects.receipts);
        self.state.pool(effects.internal);
        self.verify_states();
    }

    /// Replaces the chain. Transactions of abandoned blocks go back to the
    /// pending pool ahead of everything else.
    fn adopt_chain(&mut self, ctx: &AdapterCtx, chain: Chain) {
        self.cancel_job(ctx);
        let kept = chain.tx_ids();
        let orphaned: Vec<Transaction> =
            self.state.chain.transactions().filter(|t| !kept.contains(&t.tx_id)).cloned().collect();
        let replay = replay_chain(&chain, &self.contracts, self.config.contract_timeout_ms, &self.state.id);
        let pending = std::mem::take(&mut self.state.pending_pool);
        self.state.chain = chain;
        self.state.contract_states = replay.states;
        self.state.receipts = replay.receipts;
        self.state.pool(orphaned.into_iter().chain(pending).chain(replay.internal));
        self.verify_states();
    }

    /// Abandons the current mining job; its transactions return to the front
    /// of the pending pool in their original order unless already on chain.
    fn cancel_job(&mut self, ctx: &AdapterCtx) {
        if self.job.take().is_none() {
            return;
        }
        let awaiting = std::mem::take(&mut self.state.awaiting_pool);
        let back: Vec<Transaction> = awaiting.into_iter().filter(|t| !self.state.chain.contains_tx(&t.tx_id)).collect();
        let returned = back.len();
        let rest = std::mem::take(&mut self.state.pending_pool);
        self.state.pending_pool = back;
        self.state.pool(rest);
        self.record(ctx, MinerEvent::Cancelled { returned });
    }

    fn verify_states(&mut self) {
        if !self.config.verify_replay {
            return;
        }
        let replay = replay_chain(&self.state.chain, &self.contracts, self.config.contract_timeout_ms, &self.state.id);
        self.replay_checks += 1;
        if replay.states != self.state.contract_states {
            self.replay_mismatches += 1;
        }
    }

    /// Moves up to `block_cap` pending transactions into the awaiting pool,
    /// runs their contracts on a scratch copy of the states and starts the
    /// nonce search. Returns false when there is nothing to mine.
    pub fn start_mining(&mut self, ctx: &AdapterCtx) -> bool {
        if self.job.is_some() || self.state.pending_pool.is_empty() {
            return false;
        }
        let take = self.config.rules.block_cap.min(self.state.pending_pool.len());
        let txs = self.state.pending_pool[..take].to_vec();
        let Ok(search) =
            PowSearch::new(self.state.chain.tip(), txs.clone(), &self.config.rules, self.state.id.as_str(), ctx.now)
        else {
            return false;
        };
        self.state.pending_pool.drain(..take);
        self.state.awaiting_pool = txs;
        let mut scratch = self.state.contract_states.clone();
        let effects = apply_block_contracts(
            &self.contracts,
            &self.state.chain.blocks,
            search.template(),
            &mut scratch,
            self.config.contract_timeout_ms,
            &self.state.id,
        );
        self.job = Some(MiningJob { search, scratch, effects });
        true
    }

    /// Advances the nonce search by `budget`; on success commits the block
    /// and pushes it to the group without awaiting answers.
    pub fn mine_step(&mut self, ctx: &AdapterCtx, budget: u64) -> Option<Block> {
        let found = self.job.as_mut()?.search.step(budget)?;
        let job = self.job.take().expect("job present");
        self.state.contract_states = job.scratch;
        self.record(ctx, MinerEvent::Mined { index: found.index, hash: found.block_hash.clone() });
        self.commit_block(found.clone(), job.effects);
        let me = self.state.id.to_string();
        let _ = self.internal(ctx, &[json!("broadcast"), json!(me), json!("addBlock"), found.to_value()]);
        Some(found)
    }

    fn on_join_event(&mut self, ctx: &AdapterCtx, event: &SwarmEvent) {
        let Some(join) = self.join.as_mut() else { return };
        match (event.name.as_str(), event.is_result()) {
            ("announce_success", false) => join.dispatched = event.payload.as_u64().map(|n| n as usize),
            ("announce", true) => {
                if let Some(name) = event.payload.as_str() {
                    join.responders.insert(name.to_string());
                    self.state.add_peer(name);
                }
            }
            _ => {}
        }
        let join = self.join.as_ref().expect("checked above");
        if join.dispatched.is_some_and(|n| join.responders.len() >= n) {
            let dispatched = join.dispatched.unwrap_or(0);
            self.join = None;
            self.finish_join(ctx, MinerEvent::Joined { dispatched, peers: self.state.peers.len() });
        }
    }

    fn finish_join(&mut self, ctx: &AdapterCtx, event: MinerEvent) {
        self.joined = true;
        self.record(ctx, event);
        self.request_update_from_any(ctx);
    }

    fn check_deadlines(&mut self, ctx: &AdapterCtx) {
        if let Some(join) = self.join.as_ref().filter(|j| ctx.now >= j.deadline) {
            let event = MinerEvent::JoinTimeout { dispatched: join.dispatched, responded: join.responders.len() };
            self.join = None;
            self.finish_join(ctx, event);
        }
        let expired: Vec<SwarmId> =
            self.updates.iter().filter(|(_, w)| ctx.now >= w.deadline).map(|(id, _)| *id).collect();
        for id in expired {
            let wait = self.updates.remove(&id).expect("listed above");
            self.record(ctx, MinerEvent::UpdateTimeout { peer: wait.peer.to_string() });
        }
    }
}

fn field<'v>(args: &'v Value, name: &str) -> Result<&'v Value, SwarmError> {
    args.get(name).ok_or_else(|| SwarmError::handler(format!("missing argument {name}")))
}

fn parse<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> Result<T, SwarmError> {
    serde_json::from_value(value).map_err(|e| SwarmError::handler(format!("malformed {what}: {e}")))
}

impl Adapter for MinerNode {
    fn call(&mut self, ctx: &AdapterCtx, method: &str, args: Value) -> Result<Value, SwarmError> {
        match method {
            "announce" => {
                let sender = field(&args, "sender")?.as_str().unwrap_or_default().to_string();
                let chain = match args.get("chain") {
                    None | Some(Value::Null) => None,
                    Some(c) => Some(parse::<Chain>(c.clone(), "chain")?),
                };
                Ok(json!(self.handle_announce(ctx, &sender, chain)))
            }
            "addBlock" => {
                let sender = field(&args, "sender")?.as_str().unwrap_or_default().to_string();
                let block: Block = parse(field(&args, "block")?.clone(), "block")?;
                Ok(serde_json::to_value(self.handle_add_block(ctx, &sender, block)).expect("outcome serializes"))
            }
            "update" => {
                let requester = field(&args, "requester")?.as_str().unwrap_or_default().to_string();
                Ok(serde_json::to_value(self.handle_update(&requester)).expect("payload serializes"))
            }
            "sendTransaction" => {
                let tx: Transaction = parse(args, "transaction")?;
                Ok(json!(self.handle_send_transaction(tx)))
            }
            other => Err(SwarmError::UnknownMethod(other.to_string())),
        }
    }

    fn on_event(&mut self, ctx: &AdapterCtx, event: SwarmEvent) {
        if self.join.as_ref().is_some_and(|j| j.instance == event.instance_id) {
            self.on_join_event(ctx, &event);
            return;
        }
        if event.name == "update_success" && !event.is_result() {
            if let Some(wait) = self.updates.remove(&event.instance_id) {
                match parse::<UpdatePayload>(event.payload, "update payload") {
                    Ok(payload) => {
                        self.apply_update(ctx, &wait.peer, payload);
                    }
                    Err(_) => self.record(ctx, MinerEvent::UpdateRejected { peer: wait.peer.to_string() }),
                }
            }
        }
    }

    fn on_tick(&mut self, ctx: &AdapterCtx) {
        self.check_deadlines(ctx);
        if !self.joined || !self.updates.is_empty() {
            return;
        }
        if self.job.is_none() {
            self.start_mining(ctx);
        }
        let budget = self.config.nonces_per_tick;
        self.mine_step(ctx, budget);
    }
}
