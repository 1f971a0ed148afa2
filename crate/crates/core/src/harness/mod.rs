//! Scenario runner: builds a miner network on one bus, replays a timeline
//! of actions under the seeded scheduler and reports where it ended up.
//!
//! One scheduler tick stands for one simulated millisecond.

mod chainfile;
mod config;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

pub use chainfile::{encode_chain, parse_chain, read_chain_file, verify_chain_file, write_chain_file, ChainFileError};
pub use config::{
    miner_name, Action, ConfigError, ScenarioConfig, ScheduledAction, TxRequest, MAX_DIFFICULTY, MAX_MINERS,
};

use crate::blockchain::canonical;
use crate::blockchain::{Chain, ChainRules, Transaction};
use crate::bus::{AdapterId, Bus, BusError, GroupName};
use crate::choreography::builtin::ADD_TRANSACTION;
use crate::choreography::{AdapterHost, SwarmClient, SwarmEngine, SwarmError, SwarmHandle, TranscriptEntry};
use crate::contracts::ContractRegistry;
use crate::miner::{spawn_miner, ContractStates, LogEntry, MinerConfig, MinerNode, MinerState, MINERS_GROUP};
use crate::scheduler::Scheduler;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no miners are registered")]
    NoMiners,
    #[error("no miner named {0}")]
    UnknownMiner(String),
    #[error("a miner named {0} already exists")]
    DuplicateMiner(String),
    #[error("invalid transaction: {0}")]
    InvalidTransaction(String),
    #[error(transparent)]
    ChainFile(#[from] ChainFileError),
    #[error(transparent)]
    Swarm(#[from] SwarmError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MinerReport {
    pub chain_length: usize,
    pub pending_count: usize,
    pub peer_count: usize,
    pub tip_hash: String,
    pub contract_states: ContractStates,
}

/// End state of a run. `perMiner` lists miners that did not crash.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub converged: bool,
    pub tip_hash: String,
    pub chain_length: usize,
    pub ticks: u64,
    pub per_miner: BTreeMap<String, MinerReport>,
    pub event_transcript: Vec<TranscriptEntry>,
}

impl RunReport {
    pub fn to_canonical(&self) -> String {
        canonical::to_canonical_string(self).expect("reports hold integers and strings only")
    }
}

/// A transaction handed to the network.
#[derive(Debug, Clone)]
pub struct Submission {
    pub tx: Transaction,
    handle: SwarmHandle,
}

impl Submission {
    pub fn tx_id(&self) -> &str {
        &self.tx.tx_id
    }

    /// Each miner's answer so far: `pooled`, `duplicate` or `invalid`.
    pub fn verdicts(&self) -> BTreeMap<AdapterId, Value> {
        self.handle.result()
    }

    pub fn is_complete(&self) -> bool {
        self.handle.is_complete()
    }
}

pub struct Simulation {
    config: ScenarioConfig,
    miner_config: MinerConfig,
    engine: Arc<SwarmEngine>,
    scheduler: Scheduler,
    contracts: Arc<ContractRegistry>,
    miners: BTreeMap<String, Arc<AdapterHost<MinerNode>>>,
    nonces: BTreeMap<String, u64>,
    next_action: usize,
}

impl Simulation {
    /// Builds the initial network with the sample contracts. Every initial
    /// miner is registered before any of them announces itself.
    pub fn new(config: ScenarioConfig) -> Result<Self, HarnessError> {
        Self::with_contracts(config, Arc::new(ContractRegistry::with_samples()))
    }

    pub fn with_contracts(config: ScenarioConfig, contracts: Arc<ContractRegistry>) -> Result<Self, HarnessError> {
        Self::build(config, contracts, false)
    }

    /// Like [`Simulation::new`], with every miner re-deriving its contract
    /// states from scratch after each accepted block and counting mismatches.
    pub fn with_replay_checks(config: ScenarioConfig) -> Result<Self, HarnessError> {
        Self::build(config, Arc::new(ContractRegistry::with_samples()), true)
    }

    fn build(
        config: ScenarioConfig,
        contracts: Arc<ContractRegistry>,
        verify_replay: bool,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        let bus = Arc::new(Bus::new());
        let engine = SwarmEngine::new(bus.clone());
        let miner_config = MinerConfig {
            rules: ChainRules { difficulty: config.difficulty_bits, block_cap: config.block_cap },
            contract_timeout_ms: config.contract_timeout_ms,
            nonces_per_tick: config.nonces_per_tick,
            seed: config.seed,
            verify_replay,
            ..MinerConfig::default()
        };
        let mut sim = Simulation {
            scheduler: Scheduler::new(bus, config.seed),
            config,
            miner_config,
            engine,
            contracts,
            miners: BTreeMap::new(),
            nonces: BTreeMap::new(),
            next_action: 0,
        };
        let names = sim.config.initial_miners();
        for name in &names {
            sim.spawn(name)?;
        }
        for name in &names {
            sim.join(name)?;
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn rules(&self) -> ChainRules {
        self.miner_config.rules
    }

    pub fn engine(&self) -> &Arc<SwarmEngine> {
        &self.engine
    }

    pub fn contracts(&self) -> &Arc<ContractRegistry> {
        &self.contracts
    }

    pub fn now(&self) -> u64 {
        self.scheduler.now()
    }

    fn spawn(&mut self, name: &str) -> Result<(), HarnessError> {
        let id = AdapterId::new(name).map_err(|_| HarnessError::UnknownMiner(name.to_string()))?;
        let (host, _) =
            spawn_miner(&self.engine, id, self.miner_config.clone(), self.contracts.clone()).map_err(|e| match e {
                SwarmError::Bus(BusError::DuplicateAdapter(_)) => HarnessError::DuplicateMiner(name.to_string()),
                other => other.into(),
            })?;
        self.miners.insert(name.to_string(), host);
        Ok(())
    }

    fn join(&self, name: &str) -> Result<(), HarnessError> {
        self.host(name)?.with(|m, ctx| m.join_network(ctx))?;
        Ok(())
    }

    fn host(&self, name: &str) -> Result<&Arc<AdapterHost<MinerNode>>, HarnessError> {
        self.miners.get(name).ok_or_else(|| HarnessError::UnknownMiner(name.to_string()))
    }

    /// Adds a miner and has it announce itself.
    pub fn add_miner(&mut self, name: &str) -> Result<(), HarnessError> {
        self.spawn(name)?;
        self.join(name)
    }

    pub fn crash(&self, name: &str) -> Result<(), HarnessError> {
        let host = self.host(name)?;
        self.engine.bus().crash(host.id()).map_err(|_| HarnessError::UnknownMiner(name.to_string()))
    }

    pub fn delay(&self, from: &str, to: &str, ticks: u64) -> Result<(), HarnessError> {
        let to = self.host(to)?.id().clone();
        self.engine.bus().set_edge_delay(from, to, ticks);
        Ok(())
    }

    /// Broadcasts a transaction through the `addTransaction` choreography.
    pub fn submit_transaction(&mut self, request: &TxRequest) -> Result<Submission, HarnessError> {
        let group = GroupName::new(MINERS_GROUP).expect("non-empty");
        if self.engine.bus().list_group(&group).is_empty() {
            return Err(HarnessError::NoMiners);
        }
        let counter = self.nonces.entry(request.sender.clone()).or_insert(0);
        let nonce = request.nonce.unwrap_or(*counter);
        *counter = (*counter).max(nonce + 1);
        let tx = Transaction::new(&request.sender, &request.contract, request.full_params(), nonce, self.now())
            .map_err(|e| HarnessError::InvalidTransaction(e.to_string()))?;
        let client = SwarmClient::External(request.sender.clone());
        let handle = self.engine.execute_swarm(ADD_TRANSACTION, "addTransaction", &[tx.to_value()], client)?;
        Ok(Submission { tx, handle })
    }

    fn apply(&mut self, action: &Action) -> Result<(), HarnessError> {
        match action {
            Action::SubmitTx(request) => self.submit_transaction(request).map(drop),
            Action::JoinMiner { name } => self.add_miner(name),
            Action::CrashMiner { name } => self.crash(name),
            Action::DelayEdge { from, to, ticks } => self.delay(from, to, *ticks),
        }
    }

    /// Applies every scheduled action due at the current tick.
    pub fn apply_due(&mut self) -> Result<(), HarnessError> {
        while let Some(ev) = self.config.events.get(self.next_action).cloned() {
            if ev.at_tick > self.now() {
                break;
            }
            self.next_action += 1;
            self.apply(&ev.action)?;
        }
        Ok(())
    }

    pub fn tick(&mut self) {
        self.scheduler.tick();
    }

    fn live(&self) -> impl Iterator<Item = (&String, &Arc<AdapterHost<MinerNode>>)> {
        let bus = self.engine.bus().clone();
        self.miners.iter().filter(move |(_, h)| !bus.is_crashed(h.id()))
    }

    /// Nothing queued on the bus and every live miner idle.
    pub fn is_quiescent(&self) -> bool {
        self.engine.bus().queued_count() == 0 && self.live().all(|(_, h)| h.with(|m, _| m.is_idle()))
    }

    pub fn timeline_done(&self) -> bool {
        self.next_action >= self.config.events.len()
    }

    /// Runs until the timeline is exhausted and the network is quiescent, or
    /// until `maxTicks`.
    pub fn run(&mut self) -> Result<RunReport, HarnessError> {
        self.run_with(|_| {})
    }

    /// Like [`Simulation::run`], calling `observe` after every tick.
    pub fn run_with(&mut self, mut observe: impl FnMut(&Simulation)) -> Result<RunReport, HarnessError> {
        loop {
            self.apply_due()?;
            if (self.timeline_done() && self.is_quiescent()) || self.now() >= self.config.max_ticks {
                break;
            }
            self.tick();
            observe(self);
        }
        Ok(self.report())
    }

    /// Ticks until quiescent or `max_ticks` more ticks pass, ignoring the timeline.
    pub fn settle(&mut self, max_ticks: u64) -> bool {
        for _ in 0..max_ticks {
            if self.is_quiescent() {
                return true;
            }
            self.tick();
        }
        self.is_quiescent()
    }

    pub fn miner_names(&self) -> Vec<String> {
        self.miners.keys().cloned().collect()
    }

    pub fn miner(&self, name: &str) -> Option<MinerState> {
        self.miners.get(name).map(|h| h.with(|m, _| m.state().clone()))
    }

    pub fn miner_log(&self, name: &str) -> Option<Vec<LogEntry>> {
        self.miners.get(name).map(|h| h.with(|m, _| m.log().to_vec()))
    }

    /// `(checks, mismatches)` of a miner's replay verification.
    pub fn replay_stats(&self, name: &str) -> Option<(u64, u64)> {
        self.miners.get(name).map(|h| h.with(|m, _| m.replay_stats()))
    }

    pub fn is_crashed(&self, name: &str) -> bool {
        self.miners.get(name).is_some_and(|h| self.engine.bus().is_crashed(h.id()))
    }

    pub fn dump_chain(&self, miner: &str, path: &Path) -> Result<(), HarnessError> {
        let state = self.miner(miner).ok_or_else(|| HarnessError::UnknownMiner(miner.to_string()))?;
        write_chain_file(&state.chain, path)?;
        Ok(())
    }

    pub fn report(&self) -> RunReport {
        let states: Vec<(String, MinerState)> =
            self.live().map(|(n, h)| (n.clone(), h.with(|m, _| m.state().clone()))).collect();
        let converged =
            states.windows(2).all(|w| w[0].1.chain == w[1].1.chain && w[0].1.contract_states == w[1].1.contract_states);
        let best: Option<&Chain> = states
            .iter()
            .map(|(_, s)| &s.chain)
            .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.tip().block_hash.cmp(&a.tip().block_hash)));
        let (tip_hash, chain_length) = match best {
            Some(c) => (c.tip().block_hash.clone(), c.len()),
            None => (Chain::genesis().tip().block_hash.clone(), 1),
        };
        let per_miner = states
            .into_iter()
            .map(|(name, s)| {
                let r = MinerReport {
                    chain_length: s.chain.len(),
                    pending_count: s.pending_pool.len(),
                    peer_count: s.peers.len(),
                    tip_hash: s.tip_hash().to_string(),
                    contract_states: s.contract_states,
                };
                (name, r)
            })
            .collect();
        RunReport {
            converged,
            tip_hash,
            chain_length,
            ticks: self.now(),
            per_miner,
            event_transcript: self.engine.transcript(),
        }
    }
}

/// Builds the network described by `config`, runs it and reports.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunReport, HarnessError> {
    Simulation::new(config.clone())?.run()
}
