//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints exactly one PASS/FAIL line, even when an earlier one fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use swarmchain::blockchain::{
    hash_block, mine_block, resolve_fork, validate_chain, Block, Chain, ChainRules, ForkChoice, Transaction,
};
use swarmchain::bus::{AdapterId, Bus, GroupName};
use swarmchain::choreography::builtin::{self, EchoAdapter, PINGPONG, PINGPONG_GROUP};
use swarmchain::choreography::{AdapterHost, SwarmClient, SwarmEngine, TranscriptEntry};
use swarmchain::contracts::ContractRegistry;
use swarmchain::harness::{Action, ScenarioConfig, ScheduledAction, Simulation, TxRequest};
use swarmchain::miner::{replay_contract_states, TxOutcome};
use swarmchain::scheduler::Scheduler;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn id(s: &str) -> AdapterId {
    AdapterId::new(s).unwrap()
}

/// Four miners, ten counter increments from random senders at random ticks.
fn counter_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ticks: Vec<u64> = (0..10).map(|_| rng.gen_range(1..=60)).collect();
    ticks.sort_unstable();
    let mut cfg = ScenarioConfig::new(seed, 4);
    cfg.difficulty_bits = 8;
    for t in ticks {
        let sender = ["alice", "bob", "carol"].choose(&mut rng).unwrap();
        cfg = cfg.at(t, Action::SubmitTx(TxRequest::call(sender, "counter", "increment")));
    }
    cfg
}

fn identical_chains(sim: &Simulation) -> bool {
    let chains: Vec<String> =
        sim.miner_names().iter().map(|n| swarmchain::harness::encode_chain(&sim.miner(n).unwrap().chain)).collect();
    chains.windows(2).all(|w| w[0] == w[1])
}

fn convergence() -> Result<String, String> {
    let mut worst = 0;
    for seed in 1..=20 {
        let mut sim = Simulation::new(counter_scenario(seed)).map_err(|e| e.to_string())?;
        let report = sim.run().map_err(|e| e.to_string())?;
        ensure!(report.converged, "seed {seed}: not converged after {} ticks", report.ticks);
        ensure!(identical_chains(&sim), "seed {seed}: chains differ byte-wise");
        ensure!(report.ticks <= 2000, "seed {seed}: took {} ticks", report.ticks);
        for (name, m) in &report.per_miner {
            let expected: BTreeMap<String, Value> = [("counter".to_string(), json!({"count": 10}))].into();
            ensure!(m.contract_states == expected, "seed {seed}: {name} has {:?}", m.contract_states);
            ensure!(m.pending_count == 0, "seed {seed}: {name} still has {} pending", m.pending_count);
        }
        worst = worst.max(report.ticks);
    }
    Ok(format!("20 seeds, slowest run {worst} ticks"))
}

fn late_join() -> Result<String, String> {
    let mut cfg = ScenarioConfig::new(7, 3);
    cfg.difficulty_bits = 8;
    cfg.block_cap = 1;
    for i in 0..5 {
        cfg = cfg.at(1 + i, Action::SubmitTx(TxRequest::call("alice", "counter", "increment")));
    }
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let mined = |sim: &Simulation| sim.miner_names().iter().all(|n| sim.miner(n).unwrap().chain.len() > 3);
    while !mined(&sim) {
        ensure!(sim.now() < 2000, "network never mined three blocks");
        sim.apply_due().map_err(|e| e.to_string())?;
        sim.tick();
    }
    let joined_at = sim.now();
    let transcript_start = sim.engine().transcript_len();
    sim.add_miner("late").map_err(|e| e.to_string())?;
    let caught_up = |sim: &Simulation| {
        let tips: Vec<String> =
            sim.miner_names().iter().map(|n| sim.miner(n).unwrap().tip_hash().to_string()).collect();
        tips.windows(2).all(|w| w[0] == w[1]) && sim.miner("late").unwrap().chain.len() > 3
    };
    while !caught_up(&sim) {
        ensure!(sim.now() - joined_at <= 200, "joiner not at tip 200 ticks after joining");
        sim.apply_due().map_err(|e| e.to_string())?;
        sim.tick();
    }
    let took = sim.now() - joined_at;

    let transcript = &sim.engine().transcript()[transcript_start..];
    let dispatches = |phase_name: &str| {
        transcript
            .iter()
            .filter(|e| matches!(e, TranscriptEntry::Dispatch { phase, origin, .. } if phase == phase_name && origin == "late"))
            .count()
    };
    let announces = transcript
        .iter()
        .filter(|e| matches!(e, TranscriptEntry::Dispatch { phase, origin, mode, .. } if phase == "announce" && origin == "late" && mode == "broadcast"))
        .count();
    ensure!(announces == 1 && dispatches("announce") == 1, "joiner sent {announces} announce broadcasts");
    let updates = dispatches("update");
    ensure!(updates >= 1, "joiner requested no update");
    let replies = transcript
        .iter()
        .filter(|e| matches!(e, TranscriptEntry::Event { name, target, .. } if name == "update_success" && target == "late"))
        .count();
    ensure!(replies >= 1, "no update_success reached the joiner");
    Ok(format!("tip reached {took} ticks after join; 1 announce, {updates} update(s), {replies} reply(ies)"))
}

fn self_delivery() -> Result<String, String> {
    for n in [1usize, 2, 3, 5] {
        let bus = Arc::new(Bus::new());
        let engine = SwarmEngine::new(bus.clone());
        engine.register_choreography(builtin::pingpong()).unwrap();
        let group = GroupName::new(PINGPONG_GROUP).unwrap();
        for i in 0..n {
            AdapterHost::attach(&engine, id(&format!("A{i}")), group.clone(), EchoAdapter).unwrap();
        }
        let mut sched = Scheduler::new(bus, n as u64);
        let handle = engine
            .execute_swarm(PINGPONG, "startBroadcast", &[json!("A0")], SwarmClient::Adapter(id("A0")))
            .map_err(|e| e.to_string())?;
        let result = handle.wait(&mut sched, 50).map_err(|e| e.to_string())?;
        ensure!(result.len() == n, "N={n}: {} pong results", result.len());
        ensure!(result.get(&id("A0")) == Some(&json!("pong")), "N={n}: caller's own pong missing");
        ensure!(result.values().all(|v| v == "pong"), "N={n}: non-pong result");
    }
    Ok("N in {1,2,3,5} each returned exactly N pongs".into())
}

fn no_wait_after_block_broadcast() -> Result<String, String> {
    let mut sim = Simulation::new(counter_scenario(3)).map_err(|e| e.to_string())?;
    let report = sim.run().map_err(|e| e.to_string())?;
    let block_dispatches: Vec<(u64, bool)> = report
        .event_transcript
        .iter()
        .filter_map(|e| match e {
            TranscriptEntry::Dispatch { phase, instance, collect, .. } if phase == "addBlock" => {
                Some((*instance, *collect))
            }
            _ => None,
        })
        .collect();
    ensure!(block_dispatches.iter().all(|(_, collect)| !collect), "an addBlock dispatch collects results");
    let block_instances: Vec<u64> = block_dispatches.iter().map(|(i, _)| *i).collect();
    ensure!(!block_instances.is_empty(), "no block was broadcast");
    let collected = report
        .event_transcript
        .iter()
        .filter(|e| matches!(e, TranscriptEntry::Result { .. }) && block_instances.contains(&e.instance()))
        .count();
    ensure!(collected == 0, "{collected} result entries attributed to addBlock");
    Ok(format!("{} block broadcasts, 0 result entries", block_instances.len()))
}

fn counter_tx(sender: &str, nonce: u64) -> Transaction {
    Transaction::new(sender, "counter", json!({"method": "increment"}), nonce, nonce).unwrap()
}

fn mutate(chain: &Chain, rng: &mut ChaCha8Rng) -> (Chain, String) {
    let mut c = chain.clone();
    let bi = rng.gen_range(0..c.blocks.len());
    let with_txs = !c.blocks[bi].transactions.is_empty();
    let field = rng.gen_range(0..if with_txs { 14 } else { 8 });
    let b = &mut c.blocks[bi];
    let bump = rng.gen_range(1..1000u64);
    let label = match field {
        0 => {
            b.index += bump;
            "index"
        }
        1 => {
            b.prev_hash = hex::encode(Sha256::digest(bump.to_be_bytes()));
            "prevHash"
        }
        2 => {
            b.timestamp += bump;
            "timestamp"
        }
        3 => {
            b.miner_id.push('x');
            "minerId"
        }
        4 => {
            b.difficulty = if b.difficulty == 0 { 1 } else { b.difficulty - 1 };
            "difficulty"
        }
        5 => {
            b.nonce = b.nonce.wrapping_add(bump);
            "nonce"
        }
        6 => {
            b.block_hash = hex::encode(Sha256::digest(b.block_hash.as_bytes()));
            "blockHash"
        }
        7 => {
            b.transactions.push(counter_tx("mallory", bump));
            "transactions"
        }
        _ => {
            let ti = rng.gen_range(0..b.transactions.len());
            let tx = &mut b.transactions[ti];
            match field {
                8 => tx.tx_id = hex::encode(Sha256::digest(tx.tx_id.as_bytes())),
                9 => tx.sender.push('x'),
                10 => tx.contract = "busy".into(),
                11 => tx.params = json!({"method": "get"}),
                12 => tx.nonce += bump,
                _ => tx.timestamp += bump,
            }
            ["tx.txId", "tx.sender", "tx.contract", "tx.params", "tx.nonce", "tx.timestamp"][field - 8]
        }
    };
    (c, format!("block {bi} {label}"))
}

fn tamper_rejection() -> Result<String, String> {
    let rules = ChainRules { difficulty: 8, block_cap: 4 };
    let mut chain = Chain::genesis();
    for i in 1..6u64 {
        let txs = (0..i.min(3)).map(|k| counter_tx("alice", i * 10 + k)).collect();
        let b = mine_block(chain.tip(), txs, &rules, "M", i).map_err(|e| e.to_string())?;
        chain.blocks.push(b);
    }
    ensure!(chain.len() == 6 && validate_chain(&chain, &rules).is_ok(), "baseline chain invalid");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (bad, what) = mutate(&chain, &mut rng);
        ensure!(bad != chain, "mutation of {what} was a no-op");
        ensure!(validate_chain(&bad, &rules).is_err(), "accepted mutated {what}");
    }
    Ok("100 mutations, 0 false accepts".into())
}

fn fork_determinism() -> Result<String, String> {
    let rules = ChainRules { difficulty: 4, block_cap: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let extend = |base: &Chain, n: usize, rng: &mut ChaCha8Rng| {
        let mut c = base.clone();
        for _ in 0..n {
            let miner = ["A", "B", "C"].choose(rng).unwrap();
            let tx = counter_tx(miner, rng.gen_range(0..1_000_000));
            let b = mine_block(c.tip(), vec![tx], &rules, miner, c.len() as u64).unwrap();
            c.blocks.push(b);
        }
        c
    };
    let mut equal_heights = 0;
    for pair in 0..50 {
        let shared = extend(&Chain::genesis(), rng.gen_range(0..3), &mut rng);
        let a = extend(&shared, rng.gen_range(0..4), &mut rng);
        let b = extend(&shared, rng.gen_range(0..4), &mut rng);
        let ab = resolve_fork(&a, &b, &rules);
        let ba = resolve_fork(&b, &a, &rules);
        if a == b {
            ensure!(ab == ForkChoice::KeepLocal && ba == ForkChoice::KeepLocal, "pair {pair}: equal chains swapped");
        } else {
            ensure!(ab != ba, "pair {pair}: resolve_fork gave {ab:?} both ways");
        }
        if a.len() == b.len() && a != b {
            equal_heights += 1;
        }
        for c in [&a, &b] {
            ensure!(resolve_fork(c, &c.clone(), &rules) == ForkChoice::KeepLocal, "pair {pair}: self-swap");
        }
    }
    Ok(format!("50 pairs ({equal_heights} equal-height ties) antisymmetric and total"))
}

fn contract_timeout() -> Result<String, String> {
    let mut cfg = ScenarioConfig::new(9, 3);
    cfg.contract_timeout_ms = 100;
    cfg = cfg
        .at(1, Action::SubmitTx(TxRequest::call("alice", "counter", "increment")))
        .at(2, Action::SubmitTx(TxRequest::call("alice", "busy", "touch")));
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    sim.run().map_err(|e| e.to_string())?;
    let before: BTreeMap<String, String> = sim
        .miner_names()
        .iter()
        .map(|n| (n.clone(), serde_json::to_string(&sim.miner(n).unwrap().contract_states).unwrap()))
        .collect();
    let spin = sim.submit_transaction(&TxRequest::call("alice", "busy", "spin")).map_err(|e| e.to_string())?;
    ensure!(sim.settle(2000), "network did not settle after the spin transaction");
    for name in sim.miner_names() {
        let s = sim.miner(&name).unwrap();
        ensure!(s.chain.contains_tx(spin.tx_id()), "{name}: block with the spin tx not applied");
        let after = serde_json::to_string(&s.contract_states).unwrap();
        ensure!(after == before[&name], "{name}: state changed from {} to {after}", before[&name]);
        let outcome = s.receipts.get(spin.tx_id()).map(|r| r.outcome.clone());
        ensure!(outcome == Some(TxOutcome::Timeout), "{name}: spin outcome {outcome:?}");
    }
    Ok("spin timed out on every miner, state unchanged, block applied".into())
}

// Frozen from a digest utility run over the byte strings spelled out below.
const TX0_ID: &str = "042cc305e249a743cebbeb773b125636dce711077ec7cb3eacea0c79ac766ae7";
const GENESIS_HASH: &str = "a176af4bf63efcf9ac226efbd4d46efde18dd3a2e96e4ad980eec61ad07b816d";
const D8_NONCE: u64 = 144;
const D8_HASH: &str = "008af7072fad38447eb7fbe5f56f10b3bdd19af5667537b805578f3ad79a9c40";
const D12_NONCE: u64 = 12241;
const D12_HASH: &str = "0009b0f180e064bc6e74ec8c0937de1147d33e11d1b0152739267ca7256c6e04";

fn golden_hashes() -> Result<String, String> {
    let sha = |s: &str| hex::encode(Sha256::digest(s.as_bytes()));
    let tx0_bytes =
        r#"{"contract":"counter","nonce":0,"params":{"method":"increment"},"sender":"client1","timestamp":0}"#;
    ensure!(sha(tx0_bytes) == TX0_ID, "frozen tx id does not match its byte string");

    let tx0 = Transaction::new("client1", "counter", json!({"method": "increment"}), 0, 0).unwrap();
    ensure!(tx0.tx_id == TX0_ID, "tx_id {}", tx0.tx_id);
    let genesis = Block::genesis();
    ensure!(genesis.block_hash == GENESIS_HASH, "genesis {}", genesis.block_hash);
    ensure!(hash_block(&genesis).unwrap() == GENESIS_HASH, "hash_block(genesis) differs");
    for (difficulty, nonce, hash) in [(8, D8_NONCE, D8_HASH), (12, D12_NONCE, D12_HASH)] {
        let rules = ChainRules { difficulty, block_cap: 4 };
        let b = mine_block(&genesis, vec![tx0.clone()], &rules, "MinerA", 1).unwrap();
        ensure!(
            b.nonce == nonce && b.block_hash == hash,
            "difficulty {difficulty}: nonce {} hash {}",
            b.nonce,
            b.block_hash
        );
        let header = format!(
            r#"{{"difficulty":{difficulty},"index":1,"minerId":"MinerA","nonce":{nonce},"prevHash":"{GENESIS_HASH}","timestamp":1,"txIds":["{TX0_ID}"]}}"#
        );
        ensure!(sha(&header) == hash, "difficulty {difficulty}: frozen hash does not match its header bytes");
    }
    Ok("tx id, genesis, difficulty 8 and 12 blocks match".into())
}

fn determinism() -> Result<String, String> {
    let mut scenarios: Vec<ScenarioConfig> = (1..=3).map(counter_scenario).collect();
    let mut faulty = counter_scenario(11);
    faulty.events.insert(
        0,
        ScheduledAction {
            at_tick: 0,
            action: Action::DelayEdge { from: "miner-1".into(), to: "miner-2".into(), ticks: 7 },
        },
    );
    faulty =
        faulty.at(80, Action::CrashMiner { name: "miner-4".into() }).at(90, Action::JoinMiner { name: "late".into() });
    scenarios.push(faulty);
    let mut bytes = 0;
    for cfg in &scenarios {
        let a = Simulation::new(cfg.clone()).and_then(|mut s| s.run()).map_err(|e| e.to_string())?.to_canonical();
        let b = Simulation::new(cfg.clone()).and_then(|mut s| s.run()).map_err(|e| e.to_string())?.to_canonical();
        ensure!(a == b, "seed {}: reports differ", cfg.seed);
        bytes += a.len();
    }
    Ok(format!("{} scenario pairs byte-identical ({bytes} report bytes)", scenarios.len()))
}

fn replay_equivalence() -> Result<String, String> {
    let contracts = ContractRegistry::with_samples();
    let executing = id("observer");
    let mut checked = 0u64;
    let mut internal_checks = 0u64;
    for seed in 1..=20 {
        let cfg = counter_scenario(seed);
        let rules = ChainRules { difficulty: cfg.difficulty_bits, block_cap: cfg.block_cap };
        let mut sim = Simulation::with_replay_checks(cfg).map_err(|e| e.to_string())?;
        let mut lengths: BTreeMap<String, usize> = BTreeMap::new();
        let mut failure = None;
        sim.run_with(|s| {
            for name in s.miner_names() {
                let state = s.miner(&name).unwrap();
                if lengths.get(&name) == Some(&state.chain.len()) || failure.is_some() {
                    continue;
                }
                lengths.insert(name.clone(), state.chain.len());
                match replay_contract_states(
                    &state.chain,
                    &rules,
                    &contracts,
                    s.config().contract_timeout_ms,
                    &executing,
                ) {
                    Ok(replayed) if replayed == state.contract_states => checked += 1,
                    Ok(replayed) => {
                        failure = Some(format!(
                            "{name} at height {}: replay {replayed:?} != live {:?}",
                            state.chain.len(),
                            state.contract_states
                        ))
                    }
                    Err(e) => failure = Some(format!("{name}: chain invalid: {e:?}")),
                }
            }
        })
        .map_err(|e| e.to_string())?;
        if let Some(f) = failure {
            return Err(format!("seed {seed}: {f}"));
        }
        for name in sim.miner_names() {
            let (checks, mismatches) = sim.replay_stats(&name).unwrap();
            ensure!(mismatches == 0, "seed {seed}: {name} saw {mismatches} replay mismatches");
            internal_checks += checks;
        }
    }
    ensure!(checked > 0 && internal_checks > 0, "no blocks were checked");
    Ok(format!("{checked} observer checks and {internal_checks} in-miner checks, all equal"))
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("convergence", convergence),
        ("late-join recovery", late_join),
        ("self-delivery", self_delivery),
        ("no wait after block broadcast", no_wait_after_block_broadcast),
        ("tamper rejection", tamper_rejection),
        ("fork determinism", fork_determinism),
        ("contract timeout", contract_timeout),
        ("golden hashes", golden_hashes),
        ("determinism", determinism),
        ("replay equivalence", replay_equivalence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
