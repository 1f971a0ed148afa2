//! Smart contracts as choreographies.
//!
//! A contract is a choreography whose name is its address, whose variables
//! are exactly `state`, `method`, `params`, `chain` and `transaction`, with
//! a single constructor `ctor` that dispatches the phase named by the
//! transaction's `params.method`. Every phase is bound to `All` and runs on
//! the invoking miner, inline, under a simulated time budget.
//!
//! A phase returns `{"state": newState}`, optionally with `"internal": [tx…]`
//! listing child transactions for the applying miner's pending pool. Use
//! [`returns`] and [`returns_with`] to build that value.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::blockchain::{Block, Transaction};
use crate::bus::AdapterId;
use crate::choreography::{ChoreographyDescriptor, CtorFn, GroupBinding, Manifest, PhaseCtx, PhaseFn, SwarmError};

pub const CONTRACT_VARS: [&str; 5] = ["chain", "method", "params", "state", "transaction"];
pub const CONTRACT_CTOR: &str = "ctor";
pub const DEFAULT_CONTRACT_TIMEOUT_MS: u64 = 500;

pub const COUNTER_MANIFEST: &str = include_str!("../manifests/counter.json");
pub const BUSY_MANIFEST: &str = include_str!("../manifests/busy.json");

/// How long `busy.spin` runs when the transaction does not say.
pub const DEFAULT_SPIN_MS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("contract {0} is already registered")]
    DuplicateContract(String),
    #[error("malformed contract descriptor: {0}")]
    MalformedDescriptor(String),
    #[error("no contract at address {0}")]
    UnknownContract(String),
}

/// A validated contract choreography.
#[derive(Debug, Clone)]
pub struct ContractDescriptor {
    inner: ChoreographyDescriptor,
}

impl ContractDescriptor {
    pub fn new(inner: ChoreographyDescriptor) -> Result<Self, ContractError> {
        let malformed = |m: String| Err(ContractError::MalformedDescriptor(format!("{}: {m}", inner.name())));
        let vars: Vec<&str> = inner.vars().keys().map(String::as_str).collect();
        if vars != CONTRACT_VARS {
            return malformed(format!("vars must be exactly {CONTRACT_VARS:?}, found {vars:?}"));
        }
        let ctors: Vec<&str> = inner.ctor_names().collect();
        if ctors != [CONTRACT_CTOR] {
            return malformed(format!("expected the single constructor {CONTRACT_CTOR}, found {ctors:?}"));
        }
        if let Some((name, _)) = inner.phases().iter().find(|(_, p)| p.group != GroupBinding::All) {
            return malformed(format!("phase {name} must be bound to All"));
        }
        Ok(ContractDescriptor { inner })
    }

    /// Binds phase handlers to a contract manifest; the constructor is supplied.
    pub fn from_manifest(
        text: &str,
        phases: impl IntoIterator<Item = (&'static str, PhaseFn)>,
    ) -> Result<Self, ContractError> {
        let manifest =
            Manifest::parse(text.as_bytes()).map_err(|e| ContractError::MalformedDescriptor(e.to_string()))?;
        let inner = manifest
            .bind([(CONTRACT_CTOR, contract_ctor())], phases)
            .map_err(|e| ContractError::MalformedDescriptor(e.to_string()))?;
        ContractDescriptor::new(inner)
    }

    /// Builds a contract from phase handlers alone.
    pub fn from_phases(
        address: &str,
        phases: impl IntoIterator<Item = (&'static str, PhaseFn)>,
    ) -> Result<Self, ContractError> {
        let mut b = ChoreographyDescriptor::builder(address);
        for var in CONTRACT_VARS {
            b = b.var(var, Value::Null);
        }
        let ctor = contract_ctor();
        b = b.ctor(CONTRACT_CTOR, move |ctx, args| ctor(ctx, args));
        for (name, handler) in phases {
            b = b.phase(name, "All", move |ctx| handler(ctx));
        }
        ContractDescriptor::new(b.build().map_err(|e| ContractError::MalformedDescriptor(e.to_string()))?)
    }

    pub fn address(&self) -> &str {
        self.inner.name()
    }

    pub fn methods(&self) -> impl Iterator<Item = &str> {
        self.inner.phases().keys().map(String::as_str)
    }

    pub fn descriptor(&self) -> &ChoreographyDescriptor {
        &self.inner
    }
}

/// The shared constructor: `ctor(transaction, state, chain)`.
fn contract_ctor() -> CtorFn {
    Arc::new(|ctx, args| {
        let tx = args.first().cloned().unwrap_or(Value::Null);
        let params = tx.get("params").cloned().unwrap_or(Value::Null);
        let method = params
            .get("method")
            .and_then(Value::as_str)
            .filter(|m| !m.is_empty())
            .ok_or_else(|| SwarmError::handler("transaction names no method"))?
            .to_string();
        ctx.set_var("transaction", tx)?;
        ctx.set_var("state", args.get(1).cloned().unwrap_or(Value::Null))?;
        ctx.set_var("chain", args.get(2).cloned().unwrap_or(Value::Null))?;
        ctx.set_var("params", params)?;
        ctx.set_var("method", json!(method))?;
        ctx.swarm(&method).map(drop)
    })
}

/// Phase return value carrying only a new state.
pub fn returns(state: Value) -> Value {
    json!({ "state": state })
}

/// Phase return value with child transactions.
pub fn returns_with(state: Value, internal: &[Transaction]) -> Value {
    json!({ "state": state, "internal": internal })
}

/// Wraps a pure `(state, params) -> state` function as a phase handler.
pub fn state_phase<F>(f: F) -> PhaseFn
where
    F: Fn(&Value, &Value) -> Result<Value, String> + Send + Sync + 'static,
{
    Arc::new(move |ctx: &mut PhaseCtx<'_>| {
        f(ctx.var("state"), ctx.var("params")).map(returns).map_err(SwarmError::Handler)
    })
}

pub struct ContractInvocation<'a> {
    pub transaction: &'a Transaction,
    pub state: &'a Value,
    /// Blocks preceding the one that carries the transaction.
    pub chain: &'a [Block],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "camelCase")]
pub enum ContractResult {
    Success {
        #[serde(rename = "newState")]
        new_state: Value,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        internal: Vec<Transaction>,
    },
    Error {
        message: String,
    },
    Timeout,
}

impl ContractResult {
    pub fn label(&self) -> &'static str {
        match self {
            ContractResult::Success { .. } => "success",
            ContractResult::Error { .. } => "error",
            ContractResult::Timeout => "timeout",
        }
    }

    pub fn new_state(&self) -> Option<&Value> {
        match self {
            ContractResult::Success { new_state, .. } => Some(new_state),
            _ => None,
        }
    }

    fn error(message: impl Into<String>) -> Self {
        ContractResult::Error { message: message.into() }
    }
}

/// Contracts addressable by name.
#[derive(Default)]
pub struct ContractRegistry {
    contracts: RwLock<BTreeMap<String, Arc<ContractDescriptor>>>,
    invocations: AtomicU64,
}

impl ContractRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding `counter` and `busy`.
    pub fn with_samples() -> Self {
        let r = Self::new();
        r.register_contract(sample_counter_contract()).expect("fresh registry");
        r.register_contract(sample_busy_contract()).expect("fresh registry");
        r
    }

    pub fn register_contract(&self, descriptor: ContractDescriptor) -> Result<(), ContractError> {
        let mut contracts = self.contracts.write();
        let address = descriptor.address().to_string();
        if contracts.contains_key(&address) {
            return Err(ContractError::DuplicateContract(address));
        }
        contracts.insert(address, Arc::new(descriptor));
        Ok(())
    }

    pub fn get(&self, address: &str) -> Option<Arc<ContractDescriptor>> {
        self.contracts.read().get(address).cloned()
    }

    pub fn addresses(&self) -> Vec<String> {
        self.contracts.read().keys().cloned().collect()
    }

    /// Total invocations served since creation.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    /// Runs the contract at `address` on `executing` with `timeout_ms` of
    /// simulated time.
    pub fn invoke(
        &self,
        address: &str,
        inv: &ContractInvocation<'_>,
        timeout_ms: u64,
        executing: &AdapterId,
    ) -> Result<ContractResult, ContractError> {
        let contract = self.get(address).ok_or_else(|| ContractError::UnknownContract(address.to_string()))?;
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let chain = serde_json::to_value(inv.chain).expect("blocks serialize");
        let args = [inv.transaction.to_value(), inv.state.clone(), chain];
        let run = contract.inner.run_local(CONTRACT_CTOR, &args, executing, Some(timeout_ms));
        Ok(match run {
            Ok(run) => match run.result.into_values().next() {
                Some(value) => parse_return(value),
                None => ContractResult::error("phase returned no result"),
            },
            Err(SwarmError::Interrupted) => ContractResult::Timeout,
            Err(SwarmError::UnknownPhase { phase, .. }) => ContractResult::error(format!("unknown method {phase}")),
            Err(e) => ContractResult::error(e.to_string()),
        })
    }
}

fn parse_return(value: Value) -> ContractResult {
    let Value::Object(mut map) = value else {
        return ContractResult::error("phase must return an object with a state");
    };
    if let Some(Value::String(msg)) = map.get("error") {
        return ContractResult::error(msg.clone());
    }
    let Some(new_state) = map.remove("state") else {
        return ContractResult::error("phase result has no state");
    };
    let internal = match map.remove("internal") {
        None | Some(Value::Null) => Vec::new(),
        Some(list) => match serde_json::from_value(list) {
            Ok(txs) => txs,
            Err(e) => return ContractResult::error(format!("bad internal transactions: {e}")),
        },
    };
    ContractResult::Success { new_state, internal }
}

fn count_of(state: &Value) -> Result<u64, String> {
    match state {
        Value::Null => Ok(0),
        s => s.get("count").and_then(Value::as_u64).ok_or_else(|| format!("counter state {s} has no count")),
    }
}

/// `counter`: `increment` adds one (null counts as zero), `get` returns the
/// state unchanged, normalising null to `{count: 0}`.
pub fn sample_counter_contract() -> ContractDescriptor {
    ContractDescriptor::from_manifest(
        COUNTER_MANIFEST,
        [
            ("increment", state_phase(|state, _| Ok(json!({ "count": count_of(state)? + 1 })))),
            ("get", state_phase(|state, _| Ok(json!({ "count": count_of(state)? })))),
        ],
    )
    .expect("bundled contract is well formed")
}

/// `busy`: `spin` burns `params.ms` simulated milliseconds (default
/// [`DEFAULT_SPIN_MS`]) and leaves the state alone; `touch` counts calls.
pub fn sample_busy_contract() -> ContractDescriptor {
    let spin: PhaseFn = Arc::new(|ctx| {
        let ms = ctx.var("params").get("ms").and_then(Value::as_u64).unwrap_or(DEFAULT_SPIN_MS);
        for _ in 0..ms {
            ctx.spend(1)?;
        }
        Ok(returns(ctx.var("state").clone()))
    });
    ContractDescriptor::from_manifest(
        BUSY_MANIFEST,
        [
            ("spin", spin),
            (
                "touch",
                state_phase(|state, _| {
                    let n = state.get("touches").and_then(Value::as_u64).unwrap_or(0);
                    Ok(json!({ "touches": n + 1 }))
                }),
            ),
        ],
    )
    .expect("bundled contract is well formed")
}
