use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use crate::blockchain::{validate_chain, Block, Chain, ChainError, ChainRules, Transaction};
use crate::bus::AdapterId;
use crate::contracts::{ContractError, ContractInvocation, ContractRegistry, ContractResult};

/// Contract address to current state.
pub type ContractStates = BTreeMap<String, Value>;

/// How one on-chain transaction was applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Receipt {
    pub block: u64,
    pub outcome: TxOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "camelCase")]
pub enum TxOutcome {
    /// Plain data transaction; no contract ran.
    Data,
    Success,
    Error {
        message: String,
    },
    Timeout,
    UnknownContract,
}

impl TxOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            TxOutcome::Data => "data",
            TxOutcome::Success => "success",
            TxOutcome::Error { .. } => "error",
            TxOutcome::Timeout => "timeout",
            TxOutcome::UnknownContract => "unknownContract",
        }
    }
}

/// Effects of applying one block's transactions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockEffects {
    pub receipts: Vec<(String, Receipt)>,
    /// Child transactions emitted by contracts, in emission order.
    pub internal: Vec<Transaction>,
}

/// Runs the contract transactions of `block` in order against `states`.
/// `prefix` is the chain the block extends. Failed and timed-out calls leave
/// the state untouched.
pub fn apply_block_contracts(
    contracts: &ContractRegistry,
    prefix: &[Block],
    block: &Block,
    states: &mut ContractStates,
    timeout_ms: u64,
    executing: &AdapterId,
) -> BlockEffects {
    let mut effects = BlockEffects::default();
    for tx in &block.transactions {
        let outcome = if tx.contract.is_empty() {
            TxOutcome::Data
        } else {
            let state = states.get(&tx.contract).cloned().unwrap_or(Value::Null);
            let inv = ContractInvocation { transaction: tx, state: &state, chain: prefix };
            match contracts.invoke(&tx.contract, &inv, timeout_ms, executing) {
                Ok(ContractResult::Success { new_state, internal }) => {
                    states.insert(tx.contract.clone(), new_state);
                    effects.internal.extend(internal);
                    TxOutcome::Success
                }
                Ok(ContractResult::Error { message }) => TxOutcome::Error { message },
                Ok(ContractResult::Timeout) => TxOutcome::Timeout,
                Err(ContractError::UnknownContract(_)) => TxOutcome::UnknownContract,
                Err(e) => TxOutcome::Error { message: e.to_string() },
            }
        };
        effects.receipts.push((tx.tx_id.clone(), Receipt { block: block.index, outcome }));
    }
    effects
}

/// Full fold over a chain, assumed valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replay {
    pub states: ContractStates,
    pub receipts: BTreeMap<String, Receipt>,
    pub internal: Vec<Transaction>,
}

pub fn replay_chain(chain: &Chain, contracts: &ContractRegistry, timeout_ms: u64, executing: &AdapterId) -> Replay {
    let mut replay = Replay::default();
    for (i, block) in chain.blocks.iter().enumerate().skip(1) {
        let effects =
            apply_block_contracts(contracts, &chain.blocks[..i], block, &mut replay.states, timeout_ms, executing);
        replay.receipts.extend(effects.receipts);
        replay.internal.extend(effects.internal);
    }
    replay
}

/// Contract states determined by `chain`, after validating it.
pub fn replay_contract_states(
    chain: &Chain,
    rules: &ChainRules,
    contracts: &ContractRegistry,
    timeout_ms: u64,
    executing: &AdapterId,
) -> Result<ContractStates, ChainError> {
    validate_chain(chain, rules)?;
    Ok(replay_chain(chain, contracts, timeout_ms, executing).states)
}
