//! Ledger primitives: transactions, blocks, proof of work, validation and
//! fork choice. Everything here is a pure function over its inputs.

pub mod canonical;
mod pow;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use canonical::{canonical_encode, CanonicalError};
pub use pow::{meets_difficulty, PowSearch};

/// Previous-hash value carried by the genesis block.
pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";
pub const GENESIS_MINER: &str = "genesis";
pub const DEFAULT_DIFFICULTY: u32 = 8;
pub const DEFAULT_BLOCK_CAP: usize = 4;

/// Consensus parameters fixed for one network run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainRules {
    /// Required leading zero bits of every non-genesis block hash.
    pub difficulty: u32,
    /// Maximum transactions per block.
    pub block_cap: usize,
}

impl Default for ChainRules {
    fn default() -> Self {
        ChainRules { difficulty: DEFAULT_DIFFICULTY, block_cap: DEFAULT_BLOCK_CAP }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Transaction {
    pub tx_id: String,
    pub sender: String,
    /// Target contract address; empty for a plain data transaction.
    pub contract: String,
    pub params: Value,
    pub nonce: u64,
    pub timestamp: u64,
}

impl Transaction {
    /// Builds a transaction and derives its id.
    pub fn new(
        sender: impl Into<String>,
        contract: impl Into<String>,
        params: Value,
        nonce: u64,
        timestamp: u64,
    ) -> Result<Self, CanonicalError> {
        let mut tx = Transaction {
            tx_id: String::new(),
            sender: sender.into(),
            contract: contract.into(),
            params,
            nonce,
            timestamp,
        };
        tx.tx_id = tx_id(&tx)?;
        Ok(tx)
    }

    /// `params.method` when it is a string.
    pub fn method(&self) -> Option<&str> {
        self.params.get("method").and_then(Value::as_str)
    }

    /// Contract transactions must name a non-empty method.
    pub fn is_well_formed(&self) -> bool {
        self.contract.is_empty() || self.method().is_some_and(|m| !m.is_empty())
    }

    pub fn has_valid_id(&self) -> bool {
        tx_id(self).is_ok_and(|id| id == self.tx_id)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("transaction serializes")
    }
}

/// Digest over `{sender, contract, params, nonce, timestamp}`; the stored
/// `tx_id` field is ignored.
pub fn tx_id(tx: &Transaction) -> Result<String, CanonicalError> {
    let body = json!({
        "sender": tx.sender,
        "contract": tx.contract,
        "params": tx.params,
        "nonce": tx.nonce,
        "timestamp": tx.timestamp,
    });
    Ok(sha256_hex(&canonical_encode(&body)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Block {
    pub index: u64,
    pub prev_hash: String,
    pub timestamp: u64,
    pub miner_id: String,
    pub difficulty: u32,
    pub nonce: u64,
    pub transactions: Vec<Transaction>,
    pub block_hash: String,
}

impl Block {
    pub fn genesis() -> Block {
        let mut block = Block {
            index: 0,
            prev_hash: ZERO_HASH.to_string(),
            timestamp: 0,
            miner_id: GENESIS_MINER.to_string(),
            difficulty: 0,
            nonce: 0,
            transactions: Vec::new(),
            block_hash: String::new(),
        };
        block.block_hash = hash_block(&block).expect("genesis header is canonical");
        block
    }

    pub fn header_value(&self) -> Value {
        json!({
            "index": self.index,
            "prevHash": self.prev_hash,
            "timestamp": self.timestamp,
            "minerId": self.miner_id,
            "difficulty": self.difficulty,
            "nonce": self.nonce,
            "txIds": self.transactions.iter().map(|t| t.tx_id.as_str()).collect::<Vec<_>>(),
        })
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("block serializes")
    }
}

/// Digest over the header and the ordered transaction ids; the stored
/// `block_hash` field is ignored.
pub fn hash_block(block: &Block) -> Result<String, CanonicalError> {
    Ok(sha256_hex(&canonical_encode(&block.header_value())?))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MineError {
    #[error("a block needs at least one transaction")]
    EmptyTxList,
    #[error("{count} transactions exceed the block cap of {cap}")]
    TooManyTxs { count: usize, cap: usize },
    #[error("mining cancelled")]
    Cancelled,
    #[error(transparent)]
    Encoding(#[from] CanonicalError),
}

/// Mines the next block on top of `prev`, returning the block with the
/// smallest nonce that satisfies `rules.difficulty`.
pub fn mine_block(
    prev: &Block,
    txs: Vec<Transaction>,
    rules: &ChainRules,
    miner_id: &str,
    timestamp: u64,
) -> Result<Block, MineError> {
    mine_block_interruptible(prev, txs, rules, miner_id, timestamp, 1024, || false)
}

/// Like [`mine_block`], consulting `cancelled` every `check_every` nonces.
pub fn mine_block_interruptible(
    prev: &Block,
    txs: Vec<Transaction>,
    rules: &ChainRules,
    miner_id: &str,
    timestamp: u64,
    check_every: u64,
    mut cancelled: impl FnMut() -> bool,
) -> Result<Block, MineError> {
    let mut search = PowSearch::new(prev, txs, rules, miner_id, timestamp)?;
    loop {
        if let Some(block) = search.step(check_every.max(1)) {
            return Ok(block);
        }
        if cancelled() {
            return Err(MineError::Cancelled);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Error)]
pub enum ValidationError {
    #[error("genesis block does not match the fixed constant")]
    BadGenesis,
    #[error("block index does not follow its parent")]
    BadIndex,
    #[error("previous hash does not match the parent block")]
    BadPrevHash,
    #[error("block difficulty differs from the network difficulty")]
    BadDifficulty,
    #[error("block hash does not recompute or misses the difficulty target")]
    BadPow,
    #[error("transaction count outside 1..=cap")]
    BadCount,
    #[error("transaction id does not recompute")]
    BadTxId,
    #[error("contract transaction without a method")]
    MalformedTx,
    #[error("transaction appears more than once")]
    DuplicateTx,
}

/// Checks `block` as the direct successor of `prev`. Returns the first rule
/// that fails.
pub fn validate_block(block: &Block, prev: &Block, rules: &ChainRules) -> Result<(), ValidationError> {
    if block.index != prev.index + 1 {
        return Err(ValidationError::BadIndex);
    }
    if block.prev_hash != prev.block_hash {
        return Err(ValidationError::BadPrevHash);
    }
    if block.difficulty != rules.difficulty {
        return Err(ValidationError::BadDifficulty);
    }
    match hash_block(block) {
        Ok(h) if h == block.block_hash && meets_difficulty(&h, block.difficulty) => {}
        _ => return Err(ValidationError::BadPow),
    }
    if block.transactions.is_empty() || block.transactions.len() > rules.block_cap {
        return Err(ValidationError::BadCount);
    }
    let mut seen = BTreeSet::new();
    for tx in &block.transactions {
        if !tx.has_valid_id() {
            return Err(ValidationError::BadTxId);
        }
        if !tx.is_well_formed() {
            return Err(ValidationError::MalformedTx);
        }
        if !seen.insert(tx.tx_id.as_str()) {
            return Err(ValidationError::DuplicateTx);
        }
    }
    Ok(())
}

/// A validation failure located at a block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{error} (block {index})")]
pub struct ChainError {
    pub error: ValidationError,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Chain {
    pub blocks: Vec<Block>,
}

impl Default for Chain {
    fn default() -> Self {
        Chain::genesis()
    }
}

impl Chain {
    pub fn genesis() -> Chain {
        Chain { blocks: vec![Block::genesis()] }
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tx_ids(&self) -> BTreeSet<String> {
        self.transactions().map(|t| t.tx_id.clone()).collect()
    }

    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.blocks.iter().flat_map(|b| b.transactions.iter())
    }

    pub fn contains_tx(&self, tx_id: &str) -> bool {
        self.transactions().any(|t| t.tx_id == tx_id)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("chain serializes")
    }
}

impl fmt::Display for Chain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "chain(len={}, tip={})", self.len(), &self.tip().block_hash[..12.min(self.tip().block_hash.len())])
    }
}

/// Validates the whole chain: fixed genesis, pairwise block rules and no
/// transaction id repeated across blocks.
pub fn validate_chain(chain: &Chain, rules: &ChainRules) -> Result<(), ChainError> {
    let Some(first) = chain.blocks.first() else {
        return Err(ChainError { error: ValidationError::BadGenesis, index: 0 });
    };
    if *first != Block::genesis() {
        return Err(ChainError { error: ValidationError::BadGenesis, index: 0 });
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for (i, pair) in chain.blocks.windows(2).enumerate() {
        let (prev, block) = (&pair[0], &pair[1]);
        // position, not the block's own (possibly forged) index field
        let at = |error| ChainError { error, index: i as u64 + 1 };
        validate_block(block, prev, rules).map_err(at)?;
        for tx in &block.transactions {
            if !seen.insert(tx.tx_id.as_str()) {
                return Err(at(ValidationError::DuplicateTx));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForkChoice {
    KeepLocal,
    AdoptRemote,
}

/// Longest valid chain wins; equal lengths break toward the bytewise lower
/// tip hash.
pub fn resolve_fork(local: &Chain, remote: &Chain, rules: &ChainRules) -> ForkChoice {
    if validate_chain(remote, rules).is_err() {
        return ForkChoice::KeepLocal;
    }
    let longer = remote.len() > local.len();
    let tie_lower =
        remote.len() == local.len() && remote.tip().block_hash.as_bytes() < local.tip().block_hash.as_bytes();
    if longer || tie_lower {
        ForkChoice::AdoptRemote
    } else {
        ForkChoice::KeepLocal
    }
}

#[cfg(test)]
mod tests;
