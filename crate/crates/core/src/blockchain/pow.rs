use serde_json::json;
use sha2::{Digest, Sha256};

use super::canonical::{canonical_encode, CanonicalError};
use super::{Block, ChainRules, MineError, Transaction};

/// True iff the leading `difficulty` bits of the hex digest are zero.
/// Malformed hex never satisfies a target.
pub fn meets_difficulty(hash: &str, difficulty: u32) -> bool {
    let Ok(bytes) = hex::decode(hash) else {
        return false;
    };
    leading_zero_bits(&bytes) >= difficulty as u64
}

fn leading_zero_bits(bytes: &[u8]) -> u64 {
    let mut count = 0u64;
    for b in bytes {
        if *b == 0 {
            count += 8;
        } else {
            count += b.leading_zeros() as u64;
            break;
        }
    }
    count
}

/// Resumable ascending nonce search for one candidate block.
///
/// The canonical header is split around the nonce so each attempt only
/// hashes the suffix; `difficulty`, `index` and `minerId` sort before
/// `nonce`, everything else after it.
#[derive(Clone)]
pub struct PowSearch {
    template: Block,
    prefix_state: Sha256,
    suffix: Vec<u8>,
    next_nonce: u64,
}

impl PowSearch {
    pub fn new(
        prev: &Block,
        txs: Vec<Transaction>,
        rules: &ChainRules,
        miner_id: &str,
        timestamp: u64,
    ) -> Result<Self, MineError> {
        if txs.is_empty() {
            return Err(MineError::EmptyTxList);
        }
        if txs.len() > rules.block_cap {
            return Err(MineError::TooManyTxs { count: txs.len(), cap: rules.block_cap });
        }
        let template = Block {
            index: prev.index + 1,
            prev_hash: prev.block_hash.clone(),
            timestamp,
            miner_id: miner_id.to_string(),
            difficulty: rules.difficulty,
            nonce: 0,
            transactions: txs,
            block_hash: String::new(),
        };
        let (prefix, suffix) = split_header(&template)?;
        let mut prefix_state = Sha256::new();
        prefix_state.update(&prefix);
        Ok(PowSearch { template, prefix_state, suffix, next_nonce: 0 })
    }

    pub fn next_nonce(&self) -> u64 {
        self.next_nonce
    }

    pub fn template(&self) -> &Block {
        &self.template
    }

    /// Tries up to `budget` further nonces.
    pub fn step(&mut self, budget: u64) -> Option<Block> {
        let end = self.next_nonce.saturating_add(budget);
        while self.next_nonce < end {
            let nonce = self.next_nonce;
            self.next_nonce += 1;
            let mut h = self.prefix_state.clone();
            h.update(nonce.to_string().as_bytes());
            h.update(&self.suffix);
            let digest = h.finalize();
            if leading_zero_bits(&digest) >= self.template.difficulty as u64 {
                let mut block = self.template.clone();
                block.nonce = nonce;
                block.block_hash = hex::encode(digest);
                return Some(block);
            }
        }
        None
    }
}

fn split_header(block: &Block) -> Result<(Vec<u8>, Vec<u8>), CanonicalError> {
    let head = json!({
        "difficulty": block.difficulty,
        "index": block.index,
        "minerId": block.miner_id,
    });
    let tail = json!({
        "prevHash": block.prev_hash,
        "timestamp": block.timestamp,
        "txIds": block.transactions.iter().map(|t| t.tx_id.as_str()).collect::<Vec<_>>(),
    });
    let mut prefix = canonical_encode(&head)?;
    prefix.pop(); // '}'
    prefix.extend_from_slice(b",\"nonce\":");
    let tail = canonical_encode(&tail)?;
    let mut suffix = Vec::with_capacity(tail.len());
    suffix.push(b',');
    suffix.extend_from_slice(&tail[1..]);
    Ok((prefix, suffix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockchain::hash_block;

    #[test]
    fn difficulty_zero_always_passes() {
        assert!(meets_difficulty(&"f".repeat(64), 0));
    }

    #[test]
    fn bit_granularity() {
        let h = format!("00ab{}", "0".repeat(60));
        assert!(meets_difficulty(&h, 8));
        assert!(!meets_difficulty(&h, 9));
        assert!(meets_difficulty(&format!("7f{}", "0".repeat(62)), 1));
        assert!(!meets_difficulty(&format!("80{}", "0".repeat(62)), 1));
    }

    #[test]
    fn all_zero_hash_caps_at_256() {
        let h = "0".repeat(64);
        assert!(meets_difficulty(&h, 256));
        assert!(!meets_difficulty(&h, 257));
    }

    #[test]
    fn malformed_hex_fails() {
        assert!(!meets_difficulty("zz", 0));
    }

    #[test]
    fn spliced_header_matches_full_encoding() {
        let tx = Transaction::new("c", "", json!({"k": "v\"x"}), 3, 9).unwrap();
        let rules = ChainRules { difficulty: 0, block_cap: 4 };
        let mut search = PowSearch::new(&Block::genesis(), vec![tx], &rules, "miner \"q\"", 5).unwrap();
        let block = search.step(1).unwrap();
        assert_eq!(block.block_hash, hash_block(&block).unwrap());
        for n in [7u64, 1_000_000, u64::MAX - 1] {
            let mut b = block.clone();
            b.nonce = n;
            let mut s = search.clone();
            s.next_nonce = n;
            let mut h = s.prefix_state.clone();
            h.update(n.to_string().as_bytes());
            h.update(&s.suffix);
            assert_eq!(hex::encode(h.finalize()), hash_block(&b).unwrap());
        }
    }
}
