use super::*;
use proptest::prelude::*;
use serde_json::json;

// Frozen from a digest utility run over the byte strings spelled out in
// `oracle_*` below (python hashlib, cross-checked with sha256sum).
const TX0_ID: &str = "042cc305e249a743cebbeb773b125636dce711077ec7cb3eacea0c79ac766ae7";
const TX1_ID: &str = "a56ee3c52f60783991ea98d3230c0e541712512167770a6708b0223459a70b98";
const GENESIS_HASH: &str = "a176af4bf63efcf9ac226efbd4d46efde18dd3a2e96e4ad980eec61ad07b816d";
const MINED_D8_NONCE: u64 = 144;
const MINED_D8_HASH: &str = "008af7072fad38447eb7fbe5f56f10b3bdd19af5667537b805578f3ad79a9c40";
const MINED_D12_NONCE: u64 = 12241;
const MINED_D12_HASH: &str = "0009b0f180e064bc6e74ec8c0937de1147d33e11d1b0152739267ca7256c6e04";

fn oracle_sha(s: &str) -> String {
    hex::encode(sha2::Sha256::digest(s.as_bytes()))
}

fn oracle_header(difficulty: u32, nonce: u64, tx_id: &str) -> String {
    format!(
        r#"{{"difficulty":{difficulty},"index":1,"minerId":"MinerA","nonce":{nonce},"prevHash":"{GENESIS_HASH}","timestamp":1,"txIds":["{tx_id}"]}}"#
    )
}

fn oracle_leading_zero_bits(hex_digest: &str) -> u32 {
    let mut n = 0;
    for c in hex_digest.chars() {
        let v = c.to_digit(16).unwrap();
        if v == 0 {
            n += 4;
        } else {
            n += v.leading_zeros() - 28;
            break;
        }
    }
    n
}

/// Independent brute force: format the canonical header by hand and scan.
fn oracle_mine(difficulty: u32, tx_id: &str) -> (u64, String) {
    (0u64..)
        .map(|n| (n, oracle_sha(&oracle_header(difficulty, n, tx_id))))
        .find(|(_, h)| oracle_leading_zero_bits(h) >= difficulty)
        .unwrap()
}

fn counter_tx(nonce: u64) -> Transaction {
    Transaction::new("client1", "counter", json!({"method": "increment"}), nonce, 0).unwrap()
}

fn rules(difficulty: u32) -> ChainRules {
    ChainRules { difficulty, block_cap: 4 }
}

#[test]
fn oracle_reproduces_frozen_values() {
    let tx0 = r#"{"contract":"counter","nonce":0,"params":{"method":"increment"},"sender":"client1","timestamp":0}"#;
    assert_eq!(oracle_sha(tx0), TX0_ID);
    let genesis = format!(
        r#"{{"difficulty":0,"index":0,"minerId":"genesis","nonce":0,"prevHash":"{ZERO_HASH}","timestamp":0,"txIds":[]}}"#
    );
    assert_eq!(oracle_sha(&genesis), GENESIS_HASH);
    assert_eq!(oracle_mine(8, TX0_ID), (MINED_D8_NONCE, MINED_D8_HASH.to_string()));
}

#[test]
fn tx_id_golden() {
    assert_eq!(counter_tx(0).tx_id, TX0_ID);
    assert_eq!(counter_tx(1).tx_id, TX1_ID);
    assert_eq!(counter_tx(0).tx_id, counter_tx(0).tx_id);
    assert_ne!(TX0_ID, TX1_ID);
}

#[test]
fn tx_id_ignores_stored_id() {
    let mut tx = counter_tx(0);
    tx.tx_id = "bogus".into();
    assert_eq!(tx_id(&tx).unwrap(), TX0_ID);
    assert!(!tx.has_valid_id());
}

#[test]
fn tx_id_rejects_floats() {
    let err = Transaction::new("c", "", json!({"x": 0.5}), 0, 0).unwrap_err();
    assert!(matches!(err, CanonicalError::NonCanonicalValue { .. }));
}

#[test]
fn genesis_golden() {
    let g = Block::genesis();
    assert_eq!(g.block_hash, GENESIS_HASH);
    assert_eq!(g.prev_hash, ZERO_HASH);
    assert_eq!((g.index, g.nonce, g.difficulty, g.timestamp), (0, 0, 0, 0));
    assert!(g.transactions.is_empty());
}

#[test]
fn hash_changes_with_nonce_and_tx_order() {
    let a = counter_tx(0);
    let b = counter_tx(1);
    let mut block = mine_block(&Block::genesis(), vec![a.clone(), b.clone()], &rules(0), "m", 1).unwrap();
    let h = hash_block(&block).unwrap();
    block.nonce += 1;
    assert_ne!(hash_block(&block).unwrap(), h);
    block.nonce -= 1;
    block.transactions = vec![b, a];
    assert_ne!(hash_block(&block).unwrap(), h);
}

#[test]
fn mine_difficulty_zero_takes_nonce_zero() {
    let block = mine_block(&Block::genesis(), vec![counter_tx(0)], &rules(0), "MinerA", 1).unwrap();
    assert_eq!(block.nonce, 0);
}

#[test]
fn mine_golden_difficulty_8_and_12() {
    let block = mine_block(&Block::genesis(), vec![counter_tx(0)], &rules(8), "MinerA", 1).unwrap();
    assert_eq!((block.nonce, block.block_hash.as_str()), (MINED_D8_NONCE, MINED_D8_HASH));
    let block = mine_block(&Block::genesis(), vec![counter_tx(0)], &rules(12), "MinerA", 1).unwrap();
    assert_eq!((block.nonce, block.block_hash.as_str()), (MINED_D12_NONCE, MINED_D12_HASH));
}

#[test]
fn mine_rejects_bad_tx_counts() {
    let g = Block::genesis();
    assert_eq!(mine_block(&g, vec![], &rules(0), "m", 0), Err(MineError::EmptyTxList));
    let txs: Vec<_> = (0..5).map(counter_tx).collect();
    assert_eq!(mine_block(&g, txs, &rules(0), "m", 0), Err(MineError::TooManyTxs { count: 5, cap: 4 }));
}

#[test]
fn mine_can_be_cancelled() {
    let r = mine_block_interruptible(&Block::genesis(), vec![counter_tx(0)], &rules(40), "m", 0, 16, || true);
    assert_eq!(r, Err(MineError::Cancelled));
}

fn build_chain(len: usize, difficulty: u32) -> Chain {
    let mut chain = Chain::genesis();
    for i in 1..len as u64 {
        let tx = Transaction::new("client1", "counter", json!({"method": "increment"}), i, i).unwrap();
        let block = mine_block(chain.tip(), vec![tx], &rules(difficulty), "MinerA", i).unwrap();
        chain.blocks.push(block);
    }
    chain
}

#[test]
fn honest_block_validates() {
    let chain = build_chain(2, 4);
    assert_eq!(validate_block(&chain.blocks[1], &chain.blocks[0], &rules(4)), Ok(()));
}

#[test]
fn tampered_param_detected() {
    let chain = build_chain(2, 4);
    let mut block = chain.blocks[1].clone();
    block.transactions[0].params = json!({"method": "decrement"});
    let err = validate_block(&block, &chain.blocks[0], &rules(4)).unwrap_err();
    assert!(matches!(err, ValidationError::BadTxId | ValidationError::BadPow));
}

#[test]
fn grandparent_prev_hash_detected() {
    let chain = build_chain(3, 0);
    let mut block = chain.blocks[2].clone();
    block.prev_hash = chain.blocks[0].block_hash.clone();
    assert_eq!(validate_block(&block, &chain.blocks[1], &rules(0)), Err(ValidationError::BadPrevHash));
}

#[test]
fn block_level_rules() {
    let chain = build_chain(2, 0);
    let (g, b) = (&chain.blocks[0], &chain.blocks[1]);
    let mut x = b.clone();
    x.index = 5;
    assert_eq!(validate_block(&x, g, &rules(0)), Err(ValidationError::BadIndex));
    assert_eq!(validate_block(b, g, &rules(1)), Err(ValidationError::BadDifficulty));

    let mut dup = mine_block(g, vec![counter_tx(0), counter_tx(0)], &rules(0), "m", 1).unwrap();
    assert_eq!(validate_block(&dup, g, &rules(0)), Err(ValidationError::DuplicateTx));
    dup.transactions.clear();
    dup.block_hash = hash_block(&dup).unwrap();
    assert_eq!(validate_block(&dup, g, &rules(0)), Err(ValidationError::BadCount));

    let bad = Transaction::new("c", "counter", json!({}), 0, 0).unwrap();
    let b = mine_block(g, vec![bad], &rules(0), "m", 1).unwrap();
    assert_eq!(validate_block(&b, g, &rules(0)), Err(ValidationError::MalformedTx));
}

#[test]
fn chain_validation() {
    assert_eq!(validate_chain(&Chain::genesis(), &rules(8)), Ok(()));
    assert_eq!(validate_chain(&build_chain(5, 6), &rules(6)), Ok(()));
    let empty = Chain { blocks: vec![] };
    assert_eq!(validate_chain(&empty, &rules(0)).unwrap_err().error, ValidationError::BadGenesis);
}

#[test]
fn duplicate_tx_across_blocks_reports_later_index() {
    let mut chain = Chain::genesis();
    let dup = counter_tx(99);
    for i in 1..5u64 {
        let tx = if i == 2 || i == 4 { dup.clone() } else { counter_tx(i) };
        let b = mine_block(chain.tip(), vec![tx], &rules(0), "m", i).unwrap();
        chain.blocks.push(b);
    }
    assert_eq!(validate_chain(&chain, &rules(0)), Err(ChainError { error: ValidationError::DuplicateTx, index: 4 }));
}

#[test]
fn fork_rules() {
    let r = rules(0);
    let short = build_chain(3, 0);
    let long = build_chain(5, 0);
    assert_eq!(resolve_fork(&short, &long, &r), ForkChoice::AdoptRemote);
    assert_eq!(resolve_fork(&long, &short, &r), ForkChoice::KeepLocal);

    let mut broken = long.clone();
    broken.blocks[2].nonce += 1;
    assert_eq!(resolve_fork(&short, &broken, &r), ForkChoice::KeepLocal);

    let mut a = build_chain(2, 0);
    let mut b = a.clone();
    b.blocks[1] = mine_block(&a.blocks[0], vec![counter_tx(7)], &r, "other", 1).unwrap();
    if a.tip().block_hash > b.tip().block_hash {
        std::mem::swap(&mut a, &mut b);
    }
    // a now has the lower tip
    assert_eq!(resolve_fork(&b, &a, &r), ForkChoice::AdoptRemote);
    assert_eq!(resolve_fork(&a, &b, &r), ForkChoice::KeepLocal);
    assert_eq!(resolve_fork(&a, &a, &r), ForkChoice::KeepLocal);
}

fn arb_tx() -> impl Strategy<Value = Transaction> {
    ("[a-z]{1,6}", prop::option::of("[a-z]{1,6}"), any::<u32>(), any::<u16>()).prop_map(|(s, c, nonce, ts)| {
        let params = json!({"method": "m", "n": nonce});
        Transaction::new(s, c.unwrap_or_default(), params, nonce as u64, ts as u64).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mined_blocks_validate(txs in prop::collection::vec(arb_tx(), 1..=4), difficulty in 0u32..=12) {
        let mut txs = txs;
        txs.sort_by(|a, b| a.tx_id.cmp(&b.tx_id));
        txs.dedup_by(|a, b| a.tx_id == b.tx_id);
        let r = rules(difficulty);
        let block = mine_block(&Block::genesis(), txs, &r, "m", 1).unwrap();
        prop_assert_eq!(validate_block(&block, &Block::genesis(), &r), Ok(()));
    }

    #[test]
    fn mined_nonce_is_minimal(tx in arb_tx(), difficulty in 0u32..=12) {
        let r = rules(difficulty);
        let block = mine_block(&Block::genesis(), vec![tx], &r, "m", 1).unwrap();
        for n in 0..block.nonce {
            let mut b = block.clone();
            b.nonce = n;
            prop_assert!(!meets_difficulty(&hash_block(&b).unwrap(), difficulty));
        }
    }

    #[test]
    fn fork_choice_antisymmetric(la in 1usize..5, lb in 1usize..5, sa in any::<u8>(), sb in any::<u8>()) {
        let r = rules(0);
        let mk = |len: usize, salt: u8| {
            let mut c = Chain::genesis();
            for i in 1..len as u64 {
                let tx = Transaction::new("s", "", json!({"salt": salt}), i, 0).unwrap();
                let b = mine_block(c.tip(), vec![tx], &r, "m", i).unwrap();
                c.blocks.push(b);
            }
            c
        };
        let (a, b) = (mk(la, sa), mk(lb, sb));
        let ab = resolve_fork(&a, &b, &r);
        let ba = resolve_fork(&b, &a, &r);
        if a == b {
            prop_assert_eq!((ab, ba), (ForkChoice::KeepLocal, ForkChoice::KeepLocal));
        } else {
            prop_assert_ne!(ab, ba);
        }
    }
}
