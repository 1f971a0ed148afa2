//! Chain dumps: one canonical-JSON block per line, genesis first.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::blockchain::canonical;
use crate::blockchain::{validate_chain, Block, Chain, ChainRules, ValidationError};

/// Line numbers start at 1 and equal the block's position plus one.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainFileError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {error}")]
    Validation { line: usize, error: ValidationError },
}

pub fn encode_chain(chain: &Chain) -> String {
    let mut out = String::new();
    for block in &chain.blocks {
        out.push_str(&canonical::to_canonical_string(block).expect("blocks are canonical"));
        out.push('\n');
    }
    out
}

pub fn write_chain_file(chain: &Chain, path: &Path) -> Result<(), ChainFileError> {
    fs::write(path, encode_chain(chain)).map_err(|e| ChainFileError::Io(format!("{}: {e}", path.display())))
}

/// Parses a dump without validating it. Every line must be the exact
/// canonical encoding of a block.
pub fn parse_chain(text: &str) -> Result<Chain, ChainFileError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Err(ChainFileError::Parse { line: 1, message: "missing genesis block".into() });
    }
    let mut blocks = Vec::new();
    for (i, line) in body.split('\n').enumerate() {
        let parse_err = |message: String| ChainFileError::Parse { line: i + 1, message };
        let value = canonical::decode_strict(line.as_bytes()).map_err(|e| parse_err(e.to_string()))?;
        let block: Block = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        blocks.push(block);
    }
    Ok(Chain { blocks })
}

pub fn read_chain_file(path: &Path) -> Result<Chain, ChainFileError> {
    let text = fs::read_to_string(path).map_err(|e| ChainFileError::Io(format!("{}: {e}", path.display())))?;
    parse_chain(&text)
}

/// Reads and validates a dump.
pub fn verify_chain_file(path: &Path, rules: &ChainRules) -> Result<Chain, ChainFileError> {
    let chain = read_chain_file(path)?;
    validate_chain(&chain, rules)
        .map_err(|e| ChainFileError::Validation { line: e.index as usize + 1, error: e.error })?;
    Ok(chain)
}
