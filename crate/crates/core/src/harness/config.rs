use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::blockchain::canonical::{self, CanonicalError};
use crate::blockchain::{DEFAULT_BLOCK_CAP, DEFAULT_DIFFICULTY};
use crate::contracts::DEFAULT_CONTRACT_TIMEOUT_MS;

pub const MAX_MINERS: usize = 64;
pub const MAX_DIFFICULTY: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid { path: path.into(), message: message.into() }
    }

    /// Dotted location of the offending field, `$` for the whole document.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { path, .. } => Some(path),
            ConfigError::Io(_) => None,
        }
    }
}

fn default_difficulty() -> u32 {
    DEFAULT_DIFFICULTY
}
fn default_block_cap() -> usize {
    DEFAULT_BLOCK_CAP
}
fn default_timeout() -> u64 {
    DEFAULT_CONTRACT_TIMEOUT_MS
}
fn default_nonces_per_tick() -> u64 {
    16
}
fn default_max_ticks() -> u64 {
    2000
}

/// A simulation run: initial network, consensus parameters and a timeline
/// of injected actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Initial miners, named `miner-1` … `miner-N`.
    pub miners: usize,
    #[serde(default = "default_difficulty")]
    pub difficulty_bits: u32,
    #[serde(default = "default_block_cap")]
    pub block_cap: usize,
    #[serde(default = "default_timeout")]
    pub contract_timeout_ms: u64,
    #[serde(default = "default_nonces_per_tick")]
    pub nonces_per_tick: u64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    #[serde(default)]
    pub events: Vec<ScheduledAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScheduledAction {
    pub at_tick: u64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Action {
    SubmitTx(TxRequest),
    #[serde(rename_all = "camelCase")]
    JoinMiner {
        name: String,
    },
    #[serde(rename_all = "camelCase")]
    CrashMiner {
        name: String,
    },
    #[serde(rename_all = "camelCase")]
    DelayEdge {
        from: String,
        to: String,
        ticks: u64,
    },
}

/// Client-side fields of a transaction. `method` is merged into `params`;
/// a missing nonce takes the sender's next counter value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TxRequest {
    pub sender: String,
    #[serde(default)]
    pub contract: String,
    #[serde(default)]
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonce: Option<u64>,
}

impl TxRequest {
    pub fn call(sender: &str, contract: &str, method: &str) -> Self {
        TxRequest { sender: sender.into(), contract: contract.into(), method: method.into(), params: None, nonce: None }
    }

    pub fn with_nonce(mut self, nonce: u64) -> Self {
        self.nonce = Some(nonce);
        self
    }

    /// `params` with `method` filled in when given.
    pub fn full_params(&self) -> Value {
        let mut params = self.params.clone().unwrap_or_default();
        if !self.method.is_empty() {
            params.insert("method".into(), Value::String(self.method.clone()));
        }
        Value::Object(params)
    }
}

pub fn miner_name(i: usize) -> String {
    format!("miner-{i}")
}

impl ScenarioConfig {
    /// `miners` miners and no events, other fields at their defaults.
    pub fn new(seed: u64, miners: usize) -> Self {
        ScenarioConfig {
            seed,
            miners,
            difficulty_bits: default_difficulty(),
            block_cap: default_block_cap(),
            contract_timeout_ms: default_timeout(),
            nonces_per_tick: default_nonces_per_tick(),
            max_ticks: default_max_ticks(),
            events: Vec::new(),
        }
    }

    pub fn at(mut self, tick: u64, action: Action) -> Self {
        self.events.push(ScheduledAction { at_tick: tick, action });
        self
    }

    pub fn initial_miners(&self) -> Vec<String> {
        (1..=self.miners).map(miner_name).collect()
    }

    /// Parses JSON text restricted to the ledger's value model (integers
    /// only), then checks it.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let value = canonical::decode(text.as_bytes()).map_err(|e| ConfigError::at("$", e.to_string()))?;
        canonical::check_canonical(&value).map_err(|e| match e {
            CanonicalError::NonCanonicalValue { path, reason } => {
                ConfigError::at(path.trim_start_matches('.').to_string(), reason)
            }
            other => ConfigError::at("$", other.to_string()),
        })?;
        let config: ScenarioConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "$".to_string() } else { path };
            ConfigError::at(path, e.inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_canonical(&self) -> String {
        canonical::to_canonical_string(self).expect("config holds integers and strings only")
    }

    /// Range checks, timeline order and miner name resolution.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.miners == 0 || self.miners > MAX_MINERS {
            return Err(ConfigError::at("miners", format!("must be between 1 and {MAX_MINERS}")));
        }
        if self.difficulty_bits > MAX_DIFFICULTY {
            return Err(ConfigError::at("difficultyBits", format!("must be at most {MAX_DIFFICULTY}")));
        }
        if self.block_cap == 0 {
            return Err(ConfigError::at("blockCap", "must be at least 1"));
        }
        if self.nonces_per_tick == 0 {
            return Err(ConfigError::at("noncesPerTick", "must be at least 1"));
        }
        if self.max_ticks == 0 {
            return Err(ConfigError::at("maxTicks", "must be at least 1"));
        }
        let mut known: BTreeSet<String> = self.initial_miners().into_iter().collect();
        let mut last = 0;
        for (i, ev) in self.events.iter().enumerate() {
            let path = |field: &str| format!("events[{i}].{field}");
            if ev.at_tick < last {
                return Err(ConfigError::at(path("atTick"), "events must be sorted by atTick"));
            }
            last = ev.at_tick;
            let resolve = |name: &str, field: &str| {
                if known.contains(name) {
                    Ok(())
                } else {
                    Err(ConfigError::at(path(field), format!("unknown miner {name}")))
                }
            };
            match &ev.action {
                Action::SubmitTx(tx) => {
                    if tx.sender.is_empty() {
                        return Err(ConfigError::at(path("action.submitTx.sender"), "must be non-empty"));
                    }
                    if !tx.contract.is_empty() && tx.method.is_empty() {
                        return Err(ConfigError::at(path("action.submitTx.method"), "contract calls need a method"));
                    }
                }
                Action::JoinMiner { name } => {
                    if name.is_empty() {
                        return Err(ConfigError::at(path("action.joinMiner.name"), "must be non-empty"));
                    }
                    if !known.insert(name.clone()) {
                        return Err(ConfigError::at(
                            path("action.joinMiner.name"),
                            format!("miner {name} already exists"),
                        ));
                    }
                }
                Action::CrashMiner { name } => resolve(name, "action.crashMiner.name")?,
                Action::DelayEdge { from, to, .. } => {
                    resolve(from, "action.delayEdge.from")?;
                    resolve(to, "action.delayEdge.to")?;
                }
            }
        }
        Ok(())
    }
}
