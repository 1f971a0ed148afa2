//! Blockchain miners and smart contracts modelled as swarm choreographies
//! over an in-process adapter bus, with a seeded deterministic simulator.
//!
//! Layers, bottom up:
//!
//! * [`bus`]: adapter registry, group broadcast and unicast with
//!   per-adapter mailboxes.
//! * [`scheduler`]: logical-tick executors draining the bus.
//! * [`choreography`]: swarm descriptors and the engine that runs them.
//! * [`blockchain`]: canonical encoding, hashing, proof of work, validation.
//! * [`contracts`]: smart contracts as choreographies with miner-held state.
//! * [`miner`]: the miner adapter and its protocol handlers.
//! * [`harness`]: scenario runner, chain files and reports.

pub mod blockchain;
pub mod bus;
pub mod choreography;
pub mod contracts;
pub mod harness;
pub mod miner;
pub mod scheduler;
