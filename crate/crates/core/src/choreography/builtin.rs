//! Choreographies shipped with the crate, each declared by a manifest under
//! `manifests/` and bound to native handlers here.

use std::sync::Arc;

use serde_json::{json, Value};

use super::{Adapter, AdapterCtx, ChoreographyDescriptor, CtorFn, DispatchMode, Manifest, PhaseFn, SwarmError};
use crate::bus::AdapterId;

pub const PINGPONG_MANIFEST: &str = include_str!("../../manifests/pingpong.json");
pub const INTERNAL_MANIFEST: &str = include_str!("../../manifests/internal.json");
pub const ADD_TRANSACTION_MANIFEST: &str = include_str!("../../manifests/add_transaction.json");

pub const PINGPONG: &str = "pingpong";
pub const INTERNAL: &str = "internal";
pub const ADD_TRANSACTION: &str = "addTransaction";

/// Group the ping-pong phases run on.
pub const PINGPONG_GROUP: &str = "adapters";

/// Phases of the internal choreography whose results the emitter never
/// awaits. A mined block is pushed to the network and forgotten.
const FIRE_AND_FORGET: &[&str] = &["addBlock"];

fn ctor<F>(f: F) -> CtorFn
where
    F: Fn(&mut super::CtorCtx<'_>, &[Value]) -> Result<(), SwarmError> + Send + Sync + 'static,
{
    Arc::new(f)
}

fn phase<F>(f: F) -> PhaseFn
where
    F: Fn(&mut super::PhaseCtx<'_>) -> Result<Value, SwarmError> + Send + Sync + 'static,
{
    Arc::new(f)
}

fn arg_str<'v>(args: &'v [Value], i: usize, what: &str) -> Result<&'v str, SwarmError> {
    args.get(i)
        .and_then(Value::as_str)
        .ok_or_else(|| SwarmError::handler(format!("argument {i} ({what}) must be a string")))
}

fn arg_adapter(args: &[Value], i: usize, what: &str) -> Result<AdapterId, SwarmError> {
    AdapterId::new(arg_str(args, i, what)?).map_err(SwarmError::from)
}

/// Broadcast and direct ping-pong. `startBroadcast(caller)` runs
/// `pingBroadcast` on every adapter of the group, the caller included;
/// `startDirect(caller, target)` runs `pingDirect` on `target` only. Each
/// execution answers "pong" into the swarm result.
pub fn pingpong() -> ChoreographyDescriptor {
    let manifest = Manifest::parse(PINGPONG_MANIFEST.as_bytes()).expect("bundled manifest parses");
    manifest
        .bind(
            [
                (
                    "startBroadcast",
                    ctor(|ctx, args| {
                        ctx.set_var("caller", args.first().cloned().unwrap_or(Value::Null))?;
                        ctx.swarm("pingBroadcast").map(drop)
                    }),
                ),
                (
                    "startDirect",
                    ctor(|ctx, args| {
                        ctx.set_var("caller", args.first().cloned().unwrap_or(Value::Null))?;
                        let target = arg_adapter(args, 1, "target")?;
                        ctx.set_var("target", Value::String(target.to_string()))?;
                        ctx.swarm_direct("pingDirect", &target).map(drop)
                    }),
                ),
            ],
            [("pingBroadcast", phase(|_| Ok(json!("pong")))), ("pingDirect", phase(|_| Ok(json!("pong"))))],
        )
        .expect("bundled manifest binds")
}

/// The miners' internal communication swarm.
///
/// * `ctor("broadcast", sender, phase, params)` runs `phase` on every miner.
///   For `announce` it also emits `announce_success` carrying the number of
///   miners the phase was dispatched to.
/// * `ctor("direct", target, sender, phase[, params])` runs `phase` on one miner.
///
/// Each phase forwards to the adapter method of the same name. `update`
/// additionally emits `update_success` with the returned payload.
pub fn internal() -> ChoreographyDescriptor {
    let manifest = Manifest::parse(INTERNAL_MANIFEST.as_bytes()).expect("bundled manifest parses");
    let internal_ctor = ctor(|ctx, args| {
        let mode = arg_str(args, 0, "mode")?;
        ctx.set_var("mode", json!(mode))?;
        match mode {
            "broadcast" => {
                let sender = arg_str(args, 1, "sender")?;
                let phase = arg_str(args, 2, "phase")?;
                ctx.set_var("sender", json!(sender))?;
                ctx.set_var("phase", json!(phase))?;
                ctx.set_var("params", args.get(3).cloned().unwrap_or(Value::Null))?;
                let collect = !FIRE_AND_FORGET.contains(&phase);
                let count = ctx.dispatch(phase, DispatchMode::Broadcast, collect)?;
                if phase == "announce" {
                    ctx.emit("announce_success", json!(count))?;
                }
                Ok(())
            }
            "direct" => {
                let target = arg_adapter(args, 1, "target")?;
                let sender = arg_str(args, 2, "sender")?;
                let phase = arg_str(args, 3, "phase")?;
                ctx.set_var("target", json!(target.as_str()))?;
                ctx.set_var("sender", json!(sender))?;
                ctx.set_var("phase", json!(phase))?;
                ctx.set_var("params", args.get(4).cloned().unwrap_or(Value::Null))?;
                ctx.swarm_direct(phase, &target).map(drop)
            }
            other => Err(SwarmError::handler(format!("unknown dispatch mode {other}"))),
        }
    });
    manifest
        .bind(
            [("ctor", internal_ctor)],
            [
                (
                    "announce",
                    phase(|ctx| {
                        let chain = ctx.var("params").get("chain").cloned().unwrap_or(Value::Null);
                        let args = json!({ "sender": ctx.var("sender"), "chain": chain });
                        ctx.call("announce", args)
                    }),
                ),
                (
                    "addBlock",
                    phase(|ctx| {
                        let args = json!({ "sender": ctx.var("sender"), "block": ctx.var("params") });
                        ctx.call("addBlock", args)
                    }),
                ),
                (
                    "update",
                    phase(|ctx| {
                        let payload = ctx.call("update", json!({ "requester": ctx.var("sender") }))?;
                        ctx.emit("update_success", payload.clone())?;
                        Ok(payload)
                    }),
                ),
            ],
        )
        .expect("bundled manifest binds")
}

/// Client-side transaction submission: `addTransaction(tx)` broadcasts the
/// transaction through the `sendTransaction` phase; each miner answers with
/// its pooling verdict.
pub fn add_transaction() -> ChoreographyDescriptor {
    let manifest = Manifest::parse(ADD_TRANSACTION_MANIFEST.as_bytes()).expect("bundled manifest parses");
    manifest
        .bind(
            [(
                "addTransaction",
                ctor(|ctx, args| {
                    let tx =
                        args.first().cloned().ok_or_else(|| SwarmError::handler("transaction argument missing"))?;
                    ctx.set_var("transaction", tx)?;
                    ctx.swarm("sendTransaction").map(drop)
                }),
            )],
            [("sendTransaction", phase(|ctx| ctx.call("sendTransaction", ctx.var("transaction").clone())))],
        )
        .expect("bundled manifest binds")
}

/// An adapter with no services; enough for ping-pong.
#[derive(Debug, Default)]
pub struct EchoAdapter;

impl Adapter for EchoAdapter {
    fn call(&mut self, _ctx: &AdapterCtx, method: &str, _args: Value) -> Result<Value, SwarmError> {
        Err(SwarmError::UnknownMethod(method.to_string()))
    }
}
