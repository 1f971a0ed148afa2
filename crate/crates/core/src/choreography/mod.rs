//! Swarm choreographies: descriptors (meta, vars, constructors, phases), the
//! engine that executes them over the bus, and the adapter host that runs
//! phases on the receiving adapter.
//!
//! A constructor runs on the caller's context and dispatches phases. A
//! broadcast dispatch publishes one envelope per member of the phase's
//! group; a direct dispatch publishes one unicast. Each receiving adapter
//! runs the phase handler against a snapshot of the instance's vars taken at
//! dispatch time, and its return value lands in `swarm.result` keyed by that
//! adapter. Phases bound to the `All` sentinel run on exactly one adapter:
//! the one designated by the caller (the originating adapter by default).

pub mod builtin;
mod engine;
mod host;
mod local;
pub mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bus::{AdapterId, BusError, GroupName, SwarmId};

pub use engine::{SwarmEngine, SwarmHandle, TranscriptEntry};
pub use host::{Adapter, AdapterCtx, AdapterHost};
pub use local::LocalRun;
pub use manifest::Manifest;

/// Group sentinel meaning "any adapter may execute this phase".
pub const ALL_GROUP: &str = "All";

pub type Vars = BTreeMap<String, Value>;

pub type CtorFn = Arc<dyn Fn(&mut CtorCtx<'_>, &[Value]) -> Result<(), SwarmError> + Send + Sync>;
pub type PhaseFn = Arc<dyn Fn(&mut PhaseCtx<'_>) -> Result<Value, SwarmError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SwarmError {
    #[error("choreography {0} is already registered")]
    DuplicateChoreography(String),
    #[error("no choreography named {0}")]
    UnknownChoreography(String),
    #[error("choreography {choreography} has no constructor {ctor}")]
    UnknownCtor { choreography: String, ctor: String },
    #[error("choreography {choreography} has no phase {phase}")]
    UnknownPhase { choreography: String, phase: String },
    #[error("no adapter named {0}")]
    UnknownAdapter(AdapterId),
    #[error("adapter {adapter} is not in group {group} required by phase {phase}")]
    NotInGroup { adapter: AdapterId, group: GroupName, phase: String },
    #[error("variable {0} is not declared")]
    UndeclaredVar(String),
    #[error("malformed descriptor: {0}")]
    MalformedDescriptor(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("event name must be non-empty")]
    EmptyEventName,
    #[error("phase {0} is bound to All but the caller designates no adapter")]
    NoDesignatedAdapter(String),
    #[error("phase {0} needs bus routing and cannot run locally")]
    NotLocal(String),
    #[error("unknown swarm instance {0}")]
    UnknownInstance(SwarmId),
    #[error("adapter has no method {0}")]
    UnknownMethod(String),
    #[error("execution budget exhausted")]
    Interrupted,
    #[error("timed out waiting for the swarm")]
    Timeout,
    #[error("{0}")]
    Handler(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

impl SwarmError {
    pub fn handler(msg: impl Into<String>) -> Self {
        SwarmError::Handler(msg.into())
    }
}

/// The adapter group a phase executes on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupBinding {
    Group(GroupName),
    All,
}

impl GroupBinding {
    pub fn parse(name: &str) -> Result<Self, SwarmError> {
        if name == ALL_GROUP {
            return Ok(GroupBinding::All);
        }
        GroupName::new(name)
            .map(GroupBinding::Group)
            .map_err(|_| SwarmError::MalformedDescriptor("phase group must be non-empty".into()))
    }

    pub fn as_str(&self) -> &str {
        match self {
            GroupBinding::Group(g) => g.as_str(),
            GroupBinding::All => ALL_GROUP,
        }
    }
}

#[derive(Clone)]
pub struct Phase {
    pub group: GroupBinding,
    pub handler: PhaseFn,
}

impl fmt::Debug for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Phase").field("group", &self.group).finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub struct ChoreographyDescriptor {
    meta: BTreeMap<String, Value>,
    vars: Vars,
    ctors: BTreeMap<String, CtorFn>,
    phases: BTreeMap<String, Phase>,
}

impl fmt::Debug for ChoreographyDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChoreographyDescriptor")
            .field("meta", &self.meta)
            .field("vars", &self.vars)
            .field("ctors", &self.ctors.keys().collect::<Vec<_>>())
            .field("phases", &self.phases)
            .finish()
    }
}

impl ChoreographyDescriptor {
    pub fn new(
        meta: BTreeMap<String, Value>,
        vars: Vars,
        ctors: BTreeMap<String, CtorFn>,
        phases: BTreeMap<String, Phase>,
    ) -> Result<Self, SwarmError> {
        match meta.get("name").and_then(Value::as_str) {
            Some(n) if !n.is_empty() => {}
            _ => return Err(SwarmError::MalformedDescriptor("meta.name must be a non-empty string".into())),
        }
        if ctors.is_empty() {
            return Err(SwarmError::MalformedDescriptor("at least one constructor is required".into()));
        }
        if let Some(clash) = ctors.keys().find(|c| phases.contains_key(*c)) {
            return Err(SwarmError::MalformedDescriptor(format!("{clash} is both a constructor and a phase")));
        }
        if ctors.keys().chain(phases.keys()).any(String::is_empty) {
            return Err(SwarmError::MalformedDescriptor("constructor and phase names must be non-empty".into()));
        }
        Ok(ChoreographyDescriptor { meta, vars, ctors, phases })
    }

    pub fn builder(name: impl Into<String>) -> DescriptorBuilder {
        DescriptorBuilder {
            name: name.into(),
            vars: Vars::new(),
            ctors: BTreeMap::new(),
            phases: BTreeMap::new(),
            bad_group: None,
        }
    }

    pub fn name(&self) -> &str {
        self.meta["name"].as_str().expect("validated at construction")
    }

    pub fn meta(&self) -> &BTreeMap<String, Value> {
        &self.meta
    }

    /// Declared variables with their defaults.
    pub fn vars(&self) -> &Vars {
        &self.vars
    }

    pub fn ctor_names(&self) -> impl Iterator<Item = &str> {
        self.ctors.keys().map(String::as_str)
    }

    pub fn phases(&self) -> &BTreeMap<String, Phase> {
        &self.phases
    }

    pub fn phase(&self, name: &str) -> Result<&Phase, SwarmError> {
        self.phases
            .get(name)
            .ok_or_else(|| SwarmError::UnknownPhase { choreography: self.name().to_string(), phase: name.to_string() })
    }

    pub(crate) fn ctor(&self, name: &str) -> Result<&CtorFn, SwarmError> {
        self.ctors
            .get(name)
            .ok_or_else(|| SwarmError::UnknownCtor { choreography: self.name().to_string(), ctor: name.to_string() })
    }
}

pub struct DescriptorBuilder {
    name: String,
    vars: Vars,
    ctors: BTreeMap<String, CtorFn>,
    phases: BTreeMap<String, Phase>,
    bad_group: Option<String>,
}

impl DescriptorBuilder {
    pub fn var(mut self, name: impl Into<String>, default: Value) -> Self {
        self.vars.insert(name.into(), default);
        self
    }

    pub fn ctor<F>(mut self, name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&mut CtorCtx<'_>, &[Value]) -> Result<(), SwarmError> + Send + Sync + 'static,
    {
        self.ctors.insert(name.into(), Arc::new(f));
        self
    }

    pub fn phase<F>(mut self, name: impl Into<String>, group: &str, f: F) -> Self
    where
        F: Fn(&mut PhaseCtx<'_>) -> Result<Value, SwarmError> + Send + Sync + 'static,
    {
        match GroupBinding::parse(group) {
            Ok(group) => {
                self.phases.insert(name.into(), Phase { group, handler: Arc::new(f) });
            }
            Err(_) => self.bad_group = Some(name.into()),
        }
        self
    }

    pub fn build(self) -> Result<ChoreographyDescriptor, SwarmError> {
        if let Some(phase) = self.bad_group {
            return Err(SwarmError::MalformedDescriptor(format!("phase {phase} has an empty group")));
        }
        let mut meta = BTreeMap::new();
        meta.insert("name".to_string(), Value::String(self.name));
        ChoreographyDescriptor::new(meta, self.vars, self.ctors, self.phases)
    }
}

/// Where a swarm's events and result notifications go.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SwarmClient {
    /// An external client; events are buffered for polling through the handle.
    External(String),
    /// An adapter; events are delivered to its inbox over the bus.
    Adapter(AdapterId),
}

impl SwarmClient {
    pub fn name(&self) -> &str {
        match self {
            SwarmClient::External(s) => s,
            SwarmClient::Adapter(a) => a.as_str(),
        }
    }

    pub fn adapter(&self) -> Option<&AdapterId> {
        match self {
            SwarmClient::Adapter(a) => Some(a),
            SwarmClient::External(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EventKind {
    Emitted,
    /// A phase result was collected into `swarm.result`.
    Result {
        duplicate: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SwarmEvent {
    pub instance_id: SwarmId,
    pub name: String,
    pub payload: Value,
    pub emitter: String,
    pub kind: EventKind,
}

impl SwarmEvent {
    pub fn is_result(&self) -> bool {
        matches!(self.kind, EventKind::Result { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DispatchMode {
    Broadcast,
    Direct(AdapterId),
}

/// Simulated execution-time budget for phase handlers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Meter {
    budget: Option<u64>,
    spent: u64,
}

impl Meter {
    pub fn unlimited() -> Self {
        Meter::default()
    }

    pub fn with_budget(ms: u64) -> Self {
        Meter { budget: Some(ms), spent: 0 }
    }

    pub fn spent(&self) -> u64 {
        self.spent
    }

    pub fn exhausted(&self) -> bool {
        self.budget.is_some_and(|b| self.spent > b)
    }

    /// Charges `ms` of simulated time; fails once the budget is exceeded.
    pub fn spend(&mut self, ms: u64) -> Result<(), SwarmError> {
        self.spent = self.spent.saturating_add(ms);
        if self.exhausted() {
            Err(SwarmError::Interrupted)
        } else {
            Ok(())
        }
    }
}

pub(crate) trait Dispatcher {
    fn dispatch(&mut self, phase: &str, mode: DispatchMode, collect: bool, vars: &Vars) -> Result<usize, SwarmError>;
    fn emit(&mut self, name: &str, payload: Value) -> Result<(), SwarmError>;
}

/// Context handed to constructors.
pub struct CtorCtx<'a> {
    instance: SwarmId,
    origin: &'a SwarmClient,
    vars: &'a mut Vars,
    dispatcher: &'a mut dyn Dispatcher,
}

impl<'a> CtorCtx<'a> {
    pub fn instance(&self) -> SwarmId {
        self.instance
    }

    pub fn origin(&self) -> &SwarmClient {
        self.origin
    }

    pub fn var(&self, name: &str) -> &Value {
        self.vars.get(name).unwrap_or(&Value::Null)
    }

    pub fn set_var(&mut self, name: &str, value: Value) -> Result<(), SwarmError> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(SwarmError::UndeclaredVar(name.to_string())),
        }
    }

    /// Broadcasts `phase` to its group and collects the results.
    pub fn swarm(&mut self, phase: &str) -> Result<usize, SwarmError> {
        self.dispatch(phase, DispatchMode::Broadcast, true)
    }

    pub fn swarm_direct(&mut self, phase: &str, adapter: &AdapterId) -> Result<usize, SwarmError> {
        self.dispatch(phase, DispatchMode::Direct(adapter.clone()), true)
    }

    pub fn dispatch(&mut self, phase: &str, mode: DispatchMode, collect: bool) -> Result<usize, SwarmError> {
        self.dispatcher.dispatch(phase, mode, collect, self.vars)
    }

    pub fn emit(&mut self, name: &str, payload: Value) -> Result<(), SwarmError> {
        self.dispatcher.emit(name, payload)
    }
}

/// Context handed to phase handlers on the executing adapter.
pub struct PhaseCtx<'a> {
    instance: SwarmId,
    phase: &'a str,
    adapter_id: &'a AdapterId,
    vars: &'a Vars,
    host: Option<(&'a mut dyn Adapter, &'a AdapterCtx)>,
    events: Vec<(String, Value)>,
    meter: Meter,
}

impl<'a> PhaseCtx<'a> {
    pub fn instance(&self) -> SwarmId {
        self.instance
    }

    pub fn phase(&self) -> &str {
        self.phase
    }

    /// The adapter this phase executes on.
    pub fn adapter_id(&self) -> &AdapterId {
        self.adapter_id
    }

    pub fn var(&self, name: &str) -> &Value {
        self.vars.get(name).unwrap_or(&Value::Null)
    }

    pub fn vars(&self) -> &Vars {
        self.vars
    }

    /// Invokes a method exposed by the executing adapter.
    pub fn call(&mut self, method: &str, args: Value) -> Result<Value, SwarmError> {
        match self.host.as_mut() {
            Some((adapter, ctx)) => adapter.call(ctx, method, args),
            None => Err(SwarmError::UnknownMethod(method.to_string())),
        }
    }

    /// Queues an event for the swarm's originator; sent after the handler returns.
    pub fn emit(&mut self, name: &str, payload: Value) -> Result<(), SwarmError> {
        if name.is_empty() {
            return Err(SwarmError::EmptyEventName);
        }
        self.events.push((name.to_string(), payload));
        Ok(())
    }

    /// Charges simulated execution time against the phase budget.
    pub fn spend(&mut self, ms: u64) -> Result<(), SwarmError> {
        self.meter.spend(ms)
    }
}
