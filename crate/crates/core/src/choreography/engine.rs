use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Adapter, AdapterCtx, ChoreographyDescriptor, CtorCtx, DispatchMode, Dispatcher, EventKind, GroupBinding, Meter,
    PhaseCtx, SwarmClient, SwarmError, SwarmEvent, Vars,
};
use crate::blockchain::canonical::canonical_encode;
use crate::blockchain::sha256_hex;
use crate::bus::{AdapterId, Bus, Envelope, SwarmId, Target};
use crate::scheduler::Scheduler;

/// One line of the engine's observable history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum TranscriptEntry {
    #[serde(rename_all = "camelCase")]
    Execute { tick: u64, instance: SwarmId, choreography: String, ctor: String, origin: String },
    #[serde(rename_all = "camelCase")]
    Dispatch { tick: u64, instance: SwarmId, phase: String, mode: String, count: usize, collect: bool, origin: String },
    #[serde(rename_all = "camelCase")]
    Result { tick: u64, instance: SwarmId, phase: String, adapter: String, duplicate: bool, summary: Value },
    #[serde(rename_all = "camelCase")]
    Event { tick: u64, instance: SwarmId, name: String, emitter: String, target: String, summary: Value },
}

impl TranscriptEntry {
    pub fn instance(&self) -> SwarmId {
        match self {
            TranscriptEntry::Execute { instance, .. }
            | TranscriptEntry::Dispatch { instance, .. }
            | TranscriptEntry::Result { instance, .. }
            | TranscriptEntry::Event { instance, .. } => *instance,
        }
    }
}

/// Scalars are kept verbatim; compound payloads are reduced to a short digest
/// of their canonical bytes.
fn summarize(value: &Value) -> Value {
    match value {
        Value::Array(_) | Value::Object(_) => match canonical_encode(value) {
            Ok(bytes) => json!({ "digest": &sha256_hex(&bytes)[..16] }),
            Err(_) => Value::Null,
        },
        v => v.clone(),
    }
}

struct Instance {
    descriptor: Arc<ChoreographyDescriptor>,
    origin: SwarmClient,
    vars: Vars,
    result: BTreeMap<AdapterId, Value>,
    outstanding: usize,
    ctor_done: bool,
    events: Vec<SwarmEvent>,
    failure: Option<SwarmError>,
}

struct EngineInner {
    registry: BTreeMap<String, Arc<ChoreographyDescriptor>>,
    instances: BTreeMap<SwarmId, Instance>,
    next_instance: SwarmId,
    transcript: Vec<TranscriptEntry>,
}

/// Registry of choreographies and the state of every swarm instance.
pub struct SwarmEngine {
    bus: Arc<Bus>,
    inner: Mutex<EngineInner>,
}

impl SwarmEngine {
    pub fn new(bus: Arc<Bus>) -> Arc<Self> {
        Arc::new(SwarmEngine {
            bus,
            inner: Mutex::new(EngineInner {
                registry: BTreeMap::new(),
                instances: BTreeMap::new(),
                next_instance: 1,
                transcript: Vec::new(),
            }),
        })
    }

    pub fn bus(&self) -> &Arc<Bus> {
        &self.bus
    }

    /// Group bindings are resolved at dispatch time, so phases may name groups
    /// that have no members yet.
    pub fn register_choreography(&self, descriptor: ChoreographyDescriptor) -> Result<(), SwarmError> {
        let mut inner = self.inner.lock();
        let name = descriptor.name().to_string();
        if inner.registry.contains_key(&name) {
            return Err(SwarmError::DuplicateChoreography(name));
        }
        inner.registry.insert(name, Arc::new(descriptor));
        Ok(())
    }

    pub fn descriptor(&self, name: &str) -> Option<Arc<ChoreographyDescriptor>> {
        self.inner.lock().registry.get(name).cloned()
    }

    /// Starts a new instance of `name` by running constructor `ctor` on the
    /// caller's context.
    pub fn execute_swarm(
        self: &Arc<Self>,
        name: &str,
        ctor: &str,
        args: &[Value],
        client: SwarmClient,
    ) -> Result<SwarmHandle, SwarmError> {
        let (id, descriptor, ctor_fn, mut vars) = {
            let mut inner = self.inner.lock();
            let descriptor =
                inner.registry.get(name).cloned().ok_or_else(|| SwarmError::UnknownChoreography(name.to_string()))?;
            let ctor_fn = descriptor.ctor(ctor)?.clone();
            let id = inner.next_instance;
            inner.next_instance += 1;
            let vars = descriptor.vars().clone();
            inner.instances.insert(
                id,
                Instance {
                    descriptor: descriptor.clone(),
                    origin: client.clone(),
                    vars: vars.clone(),
                    result: BTreeMap::new(),
                    outstanding: 0,
                    ctor_done: false,
                    events: Vec::new(),
                    failure: None,
                },
            );
            let tick = self.bus.now();
            inner.transcript.push(TranscriptEntry::Execute {
                tick,
                instance: id,
                choreography: name.to_string(),
                ctor: ctor.to_string(),
                origin: client.name().to_string(),
            });
            (id, descriptor, ctor_fn, vars)
        };

        let outcome = {
            let mut dispatcher =
                EngineDispatcher { engine: self, instance: id, descriptor: &descriptor, origin: &client };
            let mut ctx = CtorCtx { instance: id, origin: &client, vars: &mut vars, dispatcher: &mut dispatcher };
            ctor_fn(&mut ctx, args)
        };

        let mut inner = self.inner.lock();
        if let Some(inst) = inner.instances.get_mut(&id) {
            inst.vars = vars;
            inst.ctor_done = true;
            if let Err(e) = &outcome {
                inst.failure = Some(e.clone());
            }
        }
        outcome.map(|_| SwarmHandle { id, engine: self.clone() })
    }

    /// Publishes `phase` of a live instance. Broadcast goes to every member
    /// of the phase's group; `All` phases go to the designated adapter only.
    pub fn dispatch_phase(
        &self,
        instance: SwarmId,
        phase: &str,
        mode: DispatchMode,
        collect: bool,
    ) -> Result<usize, SwarmError> {
        let (descriptor, origin, vars) = {
            let inner = self.inner.lock();
            let inst = inner.instances.get(&instance).ok_or(SwarmError::UnknownInstance(instance))?;
            (inst.descriptor.clone(), inst.origin.clone(), inst.vars.clone())
        };
        self.dispatch_with(instance, &descriptor, &origin, phase, mode, collect, &vars)
    }

    #[allow(clippy::too_many_arguments)]
    fn dispatch_with(
        &self,
        instance: SwarmId,
        descriptor: &ChoreographyDescriptor,
        origin: &SwarmClient,
        phase: &str,
        mode: DispatchMode,
        collect: bool,
        vars: &Vars,
    ) -> Result<usize, SwarmError> {
        let binding = descriptor.phase(phase)?.group.clone();
        let payload = Value::Object(vars.clone().into_iter().collect());
        let mut envelope = Envelope::phase(instance, phase, payload, origin.name(), Target::Adapter(placeholder()));
        envelope.expects_reply = collect;

        // hold the engine lock across publication so a concurrent receiver
        // cannot finish before `outstanding` is raised
        let mut inner = self.inner.lock();
        let (count, mode_label) = match (&binding, &mode) {
            (GroupBinding::Group(group), DispatchMode::Broadcast) => {
                envelope.target = Target::Group(group.clone());
                (self.bus.broadcast(group, envelope)?, "broadcast".to_string())
            }
            (GroupBinding::Group(group), DispatchMode::Direct(to)) => {
                match self.bus.group_of(to) {
                    None => return Err(SwarmError::UnknownAdapter(to.clone())),
                    Some(g) if &g != group => {
                        return Err(SwarmError::NotInGroup {
                            adapter: to.clone(),
                            group: group.clone(),
                            phase: phase.into(),
                        })
                    }
                    Some(_) => {}
                }
                envelope.target = Target::Adapter(to.clone());
                self.bus.unicast(to, envelope).map_err(map_unknown)?;
                (1, format!("direct:{to}"))
            }
            (GroupBinding::All, DispatchMode::Broadcast) => {
                let to = origin.adapter().ok_or_else(|| SwarmError::NoDesignatedAdapter(phase.to_string()))?.clone();
                envelope.target = Target::Adapter(to.clone());
                self.bus.unicast(&to, envelope).map_err(map_unknown)?;
                (1, format!("designated:{to}"))
            }
            (GroupBinding::All, DispatchMode::Direct(to)) => {
                envelope.target = Target::Adapter(to.clone());
                self.bus.unicast(to, envelope).map_err(map_unknown)?;
                (1, format!("direct:{to}"))
            }
        };
        if let Some(inst) = inner.instances.get_mut(&instance) {
            inst.outstanding += count;
        }
        let tick = self.bus.now();
        inner.transcript.push(TranscriptEntry::Dispatch {
            tick,
            instance,
            phase: phase.to_string(),
            mode: mode_label,
            count,
            collect,
            origin: origin.name().to_string(),
        });
        Ok(count)
    }

    /// Records `value` as `adapter`'s entry in the instance result and
    /// notifies the originator. A second entry from the same adapter
    /// overwrites the first and is flagged as a duplicate.
    pub fn collect_result(&self, instance: SwarmId, adapter: &AdapterId, value: Value) -> Result<(), SwarmError> {
        self.collect_named(instance, "result", adapter, value)
    }

    fn collect_named(
        &self,
        instance: SwarmId,
        phase: &str,
        adapter: &AdapterId,
        value: Value,
    ) -> Result<(), SwarmError> {
        let mut inner = self.inner.lock();
        let inst = inner.instances.get_mut(&instance).ok_or(SwarmError::UnknownInstance(instance))?;
        let duplicate = inst.result.insert(adapter.clone(), value.clone()).is_some();
        let origin = inst.origin.clone();
        let event = SwarmEvent {
            instance_id: instance,
            name: phase.to_string(),
            payload: value,
            emitter: adapter.to_string(),
            kind: EventKind::Result { duplicate },
        };
        let tick = self.bus.now();
        inner.transcript.push(TranscriptEntry::Result {
            tick,
            instance,
            phase: phase.to_string(),
            adapter: adapter.to_string(),
            duplicate,
            summary: summarize(&event.payload),
        });
        self.notify(&mut inner, &origin, event);
        Ok(())
    }

    /// Sends a named event to the instance's originator.
    pub fn emit_event(&self, instance: SwarmId, name: &str, payload: Value, emitter: &str) -> Result<(), SwarmError> {
        if name.is_empty() {
            return Err(SwarmError::EmptyEventName);
        }
        let mut inner = self.inner.lock();
        let origin = inner.instances.get(&instance).ok_or(SwarmError::UnknownInstance(instance))?.origin.clone();
        let tick = self.bus.now();
        inner.transcript.push(TranscriptEntry::Event {
            tick,
            instance,
            name: name.to_string(),
            emitter: emitter.to_string(),
            target: origin.name().to_string(),
            summary: summarize(&payload),
        });
        let event = SwarmEvent {
            instance_id: instance,
            name: name.to_string(),
            payload,
            emitter: emitter.to_string(),
            kind: EventKind::Emitted,
        };
        self.notify(&mut inner, &origin, event);
        Ok(())
    }

    fn notify(&self, inner: &mut EngineInner, origin: &SwarmClient, event: SwarmEvent) {
        match origin {
            SwarmClient::External(_) => {
                if let Some(inst) = inner.instances.get_mut(&event.instance_id) {
                    inst.events.push(event);
                }
            }
            SwarmClient::Adapter(to) => {
                let payload = json!({
                    "value": event.payload,
                    "kind": event.kind,
                });
                let envelope = Envelope::event(event.instance_id, event.name, payload, event.emitter, to.clone());
                // an originator that left the bus simply misses the event
                let _ = self.bus.unicast(to, envelope);
            }
        }
    }

    pub(crate) fn event_from_envelope(envelope: &Envelope) -> Option<SwarmEvent> {
        let kind: EventKind = serde_json::from_value(envelope.payload.get("kind")?.clone()).ok()?;
        Some(SwarmEvent {
            instance_id: envelope.swarm_id,
            name: envelope.phase.clone(),
            payload: envelope.payload.get("value").cloned().unwrap_or(Value::Null),
            emitter: envelope.sender.clone(),
            kind,
        })
    }

    /// Executes a phase envelope on the receiving adapter.
    pub(crate) fn run_phase(&self, envelope: &Envelope, adapter: &mut dyn Adapter, ctx: &AdapterCtx) {
        let handler = {
            let inner = self.inner.lock();
            inner
                .instances
                .get(&envelope.swarm_id)
                .and_then(|inst| inst.descriptor.phases().get(&envelope.phase).map(|p| p.handler.clone()))
        };
        let Some(handler) = handler else {
            return;
        };
        let vars: Vars = match &envelope.payload {
            Value::Object(map) => map.clone().into_iter().collect(),
            _ => Vars::new(),
        };
        let (value, events) = {
            let mut pctx = PhaseCtx {
                instance: envelope.swarm_id,
                phase: &envelope.phase,
                adapter_id: &ctx.id,
                vars: &vars,
                host: Some((adapter, ctx)),
                events: Vec::new(),
                meter: Meter::unlimited(),
            };
            let value = match handler(&mut pctx) {
                Ok(v) => v,
                Err(e) => json!({ "error": e.to_string() }),
            };
            (value, pctx.events)
        };
        for (name, payload) in events {
            let _ = self.emit_event(envelope.swarm_id, &name, payload, ctx.id.as_str());
        }
        if envelope.expects_reply {
            let _ = self.collect_named(envelope.swarm_id, &envelope.phase, &ctx.id, value);
        }
        let mut inner = self.inner.lock();
        if let Some(inst) = inner.instances.get_mut(&envelope.swarm_id) {
            inst.outstanding = inst.outstanding.saturating_sub(1);
        }
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.inner.lock().transcript.clone()
    }

    pub fn transcript_len(&self) -> usize {
        self.inner.lock().transcript.len()
    }

    fn with_instance<R>(&self, id: SwarmId, f: impl FnOnce(&Instance) -> R) -> Option<R> {
        self.inner.lock().instances.get(&id).map(f)
    }
}

fn placeholder() -> AdapterId {
    AdapterId::new("-").expect("non-empty")
}

fn map_unknown(e: crate::bus::BusError) -> SwarmError {
    match e {
        crate::bus::BusError::UnknownAdapter(a) => SwarmError::UnknownAdapter(a),
        other => SwarmError::Bus(other),
    }
}

struct EngineDispatcher<'a> {
    engine: &'a SwarmEngine,
    instance: SwarmId,
    descriptor: &'a ChoreographyDescriptor,
    origin: &'a SwarmClient,
}

impl Dispatcher for EngineDispatcher<'_> {
    fn dispatch(&mut self, phase: &str, mode: DispatchMode, collect: bool, vars: &Vars) -> Result<usize, SwarmError> {
        self.engine.dispatch_with(self.instance, self.descriptor, self.origin, phase, mode, collect, vars)
    }

    fn emit(&mut self, name: &str, payload: Value) -> Result<(), SwarmError> {
        self.engine.emit_event(self.instance, name, payload, self.origin.name())
    }
}

/// Client-side view of one swarm instance.
#[derive(Clone)]
pub struct SwarmHandle {
    id: SwarmId,
    engine: Arc<SwarmEngine>,
}

impl std::fmt::Debug for SwarmHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SwarmHandle").field("id", &self.id).finish()
    }
}

impl SwarmHandle {
    pub fn id(&self) -> SwarmId {
        self.id
    }

    /// Quiescent: the constructor returned and no dispatched phase is outstanding.
    pub fn is_complete(&self) -> bool {
        self.engine.with_instance(self.id, |i| i.ctor_done && i.outstanding == 0).unwrap_or(false)
    }

    pub fn result(&self) -> BTreeMap<AdapterId, Value> {
        self.engine.with_instance(self.id, |i| i.result.clone()).unwrap_or_default()
    }

    pub fn vars(&self) -> Vars {
        self.engine.with_instance(self.id, |i| i.vars.clone()).unwrap_or_default()
    }

    /// Events buffered for an external client, in emission order.
    pub fn events(&self) -> Vec<SwarmEvent> {
        self.engine.with_instance(self.id, |i| i.events.clone()).unwrap_or_default()
    }

    pub fn failure(&self) -> Option<SwarmError> {
        self.engine.with_instance(self.id, |i| i.failure.clone()).flatten()
    }

    /// Drives `scheduler` until the instance quiesces, for at most `max_ticks`.
    pub fn wait(&self, scheduler: &mut Scheduler, max_ticks: u64) -> Result<BTreeMap<AdapterId, Value>, SwarmError> {
        if scheduler.run_until(max_ticks, || self.is_complete()) {
            Ok(self.result())
        } else {
            Err(SwarmError::Timeout)
        }
    }
}
