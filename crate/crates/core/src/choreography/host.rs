use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::Value;

use super::{SwarmEngine, SwarmError, SwarmEvent};
use crate::bus::{AdapterId, Envelope, EnvelopeKind, GroupName, Inbox, RegistrationHandle};

/// A long-running service attached to the bus. Phase handlers reach it
/// through [`super::PhaseCtx::call`].
pub trait Adapter: Send + 'static {
    fn call(&mut self, ctx: &AdapterCtx, method: &str, args: Value) -> Result<Value, SwarmError>;

    /// Events and result notifications of swarms this adapter originated.
    fn on_event(&mut self, _ctx: &AdapterCtx, _event: SwarmEvent) {}

    fn on_tick(&mut self, _ctx: &AdapterCtx) {}
}

/// What an adapter knows about where it runs.
#[derive(Clone)]
pub struct AdapterCtx {
    pub id: AdapterId,
    pub engine: Arc<SwarmEngine>,
    pub now: u64,
}

/// Runs one adapter as an actor: every envelope and tick is processed under
/// the adapter's own lock, one at a time.
pub struct AdapterHost<A: Adapter> {
    id: AdapterId,
    engine: Arc<SwarmEngine>,
    adapter: Mutex<A>,
}

impl<A: Adapter> AdapterHost<A> {
    pub fn new(id: AdapterId, engine: Arc<SwarmEngine>, adapter: A) -> Arc<Self> {
        Arc::new(AdapterHost { id, engine, adapter: Mutex::new(adapter) })
    }

    /// Creates the host and registers it on the engine's bus.
    pub fn attach(
        engine: &Arc<SwarmEngine>,
        id: AdapterId,
        group: GroupName,
        adapter: A,
    ) -> Result<(Arc<Self>, RegistrationHandle), SwarmError> {
        let host = AdapterHost::new(id.clone(), engine.clone(), adapter);
        let handle = engine.bus().register_adapter(id, group, host.clone())?;
        Ok((host, handle))
    }

    pub fn id(&self) -> &AdapterId {
        &self.id
    }

    pub fn ctx(&self) -> AdapterCtx {
        AdapterCtx { id: self.id.clone(), engine: self.engine.clone(), now: self.engine.bus().now() }
    }

    /// Runs `f` on the adapter's executor.
    pub fn with<R>(&self, f: impl FnOnce(&mut A, &AdapterCtx) -> R) -> R {
        let ctx = self.ctx();
        let mut adapter = self.adapter.lock();
        f(&mut adapter, &ctx)
    }
}

impl<A: Adapter> Inbox for AdapterHost<A> {
    fn deliver(&self, envelope: Envelope) {
        let ctx = self.ctx();
        let mut adapter = self.adapter.lock();
        match envelope.kind {
            EnvelopeKind::Phase => self.engine.run_phase(&envelope, &mut *adapter, &ctx),
            EnvelopeKind::Event => {
                if let Some(event) = SwarmEngine::event_from_envelope(&envelope) {
                    adapter.on_event(&ctx, event);
                }
            }
        }
    }

    fn tick(&self, _now: u64) {
        let ctx = self.ctx();
        self.adapter.lock().on_tick(&ctx);
    }
}
