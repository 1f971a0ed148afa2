use std::collections::BTreeMap;

use serde_json::Value;

use super::{
    ChoreographyDescriptor, CtorCtx, DispatchMode, Dispatcher, GroupBinding, Meter, PhaseCtx, SwarmClient, SwarmError,
    Vars,
};
use crate::bus::AdapterId;

/// Outcome of running a choreography in place on one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun {
    pub result: BTreeMap<AdapterId, Value>,
    pub events: Vec<(String, Value)>,
    pub vars: Vars,
    pub spent: u64,
}

impl ChoreographyDescriptor {
    /// Runs constructor `ctor` with every dispatched phase executed inline on
    /// `executing`, without touching the bus. Only `All` phases qualify, and
    /// handlers get no adapter access. `budget` caps the simulated time all
    /// phases may spend together.
    pub fn run_local(
        &self,
        ctor: &str,
        args: &[Value],
        executing: &AdapterId,
        budget: Option<u64>,
    ) -> Result<LocalRun, SwarmError> {
        let ctor_fn = self.ctor(ctor)?.clone();
        let origin = SwarmClient::Adapter(executing.clone());
        let mut vars = self.vars.clone();
        let mut local = LocalDispatcher {
            descriptor: self,
            executing,
            meter: budget.map(Meter::with_budget).unwrap_or_default(),
            result: BTreeMap::new(),
            events: Vec::new(),
        };
        {
            let mut ctx = CtorCtx { instance: 0, origin: &origin, vars: &mut vars, dispatcher: &mut local };
            ctor_fn(&mut ctx, args)?;
        }
        Ok(LocalRun { result: local.result, events: local.events, vars, spent: local.meter.spent() })
    }
}

struct LocalDispatcher<'a> {
    descriptor: &'a ChoreographyDescriptor,
    executing: &'a AdapterId,
    meter: Meter,
    result: BTreeMap<AdapterId, Value>,
    events: Vec<(String, Value)>,
}

impl Dispatcher for LocalDispatcher<'_> {
    fn dispatch(&mut self, phase: &str, mode: DispatchMode, collect: bool, vars: &Vars) -> Result<usize, SwarmError> {
        let bound = self.descriptor.phase(phase)?;
        if bound.group != GroupBinding::All {
            return Err(SwarmError::NotLocal(phase.to_string()));
        }
        let target = match &mode {
            DispatchMode::Broadcast => self.executing,
            DispatchMode::Direct(a) => a,
        };
        let snapshot = vars.clone();
        let mut ctx = PhaseCtx {
            instance: 0,
            phase,
            adapter_id: target,
            vars: &snapshot,
            host: None,
            events: Vec::new(),
            meter: self.meter,
        };
        let outcome = (bound.handler)(&mut ctx);
        self.meter = ctx.meter;
        self.events.append(&mut ctx.events);
        let value = outcome?;
        if self.meter.exhausted() {
            return Err(SwarmError::Interrupted);
        }
        if collect {
            self.result.insert(target.clone(), value);
        }
        Ok(1)
    }

    fn emit(&mut self, name: &str, payload: Value) -> Result<(), SwarmError> {
        if name.is_empty() {
            return Err(SwarmError::EmptyEventName);
        }
        self.events.push((name.to_string(), payload));
        Ok(())
    }
}
