//! Declarative half of a choreography: names, variable defaults,
//! constructor names and phase-to-group bindings, stored as canonical JSON.
//! Handlers are bound in code with [`Manifest::bind`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ChoreographyDescriptor, CtorFn, GroupBinding, Phase, PhaseFn, SwarmError};
use crate::blockchain::canonical;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    #[serde(default)]
    pub vars: BTreeMap<String, Value>,
    pub ctors: Vec<String>,
    #[serde(default)]
    pub phases: BTreeMap<String, String>,
}

impl Manifest {
    /// Parses one canonical-JSON manifest; a single trailing newline is allowed.
    pub fn parse(bytes: &[u8]) -> Result<Self, SwarmError> {
        let bytes = bytes.strip_suffix(b"\n").unwrap_or(bytes);
        let value = canonical::decode_strict(bytes).map_err(|e| SwarmError::MalformedManifest(e.to_string()))?;
        serde_json::from_value(value).map_err(|e| SwarmError::MalformedManifest(e.to_string()))
    }

    pub fn to_canonical(&self) -> String {
        canonical::to_canonical_string(self).expect("manifest fields are canonical")
    }

    /// Attaches handlers. Every declared constructor and phase needs exactly
    /// one handler and no handler may be left over.
    pub fn bind(
        &self,
        ctors: impl IntoIterator<Item = (&'static str, CtorFn)>,
        phases: impl IntoIterator<Item = (&'static str, PhaseFn)>,
    ) -> Result<ChoreographyDescriptor, SwarmError> {
        let mut ctor_handlers: BTreeMap<String, CtorFn> = ctors.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut phase_handlers: BTreeMap<String, PhaseFn> =
            phases.into_iter().map(|(k, v)| (k.to_string(), v)).collect();

        let mut bound_ctors = BTreeMap::new();
        for name in &self.ctors {
            let f = ctor_handlers
                .remove(name)
                .ok_or_else(|| SwarmError::MalformedManifest(format!("no handler bound for constructor {name}")))?;
            if bound_ctors.insert(name.clone(), f).is_some() {
                return Err(SwarmError::MalformedManifest(format!("constructor {name} declared twice")));
            }
        }
        let mut bound_phases = BTreeMap::new();
        for (name, group) in &self.phases {
            let handler = phase_handlers
                .remove(name)
                .ok_or_else(|| SwarmError::MalformedManifest(format!("no handler bound for phase {name}")))?;
            bound_phases.insert(name.clone(), Phase { group: GroupBinding::parse(group)?, handler });
        }
        if let Some(extra) = ctor_handlers.keys().chain(phase_handlers.keys()).next() {
            return Err(SwarmError::MalformedManifest(format!("handler {extra} is not declared in the manifest")));
        }
        let mut meta = BTreeMap::new();
        meta.insert("name".to_string(), Value::String(self.name.clone()));
        ChoreographyDescriptor::new(meta, self.vars.clone(), bound_ctors, bound_phases)
    }
}
