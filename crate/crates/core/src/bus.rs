//! In-process pub/sub transport: adapter registry, group broadcast, unicast
//! and per-adapter mailboxes.
//!
//! Publishing only enqueues. Envelopes become deliverable once the logical
//! clock reaches their ready tick; a scheduler (see [`crate::scheduler`])
//! pops them and hands them to the adapter's [`Inbox`]. The fault layer can
//! delay an edge or crash an adapter, in which case envelopes addressed to
//! it are silently dropped.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::blockchain::canonical::{check_canonical, CanonicalError};

macro_rules! name_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(name: impl Into<String>) -> Result<Self, BusError> {
                let name = name.into();
                if name.is_empty() {
                    return Err(BusError::EmptyName);
                }
                Ok($name(name))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = BusError;
            fn try_from(s: String) -> Result<Self, BusError> {
                $name::new(s)
            }
        }

        impl TryFrom<&str> for $name {
            type Error = BusError;
            fn try_from(s: &str) -> Result<Self, BusError> {
                $name::new(s)
            }
        }

        impl From<$name> for String {
            fn from(n: $name) -> String {
                n.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl PartialEq<str> for $name {
            fn eq(&self, other: &str) -> bool {
                self.0 == other
            }
        }

        impl PartialEq<&str> for $name {
            fn eq(&self, other: &&str) -> bool {
                self.0 == *other
            }
        }
    };
}

name_type!(
    /// Unique name of an adapter on one bus.
    AdapterId
);
name_type!(
    /// A set of adapters sharing one functionality.
    GroupName
);

pub type SwarmId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Target {
    Group(GroupName),
    Adapter(AdapterId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EnvelopeKind {
    /// Run a phase of a swarm on the receiving adapter.
    Phase,
    /// A swarm event or result notification for the swarm's originator.
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Envelope {
    /// Assigned by the bus at publish time.
    pub message_id: u64,
    pub swarm_id: SwarmId,
    pub kind: EnvelopeKind,
    pub phase: String,
    pub payload: Value,
    pub sender: String,
    pub target: Target,
    /// Whether the receiver's phase result is collected into the swarm result.
    pub expects_reply: bool,
}

impl Envelope {
    pub fn phase(
        swarm_id: SwarmId,
        phase: impl Into<String>,
        payload: Value,
        sender: impl Into<String>,
        target: Target,
    ) -> Self {
        Envelope {
            message_id: 0,
            swarm_id,
            kind: EnvelopeKind::Phase,
            phase: phase.into(),
            payload,
            sender: sender.into(),
            target,
            expects_reply: true,
        }
    }

    pub fn event(
        swarm_id: SwarmId,
        name: impl Into<String>,
        payload: Value,
        sender: impl Into<String>,
        to: AdapterId,
    ) -> Self {
        Envelope {
            message_id: 0,
            swarm_id,
            kind: EnvelopeKind::Event,
            phase: name.into(),
            payload,
            sender: sender.into(),
            target: Target::Adapter(to),
            expects_reply: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BusError {
    #[error("adapter {0} is already registered")]
    DuplicateAdapter(AdapterId),
    #[error("registration handle is stale")]
    StaleHandle,
    #[error("no adapter named {0}")]
    UnknownAdapter(AdapterId),
    #[error("envelope target does not match the publish call")]
    TargetMismatch,
    #[error("names must be non-empty")]
    EmptyName,
    #[error("payload rejected: {0}")]
    NonCanonicalPayload(#[from] CanonicalError),
}

/// Receives envelopes for one adapter. The bus never calls an inbox while
/// holding its own lock, so implementations may publish freely.
pub trait Inbox: Send + Sync {
    fn deliver(&self, envelope: Envelope);

    /// Called once per logical tick while the adapter is registered and alive.
    fn tick(&self, _now: u64) {}
}

impl<F> Inbox for F
where
    F: Fn(Envelope) + Send + Sync,
{
    fn deliver(&self, envelope: Envelope) {
        self(envelope)
    }
}

/// Returned by [`Bus::register_adapter`]; needed to deregister.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationHandle {
    adapter: AdapterId,
    token: u64,
}

impl RegistrationHandle {
    pub fn adapter(&self) -> &AdapterId {
        &self.adapter
    }
}

/// Identifies a mailbox to the scheduler. Tokens are never reused.
pub type MailboxToken = u64;

struct Registration {
    token: u64,
    group: GroupName,
}

struct Queued {
    ready_at: u64,
    envelope: Envelope,
}

struct Mailbox {
    adapter: AdapterId,
    inbox: Arc<dyn Inbox>,
    queue: VecDeque<Queued>,
    live: bool,
}

#[derive(Default)]
struct Faults {
    crashed: BTreeSet<AdapterId>,
    delays: BTreeMap<(String, AdapterId), u64>,
    dropped: u64,
}

struct BusInner {
    next_message_id: u64,
    next_token: u64,
    latency: u64,
    registry: BTreeMap<AdapterId, Registration>,
    groups: BTreeMap<GroupName, BTreeSet<AdapterId>>,
    mailboxes: BTreeMap<MailboxToken, Mailbox>,
    /// Latest ready tick per (sender, receiver) edge; keeps per-publisher FIFO
    /// when edge delays change.
    edge_ready: BTreeMap<(String, AdapterId), u64>,
    faults: Faults,
}

pub struct Bus {
    inner: Mutex<BusInner>,
    clock: AtomicU64,
}

impl Default for Bus {
    fn default() -> Self {
        Bus::new()
    }
}

impl fmt::Debug for Bus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("Bus")
            .field("now", &self.now())
            .field("adapters", &inner.registry.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Bus {
    /// A bus whose envelopes become deliverable one tick after publication.
    pub fn new() -> Self {
        Bus::with_latency(1)
    }

    pub fn with_latency(latency: u64) -> Self {
        Bus {
            inner: Mutex::new(BusInner {
                next_message_id: 1,
                next_token: 1,
                latency,
                registry: BTreeMap::new(),
                groups: BTreeMap::new(),
                mailboxes: BTreeMap::new(),
                edge_ready: BTreeMap::new(),
                faults: Faults::default(),
            }),
            clock: AtomicU64::new(0),
        }
    }

    pub fn now(&self) -> u64 {
        self.clock.load(Ordering::SeqCst)
    }

    pub fn advance_clock(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn register_adapter(
        &self,
        id: AdapterId,
        group: GroupName,
        inbox: Arc<dyn Inbox>,
    ) -> Result<RegistrationHandle, BusError> {
        let mut inner = self.inner.lock();
        if inner.registry.contains_key(&id) {
            return Err(BusError::DuplicateAdapter(id));
        }
        let token = inner.next_token;
        inner.next_token += 1;
        inner.registry.insert(id.clone(), Registration { token, group: group.clone() });
        inner.groups.entry(group).or_default().insert(id.clone());
        inner.mailboxes.insert(token, Mailbox { adapter: id.clone(), inbox, queue: VecDeque::new(), live: true });
        Ok(RegistrationHandle { adapter: id, token })
    }

    /// Removes the adapter from its group. Envelopes already in its mailbox
    /// are still handed to the inbox.
    pub fn deregister_adapter(&self, handle: &RegistrationHandle) -> Result<(), BusError> {
        let mut inner = self.inner.lock();
        match inner.registry.get(&handle.adapter) {
            Some(reg) if reg.token == handle.token => {}
            _ => return Err(BusError::StaleHandle),
        }
        let reg = inner.registry.remove(&handle.adapter).expect("checked above");
        if let Some(members) = inner.groups.get_mut(&reg.group) {
            members.remove(&handle.adapter);
            if members.is_empty() {
                inner.groups.remove(&reg.group);
            }
        }
        let drained = match inner.mailboxes.get_mut(&handle.token) {
            Some(mb) => {
                mb.live = false;
                mb.queue.is_empty()
            }
            None => true,
        };
        if drained {
            inner.mailboxes.remove(&handle.token);
        }
        Ok(())
    }

    pub fn list_group(&self, group: &GroupName) -> BTreeSet<AdapterId> {
        self.inner.lock().groups.get(group).cloned().unwrap_or_default()
    }

    pub fn group_of(&self, id: &AdapterId) -> Option<GroupName> {
        self.inner.lock().registry.get(id).map(|r| r.group.clone())
    }

    pub fn is_registered(&self, id: &AdapterId) -> bool {
        self.inner.lock().registry.contains_key(id)
    }

    /// Enqueues `envelope` for every current member of `group`, sender
    /// included. Membership is read once, under the bus lock.
    pub fn broadcast(&self, group: &GroupName, mut envelope: Envelope) -> Result<usize, BusError> {
        if envelope.target != Target::Group(group.clone()) {
            return Err(BusError::TargetMismatch);
        }
        check_canonical(&envelope.payload)?;
        let mut inner = self.inner.lock();
        envelope.message_id = inner.assign_id();
        let members: Vec<AdapterId> = inner.groups.get(group).map(|m| m.iter().cloned().collect()).unwrap_or_default();
        let now = self.now();
        for member in &members {
            inner.enqueue(member, envelope.clone(), now);
        }
        Ok(members.len())
    }

    pub fn unicast(&self, to: &AdapterId, mut envelope: Envelope) -> Result<(), BusError> {
        if envelope.target != Target::Adapter(to.clone()) {
            return Err(BusError::TargetMismatch);
        }
        check_canonical(&envelope.payload)?;
        let mut inner = self.inner.lock();
        if !inner.registry.contains_key(to) {
            return Err(BusError::UnknownAdapter(to.clone()));
        }
        envelope.message_id = inner.assign_id();
        inner.enqueue(to, envelope, self.now());
        Ok(())
    }

    /// Marks an adapter as crashed: its queued envelopes are discarded, new
    /// ones are dropped and it receives no ticks. Group membership is kept.
    pub fn crash(&self, id: &AdapterId) -> Result<(), BusError> {
        let mut inner = self.inner.lock();
        let token = inner.registry.get(id).map(|r| r.token).ok_or_else(|| BusError::UnknownAdapter(id.clone()))?;
        inner.faults.crashed.insert(id.clone());
        if let Some(mb) = inner.mailboxes.get_mut(&token) {
            let n = mb.queue.len() as u64;
            mb.queue.clear();
            inner.faults.dropped += n;
        }
        Ok(())
    }

    pub fn is_crashed(&self, id: &AdapterId) -> bool {
        self.inner.lock().faults.crashed.contains(id)
    }

    /// Adds `ticks` of extra latency to envelopes from `from` to `to`.
    pub fn set_edge_delay(&self, from: impl Into<String>, to: AdapterId, ticks: u64) {
        let mut inner = self.inner.lock();
        let key = (from.into(), to);
        if ticks == 0 {
            inner.faults.delays.remove(&key);
        } else {
            inner.faults.delays.insert(key, ticks);
        }
    }

    pub fn dropped_count(&self) -> u64 {
        self.inner.lock().faults.dropped
    }

    /// Total envelopes waiting in mailboxes, ready or not.
    pub fn queued_count(&self) -> usize {
        self.inner.lock().mailboxes.values().map(|m| m.queue.len()).sum()
    }

    /// Mailboxes that hold at least one envelope deliverable now, in token order.
    pub fn ready_mailboxes(&self) -> Vec<MailboxToken> {
        let now = self.now();
        let inner = self.inner.lock();
        inner.mailboxes.iter().filter(|(_, mb)| mb.queue.iter().any(|q| q.ready_at <= now)).map(|(t, _)| *t).collect()
    }

    /// Pops the oldest deliverable envelope of one mailbox. The caller must
    /// hand it to the returned inbox.
    pub fn take_ready(&self, token: MailboxToken) -> Option<(Arc<dyn Inbox>, Envelope)> {
        let now = self.now();
        let mut inner = self.inner.lock();
        let mb = inner.mailboxes.get_mut(&token)?;
        let pos = mb.queue.iter().position(|q| q.ready_at <= now)?;
        let queued = mb.queue.remove(pos).expect("position is in range");
        let inbox = mb.inbox.clone();
        if !mb.live && mb.queue.is_empty() {
            inner.mailboxes.remove(&token);
        }
        Some((inbox, queued.envelope))
    }

    /// Inboxes of registered, non-crashed adapters, in registration order.
    pub fn tick_targets(&self) -> Vec<(AdapterId, Arc<dyn Inbox>)> {
        let inner = self.inner.lock();
        inner
            .mailboxes
            .values()
            .filter(|mb| mb.live && !inner.faults.crashed.contains(&mb.adapter))
            .map(|mb| (mb.adapter.clone(), mb.inbox.clone()))
            .collect()
    }
}

impl BusInner {
    fn assign_id(&mut self) -> u64 {
        let id = self.next_message_id;
        self.next_message_id += 1;
        id
    }

    fn enqueue(&mut self, to: &AdapterId, envelope: Envelope, now: u64) {
        let Some(token) = self.registry.get(to).map(|r| r.token) else {
            return;
        };
        if self.faults.crashed.contains(to) {
            self.faults.dropped += 1;
            return;
        }
        let edge = (envelope.sender.clone(), to.clone());
        let delay = self.faults.delays.get(&edge).copied().unwrap_or(0);
        let mut ready_at = now + self.latency + delay;
        if let Some(last) = self.edge_ready.get(&edge) {
            ready_at = ready_at.max(*last);
        }
        self.edge_ready.insert(edge, ready_at);
        if let Some(mb) = self.mailboxes.get_mut(&token) {
            mb.queue.push_back(Queued { ready_at, envelope });
        }
    }
}
