//! Minimal NGSI-v2-style context broker: an in-memory entity store with
//! subscriptions, throttled at-least-once notification delivery, and an
//! optional JSON-lines journal for restart replay.

mod query;
mod subscription;
pub mod http;

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SharedClock, SystemClock};
use crate::ngsi::{check_attribute_name, format_iso8601, Attribute, EntityError, NgsiEntity};

pub use query::{parse_q, AttrFilter, Comparator, Query};
pub use subscription::{
    FnSink, HttpSink, Notification, NotificationQueue, NotificationSink, NotificationTarget,
    SinkError, Subscription, SubscriptionStatus,
};

/// Consecutive failed deliveries after which a subscription is marked failed.
pub const MAX_DELIVERY_FAILURES: u32 = 3;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("invalid entity: {0}")]
    InvalidEntity(#[from] EntityError),
    #[error("entity not found: {0}")]
    NotFound(String),
    #[error("malformed id pattern {0}")]
    MalformedPattern(String),
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("type mismatch in attribute filter: {0}")]
    TypeMismatch(String),
    #[error("malformed subscription: {0}")]
    MalformedSubscription(String),
    #[error("unknown subscription: {0}")]
    UnknownSubscription(String),
    #[error("broker unreachable: {0}")]
    Unreachable(String),
    #[error("journal error: {0}")]
    Journal(String),
    #[error("broker answered {status}: {message}")]
    Remote { status: u16, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsertOutcome {
    Created,
    Updated,
}

/// Operations shared by the in-process [`Broker`] and the HTTP client
/// [`http::HttpBroker`].
pub trait ContextBroker: Send + Sync {
    fn upsert_entity(&self, entity: NgsiEntity) -> Result<UpsertOutcome, BrokerError>;
    fn get_entity(&self, id: &str) -> Result<Option<NgsiEntity>, BrokerError>;
    fn query_entities(&self, query: &Query) -> Result<Vec<NgsiEntity>, BrokerError>;
    fn update_attributes(
        &self,
        id: &str,
        patch: BTreeMap<String, Attribute>,
    ) -> Result<NgsiEntity, BrokerError>;
    fn delete_entity(&self, id: &str) -> Result<(), BrokerError>;
    fn subscribe(&self, subscription: Subscription) -> Result<String, BrokerError>;
    fn unsubscribe(&self, id: &str) -> Result<(), BrokerError>;
}

/// Result of delivering to one subscription during a pump pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryOutcome {
    pub subscription_id: String,
    pub delivered: usize,
    pub failed: bool,
    pub status: SubscriptionStatus,
}

struct SubState {
    sub: Subscription,
    id_regex: Regex,
    sink: Arc<dyn NotificationSink>,
    pending: VecDeque<Notification>,
    last_delivery: Option<i64>,
    consecutive_failures: u32,
    delivered_total: u64,
}

#[derive(Default)]
struct State {
    entities: BTreeMap<String, NgsiEntity>,
    subs: BTreeMap<String, SubState>,
    next_sub: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum JournalRecord {
    Upsert {
        entity: NgsiEntity,
    },
    Patch {
        id: String,
        attrs: BTreeMap<String, Attribute>,
    },
    Delete {
        id: String,
    },
}

pub struct Broker {
    state: RwLock<State>,
    // Serializes pump passes so per-subscription order holds.
    pump: Mutex<()>,
    clock: SharedClock,
    journal: Option<Mutex<File>>,
    wake: Arc<(Mutex<bool>, Condvar)>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

impl Broker {
    pub fn new() -> Self {
        Self::with_clock(Arc::new(SystemClock))
    }

    pub fn with_clock(clock: SharedClock) -> Self {
        Self {
            state: RwLock::new(State::default()),
            pump: Mutex::new(()),
            clock,
            journal: None,
            wake: Arc::new((Mutex::new(false), Condvar::new())),
        }
    }

    /// Opens a broker backed by an append-only journal, replaying any
    /// existing records first. Subscriptions are not journaled.
    pub fn open_with_journal(path: &Path, clock: SharedClock) -> Result<Self, BrokerError> {
        let mut broker = Self::with_clock(clock);
        if path.exists() {
            let file = File::open(path).map_err(|e| BrokerError::Journal(e.to_string()))?;
            let mut state = broker.state.write().expect("state lock");
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| BrokerError::Journal(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JournalRecord = serde_json::from_str(&line)
                    .map_err(|e| BrokerError::Journal(format!("line {}: {e}", n + 1)))?;
                match rec {
                    JournalRecord::Upsert { entity } => {
                        state.entities.insert(entity.id.clone(), entity);
                    }
                    JournalRecord::Patch { id, attrs } => {
                        if let Some(e) = state.entities.get_mut(&id) {
                            e.attributes.extend(attrs);
                        }
                    }
                    JournalRecord::Delete { id } => {
                        state.entities.remove(&id);
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BrokerError::Journal(e.to_string()))?;
        broker.journal = Some(Mutex::new(file));
        Ok(broker)
    }

    pub fn len(&self) -> usize {
        self.state.read().expect("state lock").entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    fn append_journal(&self, rec: &JournalRecord) -> Result<(), BrokerError> {
        if let Some(j) = &self.journal {
            let mut line =
                serde_json::to_string(rec).map_err(|e| BrokerError::Journal(e.to_string()))?;
            line.push('\n');
            j.lock()
                .expect("journal lock")
                .write_all(line.as_bytes())
                .map_err(|e| BrokerError::Journal(e.to_string()))?;
        }
        Ok(())
    }

    fn signal(&self) {
        let (lock, cv) = &*self.wake;
        *lock.lock().expect("wake lock") = true;
        cv.notify_all();
    }

    /// Queues a notification on every active subscription matching the commit.
    /// Called with the state write lock held, so queue order is commit order.
    fn enqueue_matches<'a>(
        state: &mut State,
        entity: &NgsiEntity,
        changed: impl Iterator<Item = &'a String> + Clone,
        issued_at: &str,
    ) -> bool {
        let mut any = false;
        for (id, s) in state.subs.iter_mut() {
            if s.sub.status != SubscriptionStatus::Active
                || !s.sub.type_matches(&entity.entity_type)
                || !s.id_regex.is_match(&entity.id)
                || !s.sub.watches(changed.clone())
            {
                continue;
            }
            s.pending.push_back(Notification {
                subscription_id: id.clone(),
                issued_at: issued_at.to_string(),
                data: vec![entity.clone()],
            });
            any = true;
        }
        any
    }

    /// Pumps queued notifications once. Honors throttling (coalescing pending
    /// snapshots into the latest per entity), requeues on failure, and marks a
    /// subscription failed after [`MAX_DELIVERY_FAILURES`] consecutive failures.
    pub fn deliver_notifications(&self) -> Vec<DeliveryOutcome> {
        let _pump = self.pump.lock().expect("pump lock");
        let now = self.clock.now();
        let jobs: Vec<(String, Arc<dyn NotificationSink>, Vec<Notification>)> = {
            let mut state = self.state.write().expect("state lock");
            state
                .subs
                .iter_mut()
                .filter(|(_, s)| s.sub.status == SubscriptionStatus::Active && !s.pending.is_empty())
                .filter_map(|(id, s)| {
                    let throttle = s.sub.throttling_seconds as i64;
                    if throttle == 0 {
                        return Some((id.clone(), Arc::clone(&s.sink), s.pending.drain(..).collect()));
                    }
                    let due = s.last_delivery.is_none_or(|last| now - last >= throttle);
                    if !due {
                        return None;
                    }
                    Some((id.clone(), Arc::clone(&s.sink), vec![coalesce(id, &mut s.pending, now)]))
                })
                .collect()
        };

        let mut outcomes = Vec::with_capacity(jobs.len());
        for (sub_id, sink, batch) in jobs {
            let mut sent = 0;
            for n in &batch {
                if sink.deliver(n).is_err() {
                    break;
                }
                sent += 1;
            }
            let mut state = self.state.write().expect("state lock");
            let Some(s) = state.subs.get_mut(&sub_id) else {
                // unsubscribed while delivering
                continue;
            };
            let failed = sent < batch.len();
            if sent > 0 {
                s.last_delivery = Some(now);
                s.delivered_total += sent as u64;
            }
            if failed {
                s.consecutive_failures += 1;
                for n in batch.into_iter().skip(sent).rev() {
                    s.pending.push_front(n);
                }
                if s.consecutive_failures >= MAX_DELIVERY_FAILURES {
                    s.sub.status = SubscriptionStatus::Failed;
                    s.pending.clear();
                    log::warn!("subscription {sub_id} marked failed");
                }
            } else {
                s.consecutive_failures = 0;
            }
            outcomes.push(DeliveryOutcome {
                subscription_id: sub_id,
                delivered: sent,
                failed,
                status: s.sub.status,
            });
        }
        outcomes
    }

    /// Number of notifications waiting across all subscriptions.
    pub fn pending_notifications(&self) -> usize {
        let state = self.state.read().expect("state lock");
        state.subs.values().map(|s| s.pending.len()).sum()
    }

    pub fn subscription(&self, id: &str) -> Option<Subscription> {
        self.state
            .read()
            .expect("state lock")
            .subs
            .get(id)
            .map(|s| s.sub.clone())
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        let state = self.state.read().expect("state lock");
        state.subs.values().map(|s| s.sub.clone()).collect()
    }

    /// Starts a background thread that pumps notifications after each commit
    /// and at least every `idle` interval (so throttled and retried
    /// deliveries make progress).
    pub fn start_dispatcher(self: &Arc<Self>, idle: Duration) -> Dispatcher {
        let stop = Arc::new(AtomicBool::new(false));
        let broker = Arc::clone(self);
        let flag = Arc::clone(&stop);
        let thread = std::thread::Builder::new()
            .name("broker-dispatch".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    broker.deliver_notifications();
                    let (lock, cv) = &*broker.wake;
                    let guard = lock.lock().expect("wake lock");
                    let (mut guard, _) = cv
                        .wait_timeout_while(guard, idle, |woken| !*woken)
                        .expect("wake lock");
                    *guard = false;
                }
                broker.deliver_notifications();
            })
            .expect("spawn dispatcher");
        Dispatcher {
            stop,
            wake: Arc::clone(&self.wake),
            thread: Some(thread),
        }
    }
}

fn coalesce(sub_id: &str, pending: &mut VecDeque<Notification>, now: i64) -> Notification {
    let mut order: Vec<String> = Vec::new();
    let mut latest: BTreeMap<String, NgsiEntity> = BTreeMap::new();
    for n in pending.drain(..) {
        for e in n.data {
            if !latest.contains_key(&e.id) {
                order.push(e.id.clone());
            }
            latest.insert(e.id.clone(), e);
        }
    }
    Notification {
        subscription_id: sub_id.to_string(),
        issued_at: format_iso8601(now),
        data: order
            .into_iter()
            .filter_map(|id| latest.remove(&id))
            .collect(),
    }
}

/// Handle to the background delivery thread; stops it on drop.
pub struct Dispatcher {
    stop: Arc<AtomicBool>,
    wake: Arc<(Mutex<bool>, Condvar)>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for Dispatcher {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let (lock, cv) = &*self.wake;
        *lock.lock().expect("wake lock") = true;
        cv.notify_all();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl ContextBroker for Broker {
    fn upsert_entity(&self, entity: NgsiEntity) -> Result<UpsertOutcome, BrokerError> {
        entity.validate()?;
        let issued = format_iso8601(self.clock.now());
        let notify;
        let outcome;
        {
            let mut state = self.state.write().expect("state lock");
            self.append_journal(&JournalRecord::Upsert {
                entity: entity.clone(),
            })?;
            outcome = match state.entities.insert(entity.id.clone(), entity.clone()) {
                None => UpsertOutcome::Created,
                Some(_) => UpsertOutcome::Updated,
            };
            notify = Self::enqueue_matches(&mut state, &entity, entity.attributes.keys(), &issued);
        }
        if notify {
            self.signal();
        }
        Ok(outcome)
    }

    fn get_entity(&self, id: &str) -> Result<Option<NgsiEntity>, BrokerError> {
        Ok(self.state.read().expect("state lock").entities.get(id).cloned())
    }

    fn query_entities(&self, query: &Query) -> Result<Vec<NgsiEntity>, BrokerError> {
        let compiled = query.compile()?;
        let state = self.state.read().expect("state lock");
        Ok(state
            .entities
            .values()
            .filter(|e| compiled.matches(e))
            .cloned()
            .collect())
    }

    fn update_attributes(
        &self,
        id: &str,
        patch: BTreeMap<String, Attribute>,
    ) -> Result<NgsiEntity, BrokerError> {
        for (name, attr) in &patch {
            check_attribute_name(name)?;
            attr.check(name)?;
        }
        let issued = format_iso8601(self.clock.now());
        let (snapshot, notify) = {
            let mut state = self.state.write().expect("state lock");
            if !state.entities.contains_key(id) {
                return Err(BrokerError::NotFound(id.to_string()));
            }
            if patch.is_empty() {
                return Ok(state.entities[id].clone());
            }
            self.append_journal(&JournalRecord::Patch {
                id: id.to_string(),
                attrs: patch.clone(),
            })?;
            let entity = state.entities.get_mut(id).expect("checked above");
            let changed: Vec<String> = patch.keys().cloned().collect();
            entity.attributes.extend(patch);
            let snapshot = entity.clone();
            let notify = Self::enqueue_matches(&mut state, &snapshot, changed.iter(), &issued);
            (snapshot, notify)
        };
        if notify {
            self.signal();
        }
        Ok(snapshot)
    }

    fn delete_entity(&self, id: &str) -> Result<(), BrokerError> {
        let mut state = self.state.write().expect("state lock");
        if !state.entities.contains_key(id) {
            return Err(BrokerError::NotFound(id.to_string()));
        }
        self.append_journal(&JournalRecord::Delete { id: id.to_string() })?;
        state.entities.remove(id);
        Ok(())
    }

    fn subscribe(&self, mut subscription: Subscription) -> Result<String, BrokerError> {
        let id_regex = query::compile_anchored(&subscription.id_pattern)
            .map_err(|e| BrokerError::MalformedSubscription(e.to_string()))?;
        if subscription.entity_type_filter.is_empty() {
            return Err(BrokerError::MalformedSubscription(
                "entityTypeFilter is empty".into(),
            ));
        }
        for a in &subscription.watched_attributes {
            check_attribute_name(a).map_err(|e| BrokerError::MalformedSubscription(e.to_string()))?;
        }
        if let NotificationTarget::Http { url } = &subscription.target {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(BrokerError::MalformedSubscription(format!(
                    "callback url {url:?} is not http(s)"
                )));
            }
        }
        let mut state = self.state.write().expect("state lock");
        state.next_sub += 1;
        let id = if subscription.id.is_empty() {
            format!("sub-{:06}", state.next_sub)
        } else {
            subscription.id.clone()
        };
        if state.subs.contains_key(&id) {
            return Err(BrokerError::MalformedSubscription(format!(
                "subscription id {id} already exists"
            )));
        }
        subscription.id = id.clone();
        subscription.status = SubscriptionStatus::Active;
        let sink = subscription.target.resolve();
        state.subs.insert(
            id.clone(),
            SubState {
                sub: subscription,
                id_regex,
                sink,
                pending: VecDeque::new(),
                last_delivery: None,
                consecutive_failures: 0,
                delivered_total: 0,
            },
        );
        Ok(id)
    }

    fn unsubscribe(&self, id: &str) -> Result<(), BrokerError> {
        let mut state = self.state.write().expect("state lock");
        state
            .subs
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| BrokerError::UnknownSubscription(id.to_string()))
    }
}

impl<T: ContextBroker + ?Sized> ContextBroker for Arc<T> {
    fn upsert_entity(&self, entity: NgsiEntity) -> Result<UpsertOutcome, BrokerError> {
        (**self).upsert_entity(entity)
    }
    fn get_entity(&self, id: &str) -> Result<Option<NgsiEntity>, BrokerError> {
        (**self).get_entity(id)
    }
    fn query_entities(&self, query: &Query) -> Result<Vec<NgsiEntity>, BrokerError> {
        (**self).query_entities(query)
    }
    fn update_attributes(
        &self,
        id: &str,
        patch: BTreeMap<String, Attribute>,
    ) -> Result<NgsiEntity, BrokerError> {
        (**self).update_attributes(id, patch)
    }
    fn delete_entity(&self, id: &str) -> Result<(), BrokerError> {
        (**self).delete_entity(id)
    }
    fn subscribe(&self, subscription: Subscription) -> Result<String, BrokerError> {
        (**self).subscribe(subscription)
    }
    fn unsubscribe(&self, id: &str) -> Result<(), BrokerError> {
        (**self).unsubscribe(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, SimClock};
    use std::sync::atomic::AtomicUsize;

    fn spot(id: &str, status: &str) -> NgsiEntity {
        NgsiEntity::new(id, "ParkingSpot").with("status", Attribute::text(status))
    }

    fn patch(name: &str, attr: Attribute) -> BTreeMap<String, Attribute> {
        BTreeMap::from([(name.to_string(), attr)])
    }

    #[test]
    fn read_your_write() {
        let b = Broker::new();
        let e = spot("P1", "free");
        assert_eq!(b.upsert_entity(e.clone()).unwrap(), UpsertOutcome::Created);
        assert_eq!(b.get_entity("P1").unwrap(), Some(e));
    }

    #[test]
    fn upsert_twice_updates() {
        let b = Broker::new();
        b.upsert_entity(spot("P1", "free")).unwrap();
        assert_eq!(b.upsert_entity(spot("P1", "occupied")).unwrap(), UpsertOutcome::Updated);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn reserved_attribute_rejected_without_state_change() {
        let b = Broker::new();
        let bad = NgsiEntity::new("P1", "ParkingSpot").with("id", Attribute::text("x"));
        assert!(matches!(b.upsert_entity(bad), Err(BrokerError::InvalidEntity(_))));
        assert!(b.is_empty());
    }

    #[test]
    fn empty_store_query() {
        let b = Broker::new();
        assert!(b.query_entities(&Query::all()).unwrap().is_empty());
        assert!(matches!(
            b.query_entities(&Query::all().id_pattern("(")),
            Err(BrokerError::MalformedPattern(_))
        ));
    }

    #[test]
    fn partial_update_leaves_others() {
        let b = Broker::new();
        let e = NgsiEntity::new("T1", "TrafficFlowObserved")
            .with("intensity", Attribute::number(10.0))
            .with("occupancy", Attribute::number(0.2))
            .with("averageVehicleSpeed", Attribute::number(40.0));
        b.upsert_entity(e.clone()).unwrap();
        let after = b
            .update_attributes("T1", patch("intensity", Attribute::number(12.0)))
            .unwrap();
        for k in ["occupancy", "averageVehicleSpeed"] {
            assert_eq!(
                serde_json::to_vec(&after.attributes[k]).unwrap(),
                serde_json::to_vec(&e.attributes[k]).unwrap()
            );
        }
        assert_eq!(after.attributes["intensity"].as_f64(), Some(12.0));
    }

    #[test]
    fn empty_patch_is_noop_without_notification() {
        let b = Broker::new();
        let q = NotificationQueue::new();
        b.upsert_entity(spot("P1", "free")).unwrap();
        b.subscribe(Subscription::new("*", q.sink())).unwrap();
        let before = b.get_entity("P1").unwrap().unwrap();
        let after = b.update_attributes("P1", BTreeMap::new()).unwrap();
        assert_eq!(before, after);
        b.deliver_notifications();
        assert!(q.is_empty());
    }

    #[test]
    fn patch_absent_is_not_found() {
        let b = Broker::new();
        assert!(matches!(
            b.update_attributes("nope", patch("a", Attribute::text("x"))),
            Err(BrokerError::NotFound(_))
        ));
    }

    #[test]
    fn single_match_single_notification() {
        let b = Broker::new();
        let q = NotificationQueue::new();
        b.subscribe(Subscription::new("ArrivalEstimation", q.sink())).unwrap();
        b.upsert_entity(spot("P1", "free")).unwrap();
        let ae = NgsiEntity::new("AE1", "ArrivalEstimation")
            .with("remainingTime", Attribute::integer(30));
        b.upsert_entity(ae.clone()).unwrap();
        b.deliver_notifications();
        let got = q.drain();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].data, vec![ae]);
    }

    #[test]
    fn watched_attributes_filter() {
        let b = Broker::new();
        let q = NotificationQueue::new();
        let ae = NgsiEntity::new("AE1", "ArrivalEstimation")
            .with("remainingTime", Attribute::integer(30))
            .with("refStop", Attribute::reference("S1"));
        b.upsert_entity(ae).unwrap();
        b.subscribe(Subscription::new("ArrivalEstimation", q.sink()).watch(["remainingTime"]))
            .unwrap();
        b.update_attributes("AE1", patch("refStop", Attribute::reference("S2"))).unwrap();
        b.deliver_notifications();
        assert!(q.is_empty());
        b.update_attributes("AE1", patch("remainingTime", Attribute::integer(10))).unwrap();
        b.deliver_notifications();
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn unsubscribe_stops_notifications() {
        let b = Broker::new();
        let q = NotificationQueue::new();
        let id = b.subscribe(Subscription::new("ParkingSpot", q.sink())).unwrap();
        b.unsubscribe(&id).unwrap();
        for i in 0..10 {
            b.upsert_entity(spot(&format!("P{i}"), "free")).unwrap();
        }
        b.deliver_notifications();
        assert!(q.is_empty());
        assert!(matches!(b.unsubscribe(&id), Err(BrokerError::UnknownSubscription(_))));
    }

    #[test]
    fn fifo_without_throttling() {
        let b = Broker::new();
        let q = NotificationQueue::new();
        b.subscribe(Subscription::new("ParkingSpot", q.sink())).unwrap();
        for i in 0..5 {
            b.upsert_entity(spot("P1", &format!("s{i}"))).unwrap();
        }
        b.deliver_notifications();
        let statuses: Vec<_> = q
            .drain()
            .into_iter()
            .map(|n| n.data[0].attributes["status"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(statuses, ["s0", "s1", "s2", "s3", "s4"]);
    }

    #[test]
    fn throttling_coalesces_to_latest() {
        let clock = SimClock::new(1_000);
        let b = Broker::with_clock(Arc::new(clock.clone()));
        let q = NotificationQueue::new();
        b.subscribe(Subscription::new("ParkingSpot", q.sink()).throttling(60)).unwrap();
        let mut delivery_times = Vec::new();
        for i in 0..5 {
            b.upsert_entity(spot("P1", &format!("s{i}"))).unwrap();
            let before = q.len();
            b.deliver_notifications();
            if q.len() > before {
                delivery_times.push(clock.now());
            }
            clock.advance(10);
        }
        clock.set(1_060);
        b.deliver_notifications();
        if q.len() > delivery_times.len() {
            delivery_times.push(clock.now());
        }
        let got = q.drain();
        assert!(got.len() <= 2, "{} notifications", got.len());
        let last = got.last().unwrap();
        assert_eq!(last.data.len(), 1);
        assert_eq!(last.data[0].attributes["status"].as_str(), Some("s4"));
        for w in delivery_times.windows(2) {
            assert!(w[1] - w[0] >= 60);
        }
    }

    #[test]
    fn failing_sink_marks_subscription_failed() {
        let b = Broker::new();
        let attempts = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&attempts);
        let id = b
            .subscribe(Subscription::new(
                "*",
                NotificationTarget::sink(FnSink(move |_: &Notification| {
                    counter.fetch_add(1, Ordering::SeqCst);
                    Err(SinkError("down".into()))
                })),
            ))
            .unwrap();
        b.upsert_entity(spot("P1", "free")).unwrap();
        for _ in 0..5 {
            b.deliver_notifications();
        }
        assert_eq!(attempts.load(Ordering::SeqCst), 3);
        assert_eq!(b.subscription(&id).unwrap().status, SubscriptionStatus::Failed);
        b.upsert_entity(spot("P2", "free")).unwrap();
        b.deliver_notifications();
        assert_eq!(attempts.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn transient_failure_retried_in_order() {
        let b = Broker::new();
        let q = NotificationQueue::new();
        let fail_once = Arc::new(AtomicBool::new(true));
        let flag = Arc::clone(&fail_once);
        let inner = q.clone();
        b.subscribe(Subscription::new(
            "*",
            NotificationTarget::sink(FnSink(move |n: &Notification| {
                if flag.swap(false, Ordering::SeqCst) {
                    return Err(SinkError("blip".into()));
                }
                inner.deliver(n)
            })),
        ))
        .unwrap();
        b.upsert_entity(spot("P1", "a")).unwrap();
        b.upsert_entity(spot("P1", "b")).unwrap();
        b.deliver_notifications();
        assert!(q.is_empty());
        b.deliver_notifications();
        let got: Vec<_> = q
            .drain()
            .into_iter()
            .map(|n| n.data[0].attributes["status"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(got, ["a", "b"]);
    }

    #[test]
    fn malformed_subscription_rejected() {
        let b = Broker::new();
        let q = NotificationQueue::new();
        assert!(matches!(
            b.subscribe(Subscription::new("*", q.sink()).id_pattern("[")),
            Err(BrokerError::MalformedSubscription(_))
        ));
        assert!(matches!(
            b.subscribe(Subscription::new("*", NotificationTarget::http("ftp://x"))),
            Err(BrokerError::MalformedSubscription(_))
        ));
    }

    #[test]
    fn journal_replays_after_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.jsonl");
        {
            let b = Broker::open_with_journal(&path, Arc::new(SystemClock)).unwrap();
            b.upsert_entity(spot("P1", "free")).unwrap();
            b.upsert_entity(spot("P2", "free")).unwrap();
            b.update_attributes("P1", patch("status", Attribute::text("occupied"))).unwrap();
            b.delete_entity("P2").unwrap();
        }
        let b = Broker::open_with_journal(&path, Arc::new(SystemClock)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(
            b.get_entity("P1").unwrap().unwrap().attributes["status"].as_str(),
            Some("occupied")
        );
    }

    #[test]
    fn dispatcher_delivers_asynchronously() {
        let b = Arc::new(Broker::new());
        let q = NotificationQueue::new();
        b.subscribe(Subscription::new("ParkingSpot", q.sink())).unwrap();
        let _d = b.start_dispatcher(Duration::from_millis(50));
        b.upsert_entity(spot("P1", "free")).unwrap();
        let n = q.recv_timeout(Duration::from_secs(5)).expect("notification");
        assert_eq!(n.data[0].id, "P1");
    }

    #[test]
    fn concurrent_patches_serialize() {
        let b = Arc::new(Broker::new());
        b.upsert_entity(NgsiEntity::new("C", "Counter")).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let b = Arc::clone(&b);
                std::thread::spawn(move || {
                    for i in 0..50 {
                        b.update_attributes("C", patch(&format!("t{t}"), Attribute::integer(i)))
                            .unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let e = b.get_entity("C").unwrap().unwrap();
        assert_eq!(e.attributes.len(), 8);
        assert!(e.attributes.values().all(|a| a.as_f64() == Some(49.0)));
    }
}
