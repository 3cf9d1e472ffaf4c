use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::de::Deserializer;
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::Client;
use crate::ngsi::NgsiEntity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Notification {
    pub subscription_id: String,
    /// RFC 3339 timestamp of the commit (or of the coalesced delivery).
    pub issued_at: String,
    pub data: Vec<NgsiEntity>,
}

#[derive(Debug, Clone, Error)]
#[error("sink unreachable: {0}")]
pub struct SinkError(pub String);

/// Receives notifications for one subscription.
pub trait NotificationSink: Send + Sync {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError>;
}

/// POSTs the notification JSON to a callback URL.
pub struct HttpSink {
    url: String,
    client: Client,
}

impl HttpSink {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            client: Client::new(Duration::from_secs(5)),
        }
    }
}

impl NotificationSink for HttpSink {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError> {
        let body = serde_json::to_string(notification).map_err(|e| SinkError(e.to_string()))?;
        let reply = self
            .client
            .post_json(&self.url, &body)
            .map_err(|e| SinkError(e.to_string()))?;
        if reply.is_success() {
            Ok(())
        } else {
            Err(SinkError(format!("{} answered {}", self.url, reply.status)))
        }
    }
}

impl NotificationSink for std::sync::mpsc::Sender<Notification> {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError> {
        self.send(notification.clone())
            .map_err(|_| SinkError("receiver dropped".into()))
    }
}

/// Adapts a closure into a sink.
pub struct FnSink<F>(pub F);

impl<F> NotificationSink for FnSink<F>
where
    F: Fn(&Notification) -> Result<(), SinkError> + Send + Sync,
{
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError> {
        (self.0)(notification)
    }
}

/// In-process FIFO queue sink, cloneable so the consumer keeps a handle.
#[derive(Clone, Default)]
pub struct NotificationQueue {
    inner: Arc<(Mutex<VecDeque<Notification>>, Condvar)>,
}

impl NotificationQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.0.lock().expect("queue lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn drain(&self) -> Vec<Notification> {
        self.inner.0.lock().expect("queue lock").drain(..).collect()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Notification> {
        let (lock, cv) = &*self.inner;
        let guard = lock.lock().expect("queue lock");
        let (mut guard, _) = cv
            .wait_timeout_while(guard, timeout, |q| q.is_empty())
            .expect("queue lock");
        guard.pop_front()
    }

    pub fn sink(&self) -> NotificationTarget {
        NotificationTarget::Sink(Arc::new(self.clone()))
    }
}

impl NotificationSink for NotificationQueue {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError> {
        let (lock, cv) = &*self.inner;
        lock.lock().expect("queue lock").push_back(notification.clone());
        cv.notify_all();
        Ok(())
    }
}

/// Where notifications go: an HTTP callback or an in-process sink.
/// Only the HTTP form has a JSON representation (`{"url": ...}`).
#[derive(Clone)]
pub enum NotificationTarget {
    Http { url: String },
    Sink(Arc<dyn NotificationSink>),
}

impl NotificationTarget {
    pub fn http(url: impl Into<String>) -> Self {
        NotificationTarget::Http { url: url.into() }
    }

    pub fn sink(sink: impl NotificationSink + 'static) -> Self {
        NotificationTarget::Sink(Arc::new(sink))
    }

    pub(crate) fn resolve(&self) -> Arc<dyn NotificationSink> {
        match self {
            NotificationTarget::Http { url } => Arc::new(HttpSink::new(url.clone())),
            NotificationTarget::Sink(s) => Arc::clone(s),
        }
    }
}

impl fmt::Debug for NotificationTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NotificationTarget::Http { url } => f.debug_struct("Http").field("url", url).finish(),
            NotificationTarget::Sink(_) => f.write_str("Sink(..)"),
        }
    }
}

impl Serialize for NotificationTarget {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        match self {
            NotificationTarget::Http { url } => map.serialize_entry("url", url)?,
            NotificationTarget::Sink(_) => map.serialize_entry("sink", "in-process")?,
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for NotificationTarget {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            url: String,
        }
        let w = Wire::deserialize(deserializer)?;
        Ok(NotificationTarget::Http { url: w.url })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubscriptionStatus {
    #[default]
    Active,
    Failed,
}

fn wildcard() -> String {
    "*".to_string()
}

fn any_id() -> String {
    ".*".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Subscription {
    #[serde(default)]
    pub id: String,
    #[serde(default = "wildcard")]
    pub entity_type_filter: String,
    #[serde(default = "any_id")]
    pub id_pattern: String,
    #[serde(default)]
    pub watched_attributes: BTreeSet<String>,
    pub target: NotificationTarget,
    #[serde(default)]
    pub throttling_seconds: u64,
    #[serde(default)]
    pub status: SubscriptionStatus,
}

impl Subscription {
    pub fn new(entity_type_filter: impl Into<String>, target: NotificationTarget) -> Self {
        Self {
            id: String::new(),
            entity_type_filter: entity_type_filter.into(),
            id_pattern: any_id(),
            watched_attributes: BTreeSet::new(),
            target,
            throttling_seconds: 0,
            status: SubscriptionStatus::Active,
        }
    }

    pub fn id_pattern(mut self, pattern: impl Into<String>) -> Self {
        self.id_pattern = pattern.into();
        self
    }

    pub fn watch<I, S>(mut self, attrs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.watched_attributes = attrs.into_iter().map(Into::into).collect();
        self
    }

    pub fn throttling(mut self, seconds: u64) -> Self {
        self.throttling_seconds = seconds;
        self
    }

    pub(crate) fn type_matches(&self, entity_type: &str) -> bool {
        self.entity_type_filter == "*" || self.entity_type_filter == entity_type
    }

    pub(crate) fn watches<'a>(&self, mut changed: impl Iterator<Item = &'a String>) -> bool {
        self.watched_attributes.is_empty() || changed.any(|a| self.watched_attributes.contains(a))
    }
}
