//! Feed publication and change-driven router reloads.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, UNIX_EPOCH};

use chrono::{DateTime, SecondsFormat};
use serde::Serialize;

use super::GtfsError;
use crate::broker::{
    BrokerError, ContextBroker, Notification, NotificationQueue, NotificationTarget, Query,
    Subscription,
};
use crate::net::Client;
use crate::ngsi::{Attribute, NgsiEntity};

pub const FEED_FILE_TYPE: &str = "GtfsTransitFeedFile";

/// Something that can swap in a new feed version (the routing engine).
pub trait FeedReloader: Send + Sync {
    /// Loads the feed at `url` under `feed_id` and returns the new graph
    /// version. On error the previous graph stays active.
    fn reload(&self, feed_id: &str, url: &str) -> Result<u64, String>;
}

impl<T: FeedReloader + ?Sized> FeedReloader for Arc<T> {
    fn reload(&self, feed_id: &str, url: &str) -> Result<u64, String> {
        (**self).reload(feed_id, url)
    }
}

fn file_path_of(url: &str) -> Option<PathBuf> {
    if let Some(rest) = url.strip_prefix("file://") {
        Some(PathBuf::from(rest))
    } else if url.starts_with("http://") || url.starts_with("https://") {
        None
    } else {
        Some(PathBuf::from(url))
    }
}

/// Reads archive bytes from a `file://` URL, a plain path, or `http(s)://`.
pub fn load_feed_bytes(url: &str) -> Result<Vec<u8>, GtfsError> {
    match file_path_of(url) {
        Some(p) => std::fs::read(&p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                GtfsError::FileMissing(p.display().to_string())
            } else {
                GtfsError::Io(e.to_string())
            }
        }),
        None => Client::new(Duration::from_secs(30))
            .get(url)
            .and_then(|r| r.into_success(url))
            .map(|r| r.body)
            .map_err(|e| GtfsError::Fetch(e.to_string())),
    }
}

/// Upserts a `GtfsTransitFeedFile` pointer entity for a zip on disk (or an
/// http URL). `dateModified` is the file's mtime, or `fallback_now` for
/// remote URLs.
pub fn publish_feed_entity(
    location: &str,
    feed_id: &str,
    broker: &dyn ContextBroker,
    fallback_now: i64,
) -> Result<NgsiEntity, GtfsError> {
    let (url, modified) = match file_path_of(location) {
        Some(p) => {
            let meta = std::fs::metadata(&p)
                .map_err(|_| GtfsError::FileMissing(p.display().to_string()))?;
            if !meta.is_file() {
                return Err(GtfsError::FileMissing(p.display().to_string()));
            }
            std::fs::File::open(&p).map_err(|e| GtfsError::Io(e.to_string()))?;
            let abs = std::fs::canonicalize(&p).map_err(|e| GtfsError::Io(e.to_string()))?;
            let mtime = meta
                .modified()
                .ok()
                .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
                .map(|d| d.as_millis() as i64)
                .unwrap_or(fallback_now * 1000);
            (format!("file://{}", abs.display()), mtime)
        }
        None => (location.to_string(), fallback_now * 1000),
    };
    let stamp = DateTime::from_timestamp_millis(modified)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Millis, true);
    let entity = NgsiEntity::new(feed_id, FEED_FILE_TYPE)
        .with("url", Attribute::text(url))
        .with("dateModified", Attribute::date_time(stamp));
    broker.upsert_entity(entity.clone())?;
    Ok(entity)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "camelCase")]
pub enum ReloadOutcome {
    Reloaded { version: u64 },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ReloadEvent {
    pub feed_id: String,
    pub url: String,
    pub date_modified: String,
    pub outcome: ReloadOutcome,
}

/// Watches `GtfsTransitFeedFile` entities and asks the router to reload when
/// a feed's `dateModified` changes.
pub struct GtfsFetcher {
    reloader: Arc<dyn FeedReloader>,
    queue: NotificationQueue,
    seen: Mutex<BTreeMap<String, String>>,
    events: Mutex<Vec<ReloadEvent>>,
    subscription_id: Mutex<Option<String>>,
}

impl GtfsFetcher {
    pub fn new(reloader: Arc<dyn FeedReloader>) -> Self {
        Self {
            reloader,
            queue: NotificationQueue::new(),
            seen: Mutex::new(BTreeMap::new()),
            events: Mutex::new(Vec::new()),
            subscription_id: Mutex::new(None),
        }
    }

    /// The in-process sink this fetcher reads notifications from.
    pub fn queue(&self) -> &NotificationQueue {
        &self.queue
    }

    /// Subscribes (to `target`, or the internal queue) and processes the
    /// feeds already present in the broker.
    pub fn attach(
        &self,
        broker: &dyn ContextBroker,
        target: Option<NotificationTarget>,
    ) -> Result<Vec<ReloadEvent>, BrokerError> {
        let target = target.unwrap_or_else(|| self.queue.sink());
        let id = broker.subscribe(Subscription::new(FEED_FILE_TYPE, target).watch(["dateModified", "url"]))?;
        *self.subscription_id.lock().unwrap() = Some(id);
        self.sync(broker)
    }

    pub fn subscription_id(&self) -> Option<String> {
        self.subscription_id.lock().unwrap().clone()
    }

    /// Polls the broker for all feed pointers and reloads changed ones.
    pub fn sync(&self, broker: &dyn ContextBroker) -> Result<Vec<ReloadEvent>, BrokerError> {
        let feeds = broker.query_entities(&Query::of_type(FEED_FILE_TYPE))?;
        Ok(self.handle_entities(&feeds))
    }

    /// Handles every notification currently queued.
    pub fn process_pending(&self) -> Vec<ReloadEvent> {
        self.queue
            .drain()
            .iter()
            .flat_map(|n| self.handle_notification(n))
            .collect()
    }

    /// Waits up to `timeout` for one notification and handles it.
    pub fn process_next(&self, timeout: Duration) -> Vec<ReloadEvent> {
        match self.queue.recv_timeout(timeout) {
            Some(n) => {
                let mut out = self.handle_notification(&n);
                out.extend(self.process_pending());
                out
            }
            None => Vec::new(),
        }
    }

    pub fn handle_notification(&self, n: &Notification) -> Vec<ReloadEvent> {
        self.handle_entities(&n.data)
    }

    fn handle_entities(&self, entities: &[NgsiEntity]) -> Vec<ReloadEvent> {
        let mut out = Vec::new();
        for e in entities.iter().filter(|e| e.entity_type == FEED_FILE_TYPE) {
            let Some(url) = e.attr("url").and_then(|a| a.as_str()) else {
                continue;
            };
            let stamp = e
                .attr("dateModified")
                .and_then(|a| a.as_str())
                .unwrap_or_default()
                .to_string();
            let key = format!("{stamp}|{url}");
            if self.seen.lock().unwrap().get(&e.id) == Some(&key) {
                continue;
            }
            let outcome = match self.reloader.reload(&e.id, url) {
                Ok(version) => {
                    self.seen.lock().unwrap().insert(e.id.clone(), key);
                    ReloadOutcome::Reloaded { version }
                }
                Err(error) => {
                    log::warn!("reload of feed {} from {url} failed: {error}", e.id);
                    self.seen.lock().unwrap().insert(e.id.clone(), key);
                    ReloadOutcome::Failed { error }
                }
            };
            let ev = ReloadEvent {
                feed_id: e.id.clone(),
                url: url.to_string(),
                date_modified: stamp,
                outcome,
            };
            self.events.lock().unwrap().push(ev.clone());
            out.push(ev);
        }
        out
    }

    pub fn events(&self) -> Vec<ReloadEvent> {
        self.events.lock().unwrap().clone()
    }
}
