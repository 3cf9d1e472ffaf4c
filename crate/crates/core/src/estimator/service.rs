use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query as UrlQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::model::{infer, train, ForecastModel, Prediction, TrainingConfig};
use super::store::{Sample, SeriesKey, TimeSeriesStore};
use super::{EstimatorError, Profile};
use crate::broker::{
    BrokerError, ContextBroker, Notification, NotificationSink, NotificationTarget, Query,
    SinkError, Subscription,
};
use crate::clock::SharedClock;
use crate::net::Client;
use crate::ngsi::{format_iso8601, parse_iso8601, Attribute, NgsiEntity};

const TIME_ATTRIBUTES: [&str; 3] = ["dateObserved", "observedAt", "dateModified"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestReport {
    pub appended: usize,
    pub non_numeric: usize,
    pub malformed: usize,
}

impl IngestReport {
    fn merge(&mut self, o: &IngestReport) {
        self.appended += o.appended;
        self.non_numeric += o.non_numeric;
        self.malformed += o.malformed;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainOutcome {
    Trained(Arc<ForecastModel>),
    BelowMinSamples { samples: usize },
    Failed(EstimatorError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SeriesStats {
    pub train_invocations: u64,
    pub trained: u64,
    pub skipped: u64,
    pub train_failures: u64,
    pub inferences: u64,
    pub infer_failures: u64,
    pub writebacks: u64,
    pub writeback_failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct EstimatorStats {
    pub ingested: IngestReport,
    pub series: BTreeMap<String, SeriesStats>,
}

#[derive(Debug, Default)]
struct Schedule {
    next_train: Option<i64>,
    next_infer: Option<i64>,
}

/// One estimator instance (parking, traffic or noise profile).
pub struct Estimator {
    config: TrainingConfig,
    profile: Profile,
    clock: SharedClock,
    store: TimeSeriesStore,
    models: RwLock<BTreeMap<SeriesKey, Arc<ForecastModel>>>,
    broker: RwLock<Option<Arc<dyn ContextBroker>>>,
    writeback: AtomicBool,
    stats: Mutex<EstimatorStats>,
    schedule: Mutex<Schedule>,
    client: Client,
}

fn observed_time(e: &NgsiEntity) -> Option<i64> {
    TIME_ATTRIBUTES
        .iter()
        .find_map(|n| e.attr(n).and_then(|a| a.as_str()).and_then(parse_iso8601))
        .map(|t| t.floor() as i64)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct HistoricalRecord {
    entity_id: String,
    attr: String,
    t: Value,
    value: Value,
}

impl Estimator {
    pub fn new(config: TrainingConfig, profile: Profile, clock: SharedClock) -> Result<Arc<Self>, EstimatorError> {
        config.validate()?;
        Ok(Arc::new(Self {
            config,
            profile,
            clock,
            store: TimeSeriesStore::new(),
            models: RwLock::new(BTreeMap::new()),
            broker: RwLock::new(None),
            writeback: AtomicBool::new(false),
            stats: Mutex::new(EstimatorStats::default()),
            schedule: Mutex::new(Schedule::default()),
            client: Client::default(),
        }))
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn store(&self) -> &TimeSeriesStore {
        &self.store
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    /// Broker used for snapshot/subscription ingestion and, when
    /// `writeback` is set, prediction writeback.
    pub fn set_broker(&self, broker: Arc<dyn ContextBroker>, writeback: bool) {
        *self.broker.write().unwrap() = Some(broker);
        self.writeback.store(writeback, Ordering::SeqCst);
    }

    pub fn key(&self, entity_id: &str) -> SeriesKey {
        SeriesKey::new(entity_id, self.profile.attribute.clone())
    }

    fn record_ingest(&self, r: &IngestReport) {
        self.stats.lock().unwrap().ingested.merge(r);
    }

    fn with_series_stats(&self, key: &SeriesKey, f: impl FnOnce(&mut SeriesStats)) {
        f(self.stats.lock().unwrap().series.entry(key.to_string()).or_default());
    }

    /// Bulk-appends JSON-lines records `{entityId, attr, t, value}`; `t` is
    /// epoch seconds or an ISO 8601 string.
    pub fn ingest_historical_reader(&self, reader: impl BufRead) -> IngestReport {
        let mut report = IngestReport::default();
        let mut batches: BTreeMap<SeriesKey, Vec<Sample>> = BTreeMap::new();
        for line in reader.lines() {
            let Ok(line) = line else {
                report.malformed += 1;
                continue;
            };
            if line.trim().is_empty() {
                continue;
            }
            let Ok(rec) = serde_json::from_str::<HistoricalRecord>(&line) else {
                report.malformed += 1;
                continue;
            };
            let t = match &rec.t {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => parse_iso8601(s),
                _ => None,
            };
            let Some(t) = t else {
                report.malformed += 1;
                continue;
            };
            let Some(v) = rec.value.as_f64() else {
                report.non_numeric += 1;
                continue;
            };
            batches
                .entry(SeriesKey::new(rec.entity_id, rec.attr))
                .or_default()
                .push(Sample {
                    t: t.floor() as i64,
                    value: v,
                });
            report.appended += 1;
        }
        for (k, v) in batches {
            self.store.append_many(&k, v);
        }
        self.record_ingest(&report);
        report
    }

    /// Historical ingestion from a file path or `http(s)://` endpoint.
    pub fn ingest_historical(&self, source: &str) -> Result<IngestReport, EstimatorError> {
        if source.starts_with("http://") || source.starts_with("https://") {
            let reply = self
                .client
                .get(source)
                .and_then(|r| r.into_success(source))
                .map_err(|e| EstimatorError::SourceUnreachable(e.to_string()))?;
            Ok(self.ingest_historical_reader(&reply.body[..]))
        } else {
            let path = source.strip_prefix("file://").unwrap_or(source);
            let f = std::fs::File::open(path)
                .map_err(|e| EstimatorError::SourceUnreachable(format!("{path}: {e}")))?;
            Ok(self.ingest_historical_reader(std::io::BufReader::new(f)))
        }
    }

    /// Appends one sample from an entity of the profile type, timestamped by
    /// its observation attribute, else `fallback_t`, else the clock.
    pub fn ingest_entity(&self, e: &NgsiEntity, fallback_t: Option<i64>) -> IngestReport {
        let mut r = IngestReport::default();
        if e.entity_type != self.profile.entity_type {
            return r;
        }
        match e.attr(&self.profile.attribute) {
            None => {}
            Some(a) => match a.as_f64() {
                Some(v) => {
                    let t = observed_time(e)
                        .or(fallback_t)
                        .unwrap_or_else(|| self.clock.now());
                    self.store.append(&self.key(&e.id), Sample { t, value: v });
                    r.appended = 1;
                }
                None => r.non_numeric = 1,
            },
        }
        r
    }

    fn ingest_entities(&self, entities: &[NgsiEntity], fallback_t: Option<i64>) -> IngestReport {
        let mut r = IngestReport::default();
        for e in entities {
            r.merge(&self.ingest_entity(e, fallback_t));
        }
        self.record_ingest(&r);
        r
    }

    fn broker(&self) -> Option<Arc<dyn ContextBroker>> {
        self.broker.read().unwrap().clone()
    }

    /// One query: one sample per matching entity.
    pub fn ingest_snapshot(&self) -> Result<IngestReport, EstimatorError> {
        let broker = self
            .broker()
            .ok_or_else(|| EstimatorError::SourceUnreachable("no broker configured".into()))?;
        let ents = broker
            .query_entities(&Query::of_type(self.profile.entity_type.clone()))
            .map_err(|e| EstimatorError::SourceUnreachable(e.to_string()))?;
        Ok(self.ingest_entities(&ents, None))
    }

    /// Subscribes to the profile attribute; notifications append samples.
    /// `target` replaces the in-process sink (e.g. an HTTP callback).
    pub fn subscribe(self: &Arc<Self>, target: Option<NotificationTarget>) -> Result<String, EstimatorError> {
        let broker = self
            .broker()
            .ok_or_else(|| EstimatorError::SourceUnreachable("no broker configured".into()))?;
        let target = target
            .unwrap_or_else(|| NotificationTarget::Sink(Arc::clone(self) as Arc<dyn NotificationSink>));
        broker
            .subscribe(
                Subscription::new(self.profile.entity_type.clone(), target)
                    .watch([self.profile.attribute.clone()]),
            )
            .map_err(|e| EstimatorError::SourceUnreachable(e.to_string()))
    }

    /// Keys of series that can be trained (predictions excluded).
    pub fn series_keys(&self) -> Vec<SeriesKey> {
        self.store
            .keys()
            .into_iter()
            .filter(|k| !k.attribute.ends_with(".predicted"))
            .collect()
    }

    pub fn model(&self, key: &SeriesKey) -> Option<Arc<ForecastModel>> {
        self.models.read().unwrap().get(key).cloned()
    }

    pub fn models(&self) -> Vec<Arc<ForecastModel>> {
        self.models.read().unwrap().values().cloned().collect()
    }

    pub fn stats(&self) -> EstimatorStats {
        self.stats.lock().unwrap().clone()
    }

    pub fn series_stats(&self, key: &SeriesKey) -> SeriesStats {
        self.stats
            .lock()
            .unwrap()
            .series
            .get(&key.to_string())
            .cloned()
            .unwrap_or_default()
    }

    /// Trains one series with the instance config.
    pub fn train_key(&self, key: &SeriesKey) -> TrainOutcome {
        self.train_key_with(key, &self.config)
    }

    pub fn train_key_with(&self, key: &SeriesKey, config: &TrainingConfig) -> TrainOutcome {
        let now = self.clock.now();
        let total = self.store.len_of(key);
        let window = self.store.window(key, config.window_size);
        let outcome = match train(key, &window, total, config, now) {
            Ok(Some(m)) => {
                let m = Arc::new(m);
                self.models.write().unwrap().insert(key.clone(), Arc::clone(&m));
                TrainOutcome::Trained(m)
            }
            Ok(None) => TrainOutcome::BelowMinSamples { samples: total },
            Err(e) => {
                log::warn!("training {key} failed: {e}; keeping previous model");
                TrainOutcome::Failed(e)
            }
        };
        self.with_series_stats(key, |s| {
            s.train_invocations += 1;
            match &outcome {
                TrainOutcome::Trained(_) => s.trained += 1,
                TrainOutcome::BelowMinSamples { .. } => s.skipped += 1,
                TrainOutcome::Failed(_) => s.train_failures += 1,
            }
        });
        outcome
    }

    pub fn train_all(&self) -> Vec<(SeriesKey, TrainOutcome)> {
        self.series_keys()
            .into_iter()
            .map(|k| {
                let o = self.train_key(&k);
                (k, o)
            })
            .collect()
    }

    /// Infers for one trained series, stores the prediction under
    /// `<attr>.predicted` and writes it back when enabled.
    pub fn infer_key(&self, key: &SeriesKey) -> Result<Prediction, EstimatorError> {
        if !self.store.contains(key) {
            return Err(EstimatorError::UnknownSeries(key.to_string()));
        }
        let model = self
            .model(key)
            .ok_or_else(|| EstimatorError::ModelNotTrained(key.to_string()))?;
        let recent = self.store.window(key, model.algorithm.context().max(1));
        let now = self.clock.now();
        let result = infer(&model, &recent, now, self.config.horizon_seconds);
        let p = match result {
            Ok(p) => p,
            Err(e) => {
                self.with_series_stats(key, |s| s.infer_failures += 1);
                return Err(e);
            }
        };
        self.store.append(
            &key.predicted(),
            Sample {
                t: p.horizon_end,
                value: p.value,
            },
        );
        self.with_series_stats(key, |s| s.inferences += 1);
        if self.writeback.load(Ordering::SeqCst) {
            match self.write_back(&p) {
                Ok(()) => self.with_series_stats(key, |s| s.writebacks += 1),
                Err(e) => {
                    log::warn!("writeback for {key} failed: {e}");
                    self.with_series_stats(key, |s| s.writeback_failures += 1);
                }
            }
        }
        Ok(p)
    }

    pub fn infer_all(&self) -> Vec<(SeriesKey, Result<Prediction, EstimatorError>)> {
        let keys: Vec<SeriesKey> = self.models.read().unwrap().keys().cloned().collect();
        keys.into_iter()
            .map(|k| {
                let r = self.infer_key(&k);
                (k, r)
            })
            .collect()
    }

    /// Patches `<attribute>Forecast` on the source entity.
    pub fn write_back(&self, p: &Prediction) -> Result<(), EstimatorError> {
        let broker = self
            .broker()
            .ok_or_else(|| EstimatorError::Writeback("no broker configured".into()))?;
        let attr = Attribute::number(p.value)
            .with_metadata("horizonStart", format_iso8601(p.horizon_start))
            .with_metadata("horizonEnd", format_iso8601(p.horizon_end))
            .with_metadata("issuedAt", format_iso8601(p.issued_at));
        let mut patch = BTreeMap::new();
        patch.insert(format!("{}Forecast", p.attribute_name), attr);
        match broker.update_attributes(&p.entity_id, patch) {
            Ok(_) => Ok(()),
            Err(BrokerError::NotFound(id)) => Err(EstimatorError::Writeback(format!("entity {id} not found"))),
            Err(e) => Err(EstimatorError::Writeback(e.to_string())),
        }
    }

    /// Arms the schedule: training and inference are both first due at `now`.
    pub fn start_schedule(&self, now: i64) {
        let mut s = self.schedule.lock().unwrap();
        s.next_train = Some(now);
        s.next_infer = Some(now);
    }

    fn due_times(&self) -> (i64, i64) {
        let mut s = self.schedule.lock().unwrap();
        let now = self.clock.now();
        let t = *s.next_train.get_or_insert(now);
        let i = *s.next_infer.get_or_insert(now);
        (t, i)
    }

    /// Advances a simulated clock through `[now, now + seconds)`, firing every
    /// due train and inference tick exactly once, training first when both
    /// fall on the same instant. The clock must be settable via `set_time`.
    pub fn run_for(&self, seconds: i64, set_time: impl Fn(i64)) {
        let end = self.clock.now() + seconds;
        loop {
            let (t, i) = self.due_times();
            let next = t.min(i);
            if next >= end {
                break;
            }
            set_time(next);
            if t == next {
                self.train_all();
                self.schedule.lock().unwrap().next_train = Some(t + self.config.retrain_period_seconds);
            }
            if i == next {
                self.infer_all();
                self.schedule.lock().unwrap().next_infer = Some(i + self.config.inference_period_seconds);
            }
        }
        set_time(end);
    }

    /// Real-time tick: fires each overdue job once and moves its next due
    /// time past `now`, so missed ticks coalesce.
    pub fn tick(&self) {
        let now = self.clock.now();
        let (t, i) = self.due_times();
        let advance = |due: i64, period: i64| due + ((now - due) / period + 1) * period;
        if now >= t {
            self.train_all();
            self.schedule.lock().unwrap().next_train = Some(advance(t, self.config.retrain_period_seconds));
        }
        if now >= i {
            self.infer_all();
            self.schedule.lock().unwrap().next_infer = Some(advance(i, self.config.inference_period_seconds));
        }
    }

    /// Runs [`Estimator::tick`] on a background thread every `poll`.
    pub fn spawn_scheduler(self: &Arc<Self>, poll: Duration) -> SchedulerHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let me = Arc::clone(self);
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                me.tick();
                std::thread::park_timeout(poll);
            }
        });
        SchedulerHandle {
            stop,
            thread: Some(thread),
        }
    }

    /// `GET /series/{entityId}/{attr}`, `POST /predict/{entityId}/{attr}`,
    /// `GET /models`, `GET /stats`.
    pub fn http_router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/series/{entity_id}/{attr}", get(series_handler))
            .route("/predict/{entity_id}/{attr}", post(predict_handler))
            .route("/models", get(models_handler))
            .route("/stats", get(stats_handler))
            .with_state(Arc::clone(self))
    }
}

impl NotificationSink for Estimator {
    fn deliver(&self, n: &Notification) -> Result<(), SinkError> {
        let issued = parse_iso8601(&n.issued_at).map(|t| t.floor() as i64);
        self.ingest_entities(&n.data, issued);
        Ok(())
    }
}

pub struct SchedulerHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for SchedulerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            t.thread().unpark();
            let _ = t.join();
        }
    }
}

fn api_error(status: StatusCode, e: &EstimatorError) -> Response {
    let kind = match e {
        EstimatorError::UnknownSeries(_) => "unknown-series",
        EstimatorError::ModelNotTrained(_) => "model-not-trained",
        EstimatorError::InsufficientContext { .. } => "insufficient-context",
        _ => "error",
    };
    (status, Json(json!({"error": kind, "description": e.to_string()}))).into_response()
}

async fn series_handler(
    State(est): State<Arc<Estimator>>,
    UrlPath((entity_id, attr)): UrlPath<(String, String)>,
    UrlQuery(q): UrlQuery<HashMap<String, String>>,
) -> Response {
    let bound = |k: &str| -> Result<Option<i64>, ()> {
        match q.get(k) {
            None => Ok(None),
            Some(s) => s
                .parse::<i64>()
                .ok()
                .or_else(|| parse_iso8601(s).map(|t| t.floor() as i64))
                .map(Some)
                .ok_or(()),
        }
    };
    let (Ok(from), Ok(to)) = (bound("from"), bound("to")) else {
        return (
            StatusCode::BAD_REQUEST,
            Json(json!({"error": "bad-range", "description": "from/to must be epoch seconds or ISO 8601"})),
        )
            .into_response();
    };
    let key = SeriesKey::new(entity_id, attr);
    match est.store.range(&key, from, to) {
        Some(v) => Json(v).into_response(),
        None => api_error(StatusCode::NOT_FOUND, &EstimatorError::UnknownSeries(key.to_string())),
    }
}

async fn predict_handler(
    State(est): State<Arc<Estimator>>,
    UrlPath((entity_id, attr)): UrlPath<(String, String)>,
) -> Response {
    let key = SeriesKey::new(entity_id, attr);
    let result = tokio::task::spawn_blocking(move || est.infer_key(&key)).await;
    match result {
        Ok(Ok(p)) => Json(p).into_response(),
        Ok(Err(e @ EstimatorError::UnknownSeries(_))) => api_error(StatusCode::NOT_FOUND, &e),
        Ok(Err(e @ EstimatorError::ModelNotTrained(_))) => api_error(StatusCode::CONFLICT, &e),
        Ok(Err(e)) => api_error(StatusCode::UNPROCESSABLE_ENTITY, &e),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn models_handler(State(est): State<Arc<Estimator>>) -> Response {
    let models: Vec<ForecastModel> = est.models().iter().map(|m| (**m).clone()).collect();
    Json(models).into_response()
}

async fn stats_handler(State(est): State<Arc<Estimator>>) -> Response {
    Json(est.stats()).into_response()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::Broker;
    use crate::clock::{Clock, SimClock};

    fn estimator(clock: &SimClock) -> Arc<Estimator> {
        Estimator::new(TrainingConfig::default(), Profile::parking(), Arc::new(clock.clone())).unwrap()
    }

    fn backfill(est: &Estimator, id: &str, n: usize, end: i64) {
        let key = est.key(id);
        est.store().append_many(
            &key,
            (0..n).map(|i| Sample {
                t: end - ((n - i) as i64) * 900,
                value: 50.0 + 10.0 * ((i as f64) * 0.3).sin() + (i % 3) as f64,
            }),
        );
    }

    #[test]
    fn schedule_counts_over_one_day() {
        let clock = SimClock::new(1_000_000);
        let est = estimator(&clock);
        backfill(&est, "p1", 2000, clock.now());
        backfill(&est, "p2", 999, clock.now());
        est.start_schedule(clock.now());
        est.run_for(86_400, |t| clock.set(t));
        let s1 = est.series_stats(&est.key("p1"));
        assert_eq!((s1.train_invocations, s1.trained, s1.inferences), (1, 1, 96));
        let s2 = est.series_stats(&est.key("p2"));
        assert_eq!((s2.skipped, s2.trained, s2.inferences), (1, 0, 0));
        assert!(est.model(&est.key("p2")).is_none());
        assert_eq!(clock.now(), 1_000_000 + 86_400);
        est.run_for(2 * 86_400, |t| clock.set(t));
        assert_eq!(est.series_stats(&est.key("p1")).train_invocations, 3);
    }

    #[test]
    fn one_hour_is_four_inferences() {
        let clock = SimClock::new(0);
        let est = estimator(&clock);
        backfill(&est, "p1", 1000, 0);
        est.start_schedule(0);
        est.run_for(3600, |t| clock.set(t));
        assert_eq!(est.series_stats(&est.key("p1")).inferences, 4);
    }

    #[test]
    fn tick_coalesces_missed_periods() {
        let clock = SimClock::new(0);
        let est = estimator(&clock);
        backfill(&est, "p1", 1000, 0);
        est.start_schedule(0);
        est.tick();
        clock.set(10 * 900 + 5);
        est.tick();
        est.tick();
        assert_eq!(est.series_stats(&est.key("p1")).inferences, 2);
        clock.set(11 * 900);
        est.tick();
        assert_eq!(est.series_stats(&est.key("p1")).inferences, 3);
    }

    #[test]
    fn historical_jsonl() {
        let clock = SimClock::new(0);
        let est = estimator(&clock);
        let text = "{\"entityId\":\"a\",\"attr\":\"availableSpotNumber\",\"t\":20,\"value\":3}\n\
                    {\"entityId\":\"a\",\"attr\":\"availableSpotNumber\",\"t\":\"1970-01-01T00:00:10Z\",\"value\":2}\n\
                    {\"entityId\":\"a\",\"attr\":\"availableSpotNumber\",\"t\":30,\"value\":\"x\"}\n\
                    not json\n";
        let r = est.ingest_historical_reader(text.as_bytes());
        assert_eq!(r, IngestReport { appended: 2, non_numeric: 1, malformed: 1 });
        let s = est.store().range(&est.key("a"), None, None).unwrap();
        assert_eq!(s.iter().map(|x| x.t).collect::<Vec<_>>(), [10, 20]);
    }

    #[test]
    fn subscription_and_writeback() {
        let clock = SimClock::new(1_700_000_000);
        let broker = Arc::new(Broker::with_clock(Arc::new(clock.clone())));
        let est = estimator(&clock);
        est.set_broker(broker.clone(), true);
        est.subscribe(None).unwrap();
        broker
            .upsert_entity(
                NgsiEntity::new("p1", "OnStreetParking")
                    .with("totalSpotNumber", Attribute::integer(100))
                    .with("availableSpotNumber", Attribute::integer(40)),
            )
            .unwrap();
        for i in 0..50 {
            clock.advance(60);
            let mut patch = BTreeMap::new();
            patch.insert("availableSpotNumber".into(), Attribute::integer(40 + i % 5));
            broker.update_attributes("p1", patch).unwrap();
            broker.deliver_notifications();
        }
        assert_eq!(est.store().len_of(&est.key("p1")), 51);

        backfill(&est, "p1", 1000, 1_700_000_000);
        assert!(matches!(est.train_key(&est.key("p1")), TrainOutcome::Trained(_)));
        let p = est.infer_key(&est.key("p1")).unwrap();
        let e = broker.get_entity("p1").unwrap().unwrap();
        let f = e.attr("availableSpotNumberForecast").unwrap();
        assert_eq!(f.as_f64(), Some(p.value));
        assert!(f.metadata.contains_key("horizonStart"));
        assert_eq!(e.attr("availableSpotNumber").unwrap().as_f64(), Some(44.0));

        broker.delete_entity("p1").unwrap();
        clock.advance(900);
        est.infer_key(&est.key("p1")).unwrap();
        assert_eq!(est.series_stats(&est.key("p1")).writeback_failures, 1);
        assert_eq!(est.store().len_of(&est.key("p1").predicted()), 2);
    }

    #[test]
    fn predict_errors() {
        let clock = SimClock::new(0);
        let est = estimator(&clock);
        assert!(matches!(est.infer_key(&est.key("nope")), Err(EstimatorError::UnknownSeries(_))));
        backfill(&est, "p1", 10, 0);
        assert!(matches!(est.infer_key(&est.key("p1")), Err(EstimatorError::ModelNotTrained(_))));
    }
}
