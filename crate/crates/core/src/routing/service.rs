//! Versioned router handle, HTTP API and HTTP client.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Query as UrlQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router as HttpRouter};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::graph::{build_graph, GraphParams, Overlay, Timetable, TransitGraph};
use super::{exhaustive, plan, Itinerary, Place, PlanRequest, RoutingError};
use crate::gtfs::{load_feed_bytes, read_feed_zip, FeedReloader, GtfsFeed, GtfsRtFeed, GtfsRtLoader};
use crate::net::{encode_component, Client};
use crate::ngsi::parse_iso8601;

/// Where the router takes realtime trip updates from before each plan.
#[derive(Clone, Default)]
pub enum RealtimeSource {
    #[default]
    None,
    Loader(Arc<GtfsRtLoader>),
    /// A `/gtfs-rt` endpoint.
    Url(String),
}

struct Active {
    graph: Arc<TransitGraph>,
    version: u64,
    realtime: Option<Arc<GtfsRtFeed>>,
    overlay: Option<Arc<Overlay>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlanResponse {
    pub version: u64,
    pub itineraries: Vec<Itinerary>,
}

/// Thread-safe router. Plans run against an immutable snapshot, so a reload
/// never mixes graph versions within one query.
pub struct Router {
    params: GraphParams,
    active: RwLock<Arc<Active>>,
    feeds: Mutex<BTreeMap<String, GtfsFeed>>,
    source: RwLock<RealtimeSource>,
    client: Client,
}

fn merge(feeds: &BTreeMap<String, GtfsFeed>) -> Result<GtfsFeed, RoutingError> {
    let mut out = GtfsFeed::default();
    for f in feeds.values() {
        out.agencies.extend(f.agencies.iter().cloned());
        out.stops.extend(f.stops.iter().cloned());
        out.routes.extend(f.routes.iter().cloned());
        out.trips.extend(f.trips.iter().cloned());
        out.stop_times.extend(f.stop_times.iter().cloned());
        out.services.extend(f.services.iter().cloned());
    }
    out.normalize();
    out.validate().map_err(|e| RoutingError::Feed(e.to_string()))?;
    Ok(out)
}

impl Router {
    /// An empty router at version 0.
    pub fn new(params: GraphParams) -> Self {
        Self {
            params,
            active: RwLock::new(Arc::new(Active {
                graph: Arc::new(TransitGraph::empty(params)),
                version: 0,
                realtime: None,
                overlay: None,
            })),
            feeds: Mutex::new(BTreeMap::new()),
            source: RwLock::new(RealtimeSource::None),
            client: Client::default(),
        }
    }

    pub fn from_feed(feed: GtfsFeed, params: GraphParams) -> Result<Self, RoutingError> {
        let r = Self::new(params);
        r.load_feed("default", feed)?;
        Ok(r)
    }

    pub fn version(&self) -> u64 {
        self.active.read().unwrap().version
    }

    pub fn graph(&self) -> Arc<TransitGraph> {
        Arc::clone(&self.active.read().unwrap().graph)
    }

    /// Installs (or replaces) `feed_id` and rebuilds the graph from all
    /// feeds. On error nothing changes.
    pub fn load_feed(&self, feed_id: &str, feed: GtfsFeed) -> Result<u64, RoutingError> {
        let mut feeds = self.feeds.lock().unwrap();
        let mut next = feeds.clone();
        next.insert(feed_id.to_string(), feed);
        let merged = merge(&next)?;
        let graph = Arc::new(build_graph(&merged, self.params)?);
        let mut active = self.active.write().unwrap();
        let version = active.version + 1;
        let overlay = active
            .realtime
            .as_ref()
            .map(|rt| Arc::new(Overlay::build(&graph, rt)));
        *active = Arc::new(Active {
            graph,
            version,
            realtime: active.realtime.clone(),
            overlay,
        });
        *feeds = next;
        log::info!("router graph version {version} active ({} feeds)", feeds.len());
        Ok(version)
    }

    /// Reads and parses the archive at `url`, then installs it.
    pub fn reload_url(&self, feed_id: &str, url: &str) -> Result<u64, RoutingError> {
        let bytes = load_feed_bytes(url).map_err(|e| RoutingError::Feed(e.to_string()))?;
        let feed = read_feed_zip(&bytes).map_err(|e| RoutingError::Feed(e.to_string()))?;
        self.load_feed(feed_id, feed)
    }

    pub fn set_realtime_source(&self, source: RealtimeSource) {
        *self.source.write().unwrap() = source;
    }

    /// Replaces the realtime overlay.
    pub fn apply_realtime(&self, rt: GtfsRtFeed) {
        let mut active = self.active.write().unwrap();
        if active.realtime.as_deref() == Some(&rt) {
            return;
        }
        let overlay = Arc::new(Overlay::build(&active.graph, &rt));
        *active = Arc::new(Active {
            graph: Arc::clone(&active.graph),
            version: active.version,
            realtime: Some(Arc::new(rt)),
            overlay: Some(overlay),
        });
    }

    pub fn clear_realtime(&self) {
        let mut active = self.active.write().unwrap();
        *active = Arc::new(Active {
            graph: Arc::clone(&active.graph),
            version: active.version,
            realtime: None,
            overlay: None,
        });
    }

    fn refresh_realtime(&self) {
        let source = self.source.read().unwrap().clone();
        let rt = match source {
            RealtimeSource::None => return,
            RealtimeSource::Loader(l) => l.current().map(|f| (*f).clone()),
            RealtimeSource::Url(url) => match self.client.get(&url) {
                Ok(r) if r.status == 200 => serde_json::from_slice(&r.body)
                    .map_err(|e| log::warn!("bad GTFS-RT document from {url}: {e}"))
                    .ok(),
                Ok(r) => {
                    log::debug!("GTFS-RT source {url} answered {}", r.status);
                    None
                }
                Err(e) => {
                    log::warn!("GTFS-RT source {url} unreachable: {e}");
                    None
                }
            },
        };
        if let Some(rt) = rt {
            self.apply_realtime(rt);
        }
    }

    fn snapshot(&self) -> Arc<Active> {
        self.refresh_realtime();
        Arc::clone(&self.active.read().unwrap())
    }

    pub fn plan(&self, req: &PlanRequest) -> Result<PlanResponse, RoutingError> {
        let snap = self.snapshot();
        let tt = Timetable::build(&snap.graph, req.depart_after, snap.overlay.as_deref());
        Ok(PlanResponse {
            version: snap.version,
            itineraries: plan(&snap.graph, &tt, req)?,
        })
    }

    /// Brute-force earliest arrival on the same snapshot model as [`plan`].
    pub fn exhaustive_earliest(&self, req: &PlanRequest) -> Option<i64> {
        let snap = self.snapshot();
        let tt = Timetable::build(&snap.graph, req.depart_after, snap.overlay.as_deref());
        exhaustive::earliest_arrival(&snap.graph, &tt, req)
    }

    /// `GET /plan`, `POST /graph/reload`, `GET /graph`.
    pub fn http_router(self: &Arc<Self>) -> HttpRouter {
        HttpRouter::new()
            .route("/plan", get(plan_handler))
            .route("/graph/reload", post(reload_handler))
            .route("/graph", get(graph_handler))
            .with_state(Arc::clone(self))
    }
}

impl FeedReloader for Router {
    fn reload(&self, feed_id: &str, url: &str) -> Result<u64, String> {
        self.reload_url(feed_id, url).map_err(|e| e.to_string())
    }
}

fn error_response(e: &RoutingError) -> Response {
    let status = match e {
        RoutingError::InvalidQuery(_) => StatusCode::BAD_REQUEST,
        RoutingError::Feed(_) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::NOT_FOUND,
    };
    (
        status,
        Json(json!({"error": e.kind(), "description": e.to_string()})),
    )
        .into_response()
}

fn parse_time(s: &str) -> Option<i64> {
    s.parse::<i64>()
        .ok()
        .or_else(|| parse_iso8601(s).map(|t| t.floor() as i64))
}

/// Parses `/plan` query parameters into a request.
pub fn plan_request_from_params(p: &HashMap<String, String>) -> Result<PlanRequest, RoutingError> {
    let bad = |m: &str| RoutingError::InvalidQuery(m.to_string());
    let num = |k: &str| -> Result<Option<f64>, RoutingError> {
        p.get(k)
            .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("{k} must be a number"))))
            .transpose()
    };
    let place = |stop: &str, lat: &str, lon: &str| -> Result<Place, RoutingError> {
        if let Some(s) = p.get(stop) {
            return Ok(Place::stop(s.clone()));
        }
        match (num(lat)?, num(lon)?) {
            (Some(a), Some(b)) => Ok(Place::coord(a, b)),
            _ => Err(bad(&format!("{stop} or {lat}/{lon} required"))),
        }
    };
    let origin = place("fromStop", "fromLat", "fromLon")?;
    let destination = place("toStop", "toLat", "toLon")?;
    let depart = p
        .get("departAfter")
        .ok_or_else(|| bad("departAfter required"))?;
    let depart = parse_time(depart).ok_or_else(|| bad("departAfter must be epoch seconds or ISO 8601"))?;
    let mut req = PlanRequest::new(origin, destination, depart);
    if let Some(w) = num("maxWalk")? {
        req.max_walk_meters = w;
    }
    if let Some(k) = p.get("maxTransfers") {
        req.max_transfers = k.parse().map_err(|_| bad("maxTransfers must be an integer"))?;
    }
    if let Some(n) = p.get("n") {
        req.count = n.parse().map_err(|_| bad("n must be an integer"))?;
    }
    Ok(req)
}

async fn plan_handler(
    State(router): State<Arc<Router>>,
    UrlQuery(params): UrlQuery<HashMap<String, String>>,
) -> Response {
    let req = match plan_request_from_params(&params) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    let result = tokio::task::spawn_blocking(move || router.plan(&req)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(&e),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ReloadBody {
    feed_id: Option<String>,
    url: String,
}

async fn reload_handler(State(router): State<Arc<Router>>, body: String) -> Response {
    let body = body.trim().to_string();
    let (feed_id, url) = match serde_json::from_str::<ReloadBody>(&body) {
        Ok(b) => (b.feed_id.unwrap_or_else(|| b.url.clone()), b.url),
        Err(_) if !body.is_empty() && !body.starts_with('{') => (body.clone(), body),
        Err(e) => return error_response(&RoutingError::InvalidQuery(e.to_string())),
    };
    let result = tokio::task::spawn_blocking(move || router.reload_url(&feed_id, &url)).await;
    match result {
        Ok(Ok(version)) => Json(json!({ "version": version })).into_response(),
        Ok(Err(e)) => error_response(&e),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn graph_handler(State(router): State<Arc<Router>>) -> Response {
    let g = router.graph();
    Json(json!({
        "version": router.version(),
        "stops": g.stops.len(),
        "trips": g.trips.len(),
        "footpaths": g.footpath_count(),
    }))
    .into_response()
}

/// HTTP client for a router served by [`Router::http_router`].
pub struct RemoteRouter {
    base_url: String,
    client: Client,
}

impl RemoteRouter {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client: Client::default(),
        }
    }

    pub fn plan(&self, req: &PlanRequest) -> Result<PlanResponse, RoutingError> {
        let mut q = Vec::new();
        for (prefix, p) in [("from", &req.origin), ("to", &req.destination)] {
            match p {
                Place::Stop { stop } => q.push(format!("{prefix}Stop={}", encode_component(stop))),
                Place::Coord { lat, lon } => {
                    q.push(format!("{prefix}Lat={lat}"));
                    q.push(format!("{prefix}Lon={lon}"));
                }
            }
        }
        q.push(format!("departAfter={}", req.depart_after));
        q.push(format!("maxWalk={}", req.max_walk_meters));
        q.push(format!("maxTransfers={}", req.max_transfers));
        q.push(format!("n={}", req.count));
        let url = format!("{}/plan?{}", self.base_url, q.join("&"));
        let reply = self
            .client
            .get(&url)
            .map_err(|e| RoutingError::Feed(e.to_string()))?;
        if reply.status == 200 {
            return serde_json::from_slice(&reply.body)
                .map_err(|e| RoutingError::Feed(format!("bad plan response: {e}")));
        }
        let v: serde_json::Value = serde_json::from_slice(&reply.body).unwrap_or_default();
        let desc = v["description"].as_str().unwrap_or_default().to_string();
        Err(match v["error"].as_str() {
            Some("unreachable") => RoutingError::Unreachable,
            Some("origin-isolated") => RoutingError::OriginIsolated,
            Some("unknown-stop") => RoutingError::UnknownStop(desc),
            Some("invalid-query") => RoutingError::InvalidQuery(desc),
            _ => RoutingError::Feed(format!("status {}: {}", reply.status, reply.text())),
        })
    }

    pub fn version(&self) -> Result<u64, RoutingError> {
        let url = format!("{}/graph", self.base_url);
        let reply = self
            .client
            .get(&url)
            .map_err(|e| RoutingError::Feed(e.to_string()))?;
        let v: serde_json::Value =
            serde_json::from_slice(&reply.body).map_err(|e| RoutingError::Feed(e.to_string()))?;
        v["version"]
            .as_u64()
            .ok_or_else(|| RoutingError::Feed("missing version".into()))
    }
}

impl FeedReloader for RemoteRouter {
    fn reload(&self, feed_id: &str, url: &str) -> Result<u64, String> {
        let body = json!({ "feedId": feed_id, "url": url }).to_string();
        let endpoint = format!("{}/graph/reload", self.base_url);
        let reply = self
            .client
            .post_json(&endpoint, &body)
            .map_err(|e| e.to_string())?;
        if reply.status != 200 {
            return Err(format!("status {}: {}", reply.status, reply.text()));
        }
        let v: serde_json::Value = serde_json::from_slice(&reply.body).map_err(|e| e.to_string())?;
        v["version"].as_u64().ok_or_else(|| "missing version".to_string())
    }
}
