//! HTTP facade for the broker and a client speaking the same wire format.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::extract::{Path, Query as QueryParams, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde_json::json;

use super::{
    parse_q, Broker, BrokerError, ContextBroker, Notification, NotificationSink,
    NotificationTarget, Query, Subscription, UpsertOutcome,
};
use crate::net::{encode_component, Client, HttpServer};
use crate::ngsi::{Attribute, NgsiEntity};

fn error_response(err: BrokerError) -> Response {
    let (status, kind) = match &err {
        BrokerError::InvalidEntity(_) => (StatusCode::BAD_REQUEST, "invalid-entity"),
        BrokerError::NotFound(_) => (StatusCode::NOT_FOUND, "not-found"),
        BrokerError::MalformedPattern(_) => (StatusCode::BAD_REQUEST, "malformed-pattern"),
        BrokerError::MalformedQuery(_) => (StatusCode::BAD_REQUEST, "malformed-query"),
        BrokerError::TypeMismatch(_) => (StatusCode::BAD_REQUEST, "type-mismatch"),
        BrokerError::MalformedSubscription(_) => {
            (StatusCode::BAD_REQUEST, "malformed-subscription")
        }
        BrokerError::UnknownSubscription(_) => (StatusCode::NOT_FOUND, "unknown-subscription"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    };
    (
        status,
        Json(json!({"error": kind, "description": err.to_string()})),
    )
        .into_response()
}

fn bad_body(msg: String) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(json!({"error": "parse-error", "description": msg})),
    )
        .into_response()
}

async fn post_entity(State(b): State<Arc<Broker>>, body: String) -> Response {
    let entity: NgsiEntity = match serde_json::from_str(&body) {
        Ok(e) => e,
        Err(e) => return bad_body(e.to_string()),
    };
    match b.upsert_entity(entity) {
        Ok(UpsertOutcome::Created) => StatusCode::CREATED.into_response(),
        Ok(UpsertOutcome::Updated) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error_response(e),
    }
}

async fn list_entities(
    State(b): State<Arc<Broker>>,
    QueryParams(params): QueryParams<HashMap<String, String>>,
) -> Response {
    let mut query = Query::all();
    query.entity_type = params.get("type").filter(|s| !s.is_empty()).cloned();
    query.id_pattern = params.get("idPattern").filter(|s| !s.is_empty()).cloned();
    if let Some(q) = params.get("q") {
        match parse_q(q) {
            Ok(f) => query.filters = f,
            Err(e) => return error_response(e),
        }
    }
    match b.query_entities(&query) {
        Ok(list) => Json(list).into_response(),
        Err(e) => error_response(e),
    }
}

async fn get_entity(State(b): State<Arc<Broker>>, Path(id): Path<String>) -> Response {
    match b.get_entity(&id) {
        Ok(Some(e)) => Json(e).into_response(),
        Ok(None) => error_response(BrokerError::NotFound(id)),
        Err(e) => error_response(e),
    }
}

async fn delete_entity(State(b): State<Arc<Broker>>, Path(id): Path<String>) -> Response {
    match b.delete_entity(&id) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error_response(e),
    }
}

async fn patch_attrs(
    State(b): State<Arc<Broker>>,
    Path(id): Path<String>,
    body: String,
) -> Response {
    let patch: BTreeMap<String, Attribute> = match serde_json::from_str(&body) {
        Ok(p) => p,
        Err(e) => return bad_body(e.to_string()),
    };
    match b.update_attributes(&id, patch) {
        Ok(e) => Json(e).into_response(),
        Err(e) => error_response(e),
    }
}

async fn post_subscription(State(b): State<Arc<Broker>>, body: String) -> Response {
    let sub: Subscription = match serde_json::from_str(&body) {
        Ok(s) => s,
        Err(e) => {
            return error_response(BrokerError::MalformedSubscription(e.to_string()));
        }
    };
    match b.subscribe(sub) {
        Ok(id) => (
            StatusCode::CREATED,
            [(axum::http::header::LOCATION, format!("/v2/subscriptions/{id}"))],
            Json(json!({ "id": id })),
        )
            .into_response(),
        Err(e) => error_response(e),
    }
}

async fn list_subscriptions(State(b): State<Arc<Broker>>) -> Response {
    Json(b.subscriptions()).into_response()
}

async fn delete_subscription(State(b): State<Arc<Broker>>, Path(id): Path<String>) -> Response {
    match b.unsubscribe(&id) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error_response(e),
    }
}

/// Axum router exposing the `/v2` entity and subscription endpoints.
pub fn router(broker: Arc<Broker>) -> Router {
    Router::new()
        .route("/v2/entities", post(post_entity).get(list_entities))
        .route("/v2/entities/{id}", get(get_entity).delete(delete_entity))
        .route("/v2/entities/{id}/attrs", patch(patch_attrs))
        .route(
            "/v2/subscriptions",
            post(post_subscription).get(list_subscriptions),
        )
        .route(
            "/v2/subscriptions/{id}",
            axum::routing::delete(delete_subscription),
        )
        .with_state(broker)
}

/// Client for a remote broker speaking the `/v2` API.
#[derive(Clone)]
pub struct HttpBroker {
    base: String,
    client: Client,
}

impl HttpBroker {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            client: Client::default(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn unreachable(e: crate::net::HttpError) -> BrokerError {
        BrokerError::Unreachable(e.to_string())
    }

    fn remote_error(status: u16, body: &str) -> BrokerError {
        let parsed: Option<serde_json::Value> = serde_json::from_str(body).ok();
        let kind = parsed
            .as_ref()
            .and_then(|v| v["error"].as_str())
            .unwrap_or("")
            .to_string();
        let msg = parsed
            .as_ref()
            .and_then(|v| v["description"].as_str())
            .unwrap_or(body)
            .to_string();
        match kind.as_str() {
            "not-found" => BrokerError::NotFound(msg),
            "malformed-pattern" => BrokerError::MalformedPattern(msg),
            "malformed-query" => BrokerError::MalformedQuery(msg),
            "type-mismatch" => BrokerError::TypeMismatch(msg),
            "malformed-subscription" => BrokerError::MalformedSubscription(msg),
            "unknown-subscription" => BrokerError::UnknownSubscription(msg),
            _ => BrokerError::Remote {
                status,
                message: msg,
            },
        }
    }
}

impl ContextBroker for HttpBroker {
    fn upsert_entity(&self, entity: NgsiEntity) -> Result<UpsertOutcome, BrokerError> {
        entity.validate()?;
        let body = serde_json::to_string(&entity).expect("entity serializes");
        let reply = self
            .client
            .post_json(&format!("{}/v2/entities", self.base), &body)
            .map_err(Self::unreachable)?;
        match reply.status {
            201 => Ok(UpsertOutcome::Created),
            204 | 200 => Ok(UpsertOutcome::Updated),
            s => Err(Self::remote_error(s, &reply.text())),
        }
    }

    fn get_entity(&self, id: &str) -> Result<Option<NgsiEntity>, BrokerError> {
        let reply = self
            .client
            .get(&format!("{}/v2/entities/{}", self.base, encode_component(id)))
            .map_err(Self::unreachable)?;
        match reply.status {
            200 => serde_json::from_slice(&reply.body)
                .map(Some)
                .map_err(|e| BrokerError::Remote {
                    status: 200,
                    message: e.to_string(),
                }),
            404 => Ok(None),
            s => Err(Self::remote_error(s, &reply.text())),
        }
    }

    fn query_entities(&self, query: &Query) -> Result<Vec<NgsiEntity>, BrokerError> {
        let mut params = Vec::new();
        if let Some(t) = &query.entity_type {
            params.push(format!("type={}", encode_component(t)));
        }
        if let Some(p) = &query.id_pattern {
            params.push(format!("idPattern={}", encode_component(p)));
        }
        if !query.filters.is_empty() {
            params.push(format!("q={}", encode_component(&query.q_string())));
        }
        let url = if params.is_empty() {
            format!("{}/v2/entities", self.base)
        } else {
            format!("{}/v2/entities?{}", self.base, params.join("&"))
        };
        let reply = self.client.get(&url).map_err(Self::unreachable)?;
        if reply.status != 200 {
            return Err(Self::remote_error(reply.status, &reply.text()));
        }
        serde_json::from_slice(&reply.body).map_err(|e| BrokerError::Remote {
            status: 200,
            message: e.to_string(),
        })
    }

    fn update_attributes(
        &self,
        id: &str,
        patch: BTreeMap<String, Attribute>,
    ) -> Result<NgsiEntity, BrokerError> {
        let body = serde_json::to_string(&patch).expect("patch serializes");
        let reply = self
            .client
            .patch_json(
                &format!("{}/v2/entities/{}/attrs", self.base, encode_component(id)),
                &body,
            )
            .map_err(Self::unreachable)?;
        if reply.status != 200 {
            return Err(Self::remote_error(reply.status, &reply.text()));
        }
        serde_json::from_slice(&reply.body).map_err(|e| BrokerError::Remote {
            status: 200,
            message: e.to_string(),
        })
    }

    fn delete_entity(&self, id: &str) -> Result<(), BrokerError> {
        let reply = self
            .client
            .delete(&format!("{}/v2/entities/{}", self.base, encode_component(id)))
            .map_err(Self::unreachable)?;
        match reply.status {
            200 | 204 => Ok(()),
            s => Err(Self::remote_error(s, &reply.text())),
        }
    }

    fn subscribe(&self, subscription: Subscription) -> Result<String, BrokerError> {
        if matches!(subscription.target, NotificationTarget::Sink(_)) {
            return Err(BrokerError::MalformedSubscription(
                "a remote broker needs an http callback target".into(),
            ));
        }
        let body = serde_json::to_string(&subscription).expect("subscription serializes");
        let reply = self
            .client
            .post_json(&format!("{}/v2/subscriptions", self.base), &body)
            .map_err(Self::unreachable)?;
        if reply.status != 201 {
            return Err(Self::remote_error(reply.status, &reply.text()));
        }
        let v: serde_json::Value =
            serde_json::from_slice(&reply.body).map_err(|e| BrokerError::Remote {
                status: 201,
                message: e.to_string(),
            })?;
        v["id"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BrokerError::Remote {
                status: 201,
                message: "response lacks subscription id".into(),
            })
    }

    fn unsubscribe(&self, id: &str) -> Result<(), BrokerError> {
        let reply = self
            .client
            .delete(&format!(
                "{}/v2/subscriptions/{}",
                self.base,
                encode_component(id)
            ))
            .map_err(Self::unreachable)?;
        match reply.status {
            200 | 204 => Ok(()),
            s => Err(Self::remote_error(s, &reply.text())),
        }
    }
}

/// Receives notification POSTs at `/notify` and forwards them to a sink.
pub fn callback_router(sink: Arc<dyn NotificationSink>) -> Router {
    async fn receive(State(sink): State<Arc<dyn NotificationSink>>, body: String) -> Response {
        let n: Notification = match serde_json::from_str(&body) {
            Ok(n) => n,
            Err(e) => return bad_body(e.to_string()),
        };
        match sink.deliver(&n) {
            Ok(()) => StatusCode::NO_CONTENT.into_response(),
            Err(e) => (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
        }
    }
    Router::new().route("/notify", post(receive)).with_state(sink)
}

/// Starts a callback receiver and returns it with its public `/notify` URL.
pub fn spawn_callback(
    sink: Arc<dyn NotificationSink>,
    listen: &str,
) -> std::io::Result<(HttpServer, NotificationTarget)> {
    let server = HttpServer::spawn(callback_router(sink), listen)?;
    let url = format!("{}/notify", server.base_url());
    Ok((server, NotificationTarget::http(url)))
}
