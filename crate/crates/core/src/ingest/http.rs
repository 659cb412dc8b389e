//! axum routes for the ingest service.
//!
//! | route                              | success                | rejection            |
//! |------------------------------------|------------------------|----------------------|
//! | `GET/POST /update`                 | 200, body = entry id   | 400/401/429, body `0` |
//! | `GET /channels/{id}/feeds.json`    | 200, feed document     | 401/404, JSON error  |
//! | `GET /channels/{id}/fields/{n}.json` | 200, single-field feed | 400/401/404        |
//! | `POST /channels`                   | 201, channel with keys | 400                  |
//! | `POST /channels/{id}/alerts`       | 201, stored event      | 400/401/404/409      |
//! | `GET /channels/{id}/alerts.json`   | 200, alert events      | 401/404              |
//! | `GET /healthz`                     | 200, `ok`              |                      |

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, RawQuery, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{AlertReport, FeedQuery, IngestError, Service, UpdateRequest};
use crate::storage::FIELD_COUNT;
use crate::timefmt;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/update", get(update).post(update))
        .route("/update.json", get(update).post(update))
        .route("/channels", post(create_channel))
        .route("/channels/{id}/feeds.json", get(feed))
        .route("/channels/{id}/fields/{file}", get(field_feed))
        .route("/channels/{id}/alerts", post(report_alert))
        .route("/channels/{id}/alerts.json", get(alerts))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(service)
}

fn status_of(e: &IngestError) -> StatusCode {
    StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
}

/// `/update` rejections keep the public service's `0` body.
fn update_rejection(e: IngestError) -> Response {
    if let IngestError::Storage(err) = &e {
        tracing::error!(error = %err, "append failed");
    }
    (status_of(&e), "0").into_response()
}

fn json_error(e: IngestError) -> Response {
    (
        status_of(&e),
        Json(json!({ "status": e.status(), "error": e.to_string() })),
    )
        .into_response()
}

fn body_params(headers: &HeaderMap, body: &Bytes) -> Result<Vec<(String, String)>, IngestError> {
    if body.is_empty() {
        return Ok(Vec::new());
    }
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.starts_with("application/json"));
    if is_json {
        let obj: serde_json::Map<String, Value> =
            serde_json::from_slice(body).map_err(|e| IngestError::BadRequest(e.to_string()))?;
        Ok(obj
            .into_iter()
            .filter_map(|(k, v)| match v {
                Value::String(s) => Some((k, s)),
                Value::Number(n) => Some((k, n.to_string())),
                _ => None,
            })
            .collect())
    } else {
        serde_urlencoded::from_bytes(body).map_err(|e| IngestError::BadRequest(e.to_string()))
    }
}

async fn update(
    State(svc): State<Arc<Service>>,
    RawQuery(query): RawQuery,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let now = Utc::now();
    let mut params: Vec<(String, String)> = match query.as_deref().map(serde_urlencoded::from_str).transpose() {
        Ok(p) => p.unwrap_or_default(),
        Err(e) => return update_rejection(IngestError::BadRequest(e.to_string())),
    };
    match body_params(&headers, &body) {
        Ok(p) => params.extend(p),
        Err(e) => return update_rejection(e),
    }
    let mut req = match UpdateRequest::from_params(params) {
        Ok(r) => r,
        Err(e) => return update_rejection(e),
    };
    if req.api_key.is_empty() {
        if let Some(k) = headers.get("x-thingspeakapikey").and_then(|v| v.to_str().ok()) {
            req.api_key = k.to_string();
        }
    }
    let result = tokio::task::spawn_blocking(move || svc.handle_update(&req, now)).await;
    match result {
        Ok(Ok(id)) => (StatusCode::OK, id.to_string()).into_response(),
        Ok(Err(e)) => update_rejection(e),
        Err(join) => {
            tracing::error!(error = %join, "update task failed");
            (StatusCode::INTERNAL_SERVER_ERROR, "0").into_response()
        }
    }
}

#[derive(Debug, Deserialize, Default)]
struct FeedParams {
    results: Option<usize>,
    start: Option<String>,
    end: Option<String>,
    api_key: Option<String>,
}

impl FeedParams {
    fn into_query(self) -> Result<FeedQuery, IngestError> {
        let instant = |s: Option<String>| {
            s.map(|raw| {
                timefmt::parse_instant(&raw).ok_or_else(|| IngestError::BadRequest(format!("bad timestamp {raw:?}")))
            })
            .transpose()
        };
        Ok(FeedQuery {
            results: self.results,
            start: instant(self.start)?,
            end: instant(self.end)?,
            api_key: self.api_key,
        })
    }
}

async fn feed(State(svc): State<Arc<Service>>, Path(id): Path<u64>, Query(params): Query<FeedParams>) -> Response {
    match params.into_query().and_then(|q| svc.handle_feed(id, &q)) {
        Ok(doc) => Json(doc).into_response(),
        Err(e) => json_error(e),
    }
}

async fn field_feed(
    State(svc): State<Arc<Service>>,
    Path((id, file)): Path<(u64, String)>,
    Query(params): Query<FeedParams>,
) -> Response {
    let index = file
        .strip_suffix(".json")
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|n| (1..=FIELD_COUNT).contains(n));
    let Some(index) = index else {
        return json_error(IngestError::BadRequest(format!("no such field {file:?}")));
    };
    match params.into_query().and_then(|q| svc.handle_feed(id, &q)) {
        Ok(doc) => Json(doc.single_field(index)).into_response(),
        Err(e) => json_error(e),
    }
}

async fn alerts(State(svc): State<Arc<Service>>, Path(id): Path<u64>, Query(params): Query<FeedParams>) -> Response {
    match params.into_query().and_then(|q| svc.handle_alerts(id, &q)) {
        Ok(doc) => Json(doc).into_response(),
        Err(e) => json_error(e),
    }
}

#[derive(Debug, Deserialize, Default)]
struct KeyParam {
    api_key: Option<String>,
}

async fn report_alert(
    State(svc): State<Arc<Service>>,
    Path(id): Path<u64>,
    Query(query): Query<KeyParam>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let now = Utc::now();
    let mut obj: serde_json::Map<String, Value> = match serde_json::from_slice(&body) {
        Ok(o) => o,
        Err(e) => return json_error(IngestError::BadRequest(e.to_string())),
    };
    let body_key = match obj.remove("api_key") {
        Some(Value::String(k)) => Some(k),
        Some(_) => return json_error(IngestError::BadRequest("api_key must be a string".into())),
        None => None,
    };
    let report: AlertReport = match serde_json::from_value(Value::Object(obj)) {
        Ok(r) => r,
        Err(e) => return json_error(IngestError::BadRequest(e.to_string())),
    };
    let header_key = headers
        .get("x-thingspeakapikey")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let key = body_key.or(query.api_key).or(header_key).unwrap_or_default();
    match tokio::task::spawn_blocking(move || svc.handle_alert(id, &key, &report, now)).await {
        Ok(Ok(event)) => (StatusCode::CREATED, Json(event)).into_response(),
        Ok(Err(e)) => {
            if let IngestError::Storage(err) = &e {
                tracing::error!(error = %err, "alert append failed");
            }
            json_error(e)
        }
        Err(join) => {
            tracing::error!(error = %join, "alert task failed");
            (StatusCode::INTERNAL_SERVER_ERROR, "").into_response()
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateChannel {
    name: String,
    #[serde(default)]
    field_labels: Vec<Option<String>>,
    #[serde(default)]
    private: bool,
}

async fn create_channel(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    let req: CreateChannel = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return json_error(IngestError::BadRequest(e.to_string())),
    };
    if req.field_labels.len() > FIELD_COUNT {
        return json_error(IngestError::BadRequest(format!("at most {FIELD_COUNT} field labels")));
    }
    let mut labels: [Option<String>; FIELD_COUNT] = Default::default();
    for (slot, label) in labels.iter_mut().zip(req.field_labels) {
        *slot = label;
    }
    let result =
        tokio::task::spawn_blocking(move || svc.create_channel(&req.name, labels, req.private, Utc::now())).await;
    match result {
        Ok(Ok(c)) => {
            let labels: HashMap<String, String> = c
                .field_labels
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.clone().map(|l| (format!("field{}", i + 1), l)))
                .collect();
            let body = json!({
                "id": c.channel_id,
                "name": c.name,
                "write_key": c.write_key,
                "read_key": c.read_key,
                "field_labels": labels,
                "created_at": timefmt::format_seconds(&c.created_at),
            });
            (StatusCode::CREATED, Json(body)).into_response()
        }
        Ok(Err(e)) => json_error(e),
        Err(join) => {
            tracing::error!(error = %join, "create task failed");
            (StatusCode::INTERNAL_SERVER_ERROR, "").into_response()
        }
    }
}
