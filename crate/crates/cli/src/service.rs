//! Local HTTP/JSON service over a loaded checkpoint and panel.
//!
//! - `GET /regions`: region ids, names and populations
//! - `GET /model`: model config, normalization stats and attention weights
//! - `POST /forecast` `{"horizon": 14, "origin"?: "2020-09-27"}`
//! - `POST /scenario` `{"transforms": [...], "horizon"?: 30, "origin"?: date, "eval_start"?: date}`
//!
//! Malformed bodies get 400 with the offending field; horizons outside
//! `1..=MAX_HORIZON` or dates the data cannot support get 422.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{Days, NaiveDate};
use epigraph::checkpoint::{AttentionSummary, Checkpoint};
use epigraph::data::{NormalizationStats, PanelDataset};
use epigraph::model::ModelConfig;
use epigraph::policy::{run_scenario, ImpactReport, MobilityTransform, PolicyScenario};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};
use crate::forecast::{check_compatible, forecast, ForecastReport};

pub const MAX_HORIZON: usize = 365;
pub const DEFAULT_SCENARIO_HORIZON: usize = 30;

/// Immutable state shared by every request.
#[derive(Debug)]
pub struct ServiceState {
    checkpoint: Checkpoint,
    panel: PanelDataset,
}

impl ServiceState {
    pub fn new(checkpoint: Checkpoint, panel: PanelDataset) -> Result<Self> {
        check_compatible(&checkpoint, &panel)?;
        Ok(ServiceState { checkpoint, panel })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn panel(&self) -> &PanelDataset {
        &self.panel
    }
}

#[derive(Debug, Serialize)]
pub struct RegionInfo {
    pub id: String,
    pub name: String,
    pub population: f64,
}

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub normalization: NormalizationStats,
    pub attention: AttentionSummary,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub data_start: NaiveDate,
    pub data_end: NaiveDate,
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn bad(field: &str, error: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            error: error.into(),
            field: Some(field.to_string()),
        }
    }

    fn unprocessable(field: Option<&str>, error: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            error: error.into(),
            field: field.map(str::to_string),
        }
    }

    fn from_core(e: epigraph::Error) -> Self {
        if e.is_validation() {
            ApiError::unprocessable(None, e.to_string())
        } else {
            ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                error: e.to_string(),
                field: None,
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/regions", get(regions))
        .route("/model", get(model))
        .route("/forecast", post(post_forecast))
        .route("/scenario", post(post_scenario))
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::Serve(format!("cannot bind {addr}: {e}")))?;
    println!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| CliError::Serve(e.to_string()))
}

async fn regions(State(state): State<Arc<ServiceState>>) -> Json<Vec<RegionInfo>> {
    let panel = state.panel();
    Json(
        panel
            .region_ids()
            .iter()
            .zip(panel.population())
            .map(|(id, &population)| RegionInfo {
                id: id.clone(),
                name: id.clone(),
                population,
            })
            .collect(),
    )
}

async fn model(State(state): State<Arc<ServiceState>>) -> Json<ModelInfo> {
    let ck = state.checkpoint();
    Json(ModelInfo {
        config: ck.params.config.clone(),
        normalization: ck.stats,
        attention: ck.attention.clone(),
        best_epoch: ck.best_epoch,
        best_val_loss: ck.best_val_loss,
        data_start: state.panel().start_date(),
        data_end: state.panel().end_date(),
    })
}

fn parse_object(body: &Bytes, allowed: &[&str]) -> std::result::Result<Map<String, Value>, ApiError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ApiError::bad("body", format!("invalid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(ApiError::bad("body", "expected a JSON object"));
    };
    if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ApiError::bad(k, format!("unknown field `{k}`")));
    }
    Ok(map)
}

fn horizon_field(map: &Map<String, Value>, default: Option<usize>) -> std::result::Result<usize, ApiError> {
    let h = match (map.get("horizon"), default) {
        (None, Some(d)) => return Ok(d),
        (None, None) => return Err(ApiError::bad("horizon", "missing field `horizon`")),
        (Some(v), _) => v
            .as_u64()
            .ok_or_else(|| ApiError::bad("horizon", "horizon must be a nonnegative integer"))?,
    };
    if h == 0 || h > MAX_HORIZON as u64 {
        return Err(ApiError::unprocessable(
            Some("horizon"),
            format!("horizon must lie in 1..={MAX_HORIZON}, got {h}"),
        ));
    }
    Ok(h as usize)
}

fn date_field(map: &Map<String, Value>, field: &str) -> std::result::Result<Option<NaiveDate>, ApiError> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => s
            .parse()
            .map(Some)
            .map_err(|_| ApiError::bad(field, format!("`{s}` is not a YYYY-MM-DD date"))),
        Some(_) => Err(ApiError::bad(field, "expected a YYYY-MM-DD date string")),
    }
}

fn origin_field(map: &Map<String, Value>, panel: &PanelDataset) -> std::result::Result<NaiveDate, ApiError> {
    let origin = date_field(map, "origin")?.unwrap_or_else(|| panel.end_date());
    if panel.day_index(origin).is_none() {
        return Err(ApiError::unprocessable(
            Some("origin"),
            format!(
                "origin {origin} outside data range {}..={}",
                panel.start_date(),
                panel.end_date()
            ),
        ));
    }
    Ok(origin)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            error: format!("worker failed: {e}"),
            field: None,
        }),
    }
}

async fn post_forecast(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<ForecastReport> {
    let map = parse_object(&body, &["horizon", "origin"])?;
    let horizon = horizon_field(&map, None)?;
    let origin = origin_field(&map, state.panel())?;
    blocking(move || forecast(state.checkpoint(), state.panel(), origin, horizon).map_err(ApiError::from_core)).await
}

async fn post_scenario(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<ImpactReport> {
    let map = parse_object(&body, &["transforms", "horizon", "origin", "eval_start"])?;
    let Some(raw) = map.get("transforms") else {
        return Err(ApiError::bad("transforms", "missing field `transforms`"));
    };
    let Value::Array(items) = raw else {
        return Err(ApiError::bad("transforms", "expected an array of transforms"));
    };
    let mut transforms = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let field = format!("transforms[{i}]");
        let t: MobilityTransform =
            serde_json::from_value(item.clone()).map_err(|e| ApiError::bad(&field, e.to_string()))?;
        if let (Some(from), Some(to)) = (t.from, t.to) {
            if to < from {
                return Err(ApiError::bad(&field, format!("`to` {to} precedes `from` {from}")));
            }
        }
        transforms.push(t);
    }
    let scenario = PolicyScenario { transforms };
    if let Err(e) = scenario.resolve(state.panel().region_ids()) {
        return Err(ApiError::unprocessable(Some("transforms"), e.to_string()));
    }
    let horizon = horizon_field(&map, Some(DEFAULT_SCENARIO_HORIZON))?;
    let origin = origin_field(&map, state.panel())?;
    let eval_start = date_field(&map, "eval_start")?.unwrap_or(origin + Days::new(1));
    let eval_end = origin + Days::new(horizon as u64);
    blocking(move || {
        let ck = state.checkpoint();
        run_scenario(&ck.params, &ck.stats, state.panel(), &scenario, origin, eval_start, eval_end)
            .map_err(ApiError::from_core)
    })
    .await
}
