//! Read-only HTTP service over one trained model.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ppn_core::archive::{ModelArchive, ARCHIVE_TAG};
use ppn_core::data::{Dataset, PatientRecord, WireRecord};
use ppn_core::interpretation::{build_cohorts, prototype_cards_with, CohortSet, PrototypeCard};
use ppn_core::model::PpnModel;
use ppn_core::PpnError;
use tower_http::cors::{Any, CorsLayer};

use crate::api::{
    parse_record, CohortResponse, DatasetInfo, ErrorBody, HealthResponse, PatientDetail, PatientSummary,
    PatientsResponse, PredictResponse, PrototypesResponse,
};

struct Mounted {
    dataset: Dataset,
    summaries: Vec<PatientSummary>,
    cohorts: Vec<CohortSet>,
    by_id: HashMap<String, usize>,
}

/// Everything the handlers read. Built once; never mutated.
pub struct AppState {
    model: PpnModel,
    cards: Vec<PrototypeCard>,
    mounted: Option<Mounted>,
}

impl AppState {
    /// Scores the optional dataset up front so cohort and patient
    /// endpoints are lookups.
    pub fn new(archive: ModelArchive, dataset: Option<Dataset>) -> Result<Self, PpnError> {
        let model = archive.model;
        let mounted = dataset
            .map(|ds| {
                let preds = model.score_dataset(&ds)?;
                let summaries = ds
                    .records
                    .iter()
                    .zip(&preds)
                    .map(|(r, p)| PatientSummary {
                        id: r.id.clone(),
                        n_visits: r.n_visits(),
                        label: r.label,
                        risk: p.risk,
                        nearest_prototype: p.nearest_prototype,
                    })
                    .collect();
                let cohorts = build_cohorts(&model, &ds)?;
                let by_id = ds.records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
                Ok::<_, PpnError>(Mounted { dataset: ds, summaries, cohorts, by_id })
            })
            .transpose()?;
        let mut sources: Vec<PatientRecord> = archive.sources;
        if let Some(m) = &mounted {
            sources.extend(m.dataset.records.iter().cloned());
        }
        let cards = prototype_cards_with(&model, &sources, mounted.as_ref().map(|m| m.cohorts.as_slice()))?;
        Ok(Self { model, cards, mounted })
    }

    pub fn model(&self) -> &PpnModel {
        &self.model
    }
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn not_found(msg: impl Into<String>) -> Self {
        Self(StatusCode::NOT_FOUND, ErrorBody::new(msg, None))
    }

    fn bad_request(body: ErrorBody) -> Self {
        Self(StatusCode::BAD_REQUEST, body)
    }

    fn internal(e: PpnError) -> Self {
        log::error!("{e}");
        Self(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new(e.to_string(), None))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn mounted(state: &AppState) -> Result<&Mounted, ApiError> {
    state.mounted.as_ref().ok_or_else(|| ApiError::not_found("no dataset is mounted on this service"))
}

async fn health(State(s): State<Arc<AppState>>) -> Json<HealthResponse> {
    let c = &s.model.config;
    Json(HealthResponse {
        status: "ok".into(),
        model_format: ARCHIVE_TAG.into(),
        k: c.k,
        hidden: c.hidden,
        n_indicators: c.n_indicators,
        n_statics: c.n_statics,
        indicator_names: s.model.indicator_names.clone(),
        static_names: s.model.static_names.clone(),
        dataset: s.mounted.as_ref().map(|m| DatasetInfo { patients: m.dataset.len() }),
    })
}

async fn prototypes(State(s): State<Arc<AppState>>) -> Json<PrototypesResponse> {
    Json(PrototypesResponse { static_names: s.model.static_names.clone(), prototypes: s.cards.clone() })
}

async fn cohort(State(s): State<Arc<AppState>>, Path(j): Path<String>) -> ApiResult<CohortResponse> {
    let j: usize = j.parse().map_err(|_| {
        ApiError::bad_request(ErrorBody::new(format!("`{j}` is not a prototype index"), Some("j".into())))
    })?;
    if j >= s.model.k() {
        return Err(ApiError::not_found(format!("prototype {j} does not exist (K = {})", s.model.k())));
    }
    let m = mounted(&s)?;
    let c = &m.cohorts[j];
    Ok(Json(CohortResponse {
        index: j,
        stats: c.stats.clone(),
        members: c.member_ids.iter().map(|id| m.summaries[m.by_id[id]].clone()).collect(),
    }))
}

async fn patients(State(s): State<Arc<AppState>>) -> ApiResult<PatientsResponse> {
    Ok(Json(PatientsResponse { patients: mounted(&s)?.summaries.clone() }))
}

async fn patient(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<PatientDetail> {
    let m = mounted(&s)?;
    let i = *m.by_id.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown patient `{id}`")))?;
    let rec = &m.dataset.records[i];
    let prediction = PredictResponse::build(&s.model, rec, true).map_err(ApiError::internal)?;
    Ok(Json(PatientDetail { record: WireRecord::from_record(rec), prediction }))
}

fn trajectory_flag(query: Option<&str>) -> Result<bool, ApiError> {
    let mut flag = false;
    for pair in query.unwrap_or("").split('&').filter(|p| !p.is_empty()) {
        let (key, value) = pair.split_once('=').unwrap_or((pair, "true"));
        if key != "trajectory" {
            continue;
        }
        flag = match value {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(ApiError::bad_request(ErrorBody::new(
                    format!("`{other}` is not a boolean"),
                    Some("trajectory".into()),
                )))
            }
        };
    }
    Ok(flag)
}

async fn predict(State(s): State<Arc<AppState>>, RawQuery(query): RawQuery, body: Bytes) -> ApiResult<PredictResponse> {
    let with_trajectory = trajectory_flag(query.as_deref())?;
    let rec = parse_record(&s.model, &body).map_err(ApiError::bad_request)?;
    PredictResponse::build(&s.model, &rec, with_trajectory).map(Json).map_err(ApiError::internal)
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

/// The API under `/api`, with permissive CORS for browser clients.
pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/prototypes", get(prototypes))
        .route("/api/prototypes/{j}/cohort", get(cohort))
        .route("/api/patients", get(patients))
        .route("/api/patients/{id}", get(patient))
        .route("/api/predict", post(predict))
        .fallback(fallback)
        .with_state(state)
        .layer(cors)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
