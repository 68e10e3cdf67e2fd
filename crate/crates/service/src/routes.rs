use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dosegp_core::cohort::{load_cohort_from_readers, preprocess, VariableSchema};
use dosegp_core::config::RunConfig;
use dosegp_core::decision::{CompensationMap, DecisionVerdict, DoseGrid};
use dosegp_core::pipeline::{train, Band};
use dosegp_core::STAGES;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ErrorBody};
use crate::state::{metrics_of, AppState, ModelEntry, ReadyModel, StoredCohort};

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

pub const UNITS_NOTE: &str =
    "state values in original clinical units; doses in Gy/fraction; probabilities in [0, 1]; bands are mean ± 2 sd";

/// Parse a JSON body: syntax errors are 400, shape errors are 422.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| {
        let status = match e.classify() {
            serde_json::error::Category::Data => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::request(status, format!("invalid request body: {e}"))
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::request(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

#[derive(Serialize)]
pub struct Health {
    pub status: &'static str,
    pub version: &'static str,
}

pub async fn health() -> Json<Health> {
    Json(Health {
        status: "ok",
        version: env!("CARGO_PKG_VERSION"),
    })
}

// ---------------------------------------------------------------- cohorts

#[derive(Serialize)]
pub struct DoseRange {
    min: f64,
    max: f64,
}

#[derive(Serialize)]
pub struct ValidationReport {
    stages: usize,
    variables: Vec<String>,
    lc_events: usize,
    rp2_events: usize,
    dose_range: DoseRange,
}

#[derive(Serialize)]
pub struct CohortResponse {
    cohort_id: String,
    n: usize,
    validation: ValidationReport,
}

fn cohort_id(schema: &VariableSchema, states: &[u8], outcomes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(schema).expect("schema encodes"));
    for part in [states, outcomes] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    format!("c{}", &hex::encode(h.finalize())[..16])
}

/// `POST /cohorts`, multipart with `states` and `outcomes` CSV parts and an
/// optional JSON `schema` part.
pub async fn upload_cohort(State(state): State<Shared>, mut form: Multipart) -> ApiResult<Response> {
    let mut parts: BTreeMap<String, Bytes> = BTreeMap::new();
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::request(StatusCode::BAD_REQUEST, format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or("").to_string();
        if !matches!(name.as_str(), "states" | "outcomes" | "schema") {
            return Err(ApiError::request(StatusCode::BAD_REQUEST, format!("unexpected form field `{name}`")));
        }
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::request(StatusCode::BAD_REQUEST, format!("multipart: {e}")))?;
        parts.insert(name, data);
    }
    let take = |name: &str| {
        parts
            .get(name)
            .cloned()
            .ok_or_else(|| ApiError::request(StatusCode::BAD_REQUEST, format!("missing form field `{name}`")))
    };
    let (states, outcomes) = (take("states")?, take("outcomes")?);
    let schema: VariableSchema = match parts.get("schema") {
        Some(b) => serde_json::from_slice(b)
            .map_err(|e| ApiError::request(StatusCode::BAD_REQUEST, format!("schema: {e}")))?,
        None => VariableSchema::default(),
    };

    let id = cohort_id(&schema, &states, &outcomes);
    let records = load_cohort_from_readers(&states[..], "states", &outcomes[..], "outcomes", &schema).map_err(ApiError::cohort)?;

    let doses = records.iter().flat_map(|r| r.doses);
    let report = ValidationReport {
        stages: STAGES,
        variables: schema.variables.iter().map(|v| v.name.clone()).collect(),
        lc_events: records.iter().filter(|r| r.lc).count(),
        rp2_events: records.iter().filter(|r| r.rp2).count(),
        dose_range: DoseRange {
            min: doses.clone().fold(f64::INFINITY, f64::min),
            max: doses.fold(f64::NEG_INFINITY, f64::max),
        },
    };
    let n = records.len();
    log::info!("cohort {id}: {n} patients");
    state
        .cohorts
        .write()
        .unwrap()
        .insert(id.clone(), Arc::new(StoredCohort { records, schema }));
    Ok(Json(CohortResponse {
        cohort_id: id,
        n,
        validation: report,
    })
    .into_response())
}

// ---------------------------------------------------------------- training

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    cohort_id: String,
    #[serde(default)]
    config: Option<Value>,
    /// Block until training finishes instead of answering 202.
    #[serde(default)]
    wait: bool,
}

#[derive(Serialize)]
pub struct ModelStatus {
    pub model_id: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

fn status_of(id: &str, entry: &ModelEntry) -> ModelStatus {
    let base = |status, cohort_id: Option<String>| ModelStatus {
        model_id: id.into(),
        status,
        cohort_id,
        digest: None,
        metrics: None,
        error: None,
    };
    match entry {
        ModelEntry::Training { cohort_id } => base("training", Some(cohort_id.clone())),
        ModelEntry::Ready(m) => ModelStatus {
            digest: Some(m.digest.clone()),
            metrics: Some(m.metrics.clone()),
            ..base("ready", m.cohort_id.clone())
        },
        ModelEntry::Failed { cohort_id, error } => ModelStatus {
            error: Some(error.clone()),
            ..base("failed", Some(cohort_id.clone()))
        },
    }
}

/// Build the run config for a training request. A missing seed takes the
/// service default; a missing schema takes the cohort's.
fn training_config(raw: Option<Value>, cohort: &StoredCohort, default_seed: u64) -> ApiResult<RunConfig> {
    let mut raw = raw.unwrap_or_else(|| Value::Object(Default::default()));
    let obj = raw
        .as_object_mut()
        .ok_or_else(|| ApiError::request(StatusCode::UNPROCESSABLE_ENTITY, "config must be a JSON object"))?;
    let explicit_seed = obj.contains_key("seed");
    if !obj.contains_key("schema") {
        obj.insert("schema".into(), serde_json::to_value(&cohort.schema).expect("schema encodes"));
    }
    let mut config = RunConfig::from_json(&raw.to_string())?;
    if !explicit_seed {
        config.set_seed(default_seed);
    }
    if config.schema.names() != cohort.schema.names() {
        return Err(ApiError::request(
            StatusCode::UNPROCESSABLE_ENTITY,
            "config schema variables differ from the cohort's",
        ));
    }
    Ok(config)
}

fn run_training(state: &AppState, id: &str, cohort_id: &str, cohort: &StoredCohort, config: &RunConfig) -> ModelEntry {
    let fail = |error: ErrorBody| ModelEntry::Failed {
        cohort_id: cohort_id.into(),
        error,
    };
    let trained = preprocess(&cohort.records, &config.schema)
        .map_err(dosegp_core::Error::from)
        .and_then(|scaled| train(&scaled, config));
    let (pipeline, report) = match trained {
        Ok(t) => t,
        Err(e) => {
            log::error!("model {id} failed in {}: {e}", e.module());
            return fail(ApiError::training(&e).body);
        }
    };
    let metrics = metrics_of(&report);
    match state.persist(id, &pipeline, cohort_id, &metrics) {
        Ok(digest) => {
            log::info!("model {id} ready ({digest})");
            ModelEntry::Ready(Arc::new(ReadyModel {
                pipeline,
                digest,
                cohort_id: Some(cohort_id.into()),
                metrics,
            }))
        }
        Err(e) => fail(ErrorBody {
            module: "model-store".into(),
            message: format!("cannot persist artifact: {e}"),
            row: None,
            column: None,
        }),
    }
}

/// `POST /models/train`.
pub async fn train_model(State(state): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: TrainRequest = parse_body(&body)?;
    let cohort = state
        .cohorts
        .read()
        .unwrap()
        .get(&req.cohort_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("cohort", &req.cohort_id))?;
    let config = training_config(req.config, &cohort, state.default_seed)?;

    if !state.training.lock().unwrap().insert(req.cohort_id.clone()) {
        return Err(ApiError::request(
            StatusCode::CONFLICT,
            format!("cohort `{}` already has a training job running", req.cohort_id),
        ));
    }
    let id = state.allocate_model_id();
    state.models.write().unwrap().insert(
        id.clone(),
        ModelEntry::Training {
            cohort_id: req.cohort_id.clone(),
        },
    );
    log::info!("model {id}: training on cohort {}", req.cohort_id);

    let job = {
        let (state, id, cohort_id) = (state.clone(), id.clone(), req.cohort_id.clone());
        tokio::task::spawn_blocking(move || {
            let entry = run_training(&state, &id, &cohort_id, &cohort, &config);
            state.models.write().unwrap().insert(id, entry);
            state.training.lock().unwrap().remove(&cohort_id);
        })
    };

    if req.wait {
        job.await
            .map_err(|e| ApiError::request(StatusCode::INTERNAL_SERVER_ERROR, format!("training worker: {e}")))?;
        let models = state.models.read().unwrap();
        let entry = &models[&id];
        let status = match entry {
            ModelEntry::Failed { error, .. } => {
                return Err(ApiError {
                    status: StatusCode::INTERNAL_SERVER_ERROR,
                    body: error.clone(),
                })
            }
            _ => StatusCode::OK,
        };
        return Ok((status, Json(status_of(&id, entry))).into_response());
    }
    let pending = status_of(&id, &state.models.read().unwrap()[&id]);
    Ok((StatusCode::ACCEPTED, Json(pending)).into_response())
}

/// `GET /models/{id}/status`.
pub async fn model_status(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<ModelStatus>> {
    let models = state.models.read().unwrap();
    let entry = models.get(&id).ok_or_else(|| ApiError::not_found("model", &id))?;
    Ok(Json(status_of(&id, entry)))
}

fn ready_model(state: &AppState, id: &str) -> ApiResult<Arc<ReadyModel>> {
    match state.models.read().unwrap().get(id) {
        None => Err(ApiError::not_found("model", id)),
        Some(ModelEntry::Ready(m)) => Ok(m.clone()),
        Some(ModelEntry::Training { .. }) => Err(ApiError::request(
            StatusCode::CONFLICT,
            format!("model `{id}` is still training"),
        )),
        Some(ModelEntry::Failed { error, .. }) => Err(ApiError::request(
            StatusCode::CONFLICT,
            format!("model `{id}` failed to train: {}", error.message),
        )),
    }
}

/// Order a named state by the model schema; every variable must be present
/// and no others.
fn ordered_state(model: &ReadyModel, named: &BTreeMap<String, f64>) -> ApiResult<Vec<f64>> {
    let vars = &model.pipeline.scaling.variables;
    if let Some(extra) = named.keys().find(|k| !vars.iter().any(|v| &v.name == *k)) {
        return Err(ApiError::request(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("unknown state variable `{extra}`"),
        ));
    }
    vars.iter()
        .map(|v| {
            named.get(&v.name).copied().ok_or_else(|| {
                ApiError::request(StatusCode::UNPROCESSABLE_ENTITY, format!("missing state variable `{}`", v.name))
            })
        })
        .collect()
}

// ---------------------------------------------------------------- what-if

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    state: BTreeMap<String, f64>,
    #[serde(default)]
    doses: Option<Vec<f64>>,
    #[serde(default)]
    grid: Option<DoseGrid>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Serialize)]
pub struct WhatIfResponse {
    model_id: String,
    digest: String,
    seed: u64,
    units: &'static str,
    doses: Vec<f64>,
    prob_lc: Vec<Band>,
    prob_rp2: Vec<Band>,
    reward: Vec<Band>,
    reward_std: Vec<f64>,
    logit_lc_mean: Vec<f64>,
    logit_lc_variance: Vec<f64>,
    logit_rp2_mean: Vec<f64>,
    logit_rp2_variance: Vec<f64>,
}

/// `POST /models/{id}/whatif`. Without `doses` or `grid` the model's
/// decision grid is swept.
pub async fn whatif(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<WhatIfResponse>> {
    let req: WhatIfRequest = parse_body(&body)?;
    let model = ready_model(&state, &id)?;
    let x = ordered_state(&model, &req.state)?;
    let doses = match (req.doses, req.grid) {
        (Some(_), Some(_)) => {
            return Err(ApiError::request(
                StatusCode::UNPROCESSABLE_ENTITY,
                "give either `doses` or `grid`, not both",
            ))
        }
        (Some(d), None) => d,
        (None, Some(g)) => g.points()?,
        (None, None) => model.pipeline.config.decision.grid.points()?,
    };
    if doses.is_empty() {
        return Err(ApiError::request(StatusCode::UNPROCESSABLE_ENTITY, "no doses requested"));
    }
    let seed = req.seed.unwrap_or(model.pipeline.config.seed);
    blocking(move || {
        let points = model.pipeline.whatif(&x, &doses, seed)?;
        Ok(Json(WhatIfResponse {
            model_id: id,
            digest: model.digest.clone(),
            seed,
            units: UNITS_NOTE,
            doses,
            prob_lc: points.iter().map(|p| p.prob_lc.clone()).collect(),
            prob_rp2: points.iter().map(|p| p.prob_rp2.clone()).collect(),
            reward: points.iter().map(|p| p.reward.clone()).collect(),
            reward_std: points.iter().map(|p| p.reward_std).collect(),
            logit_lc_mean: points.iter().map(|p| p.logit_lc.0).collect(),
            logit_lc_variance: points.iter().map(|p| p.logit_lc.1).collect(),
            logit_rp2_mean: points.iter().map(|p| p.logit_rp2.0).collect(),
            logit_rp2_variance: points.iter().map(|p| p.logit_rp2.1).collect(),
        }))
    })
    .await
}

// ---------------------------------------------------------------- decide

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecideRequest {
    state: BTreeMap<String, f64>,
    physician_dose: f64,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Serialize)]
pub struct DecideResponse {
    model_id: String,
    digest: String,
    verdict: DecisionVerdict,
}

/// `POST /models/{id}/decide`.
pub async fn decide(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<DecideResponse>> {
    let req: DecideRequest = parse_body(&body)?;
    let model = ready_model(&state, &id)?;
    let x = ordered_state(&model, &req.state)?;
    let seed = req.seed.unwrap_or(model.pipeline.config.seed);
    blocking(move || {
        let verdict = model.pipeline.decide(&x, req.physician_dose, seed)?;
        Ok(Json(DecideResponse {
            model_id: id,
            digest: model.digest.clone(),
            verdict,
        }))
    })
    .await
}

// ---------------------------------------------------------------- compensation

#[derive(Deserialize)]
pub struct MapQuery {
    var1: Option<String>,
    var2: Option<String>,
    resolution: Option<usize>,
}

#[derive(Serialize)]
pub struct MapResponse {
    model_id: String,
    digest: String,
    units: &'static str,
    #[serde(flatten)]
    map: CompensationMap,
}

/// `GET /models/{id}/compensation-map`. Variables default to the model's
/// compensation variables, resolution to its configured map resolution.
pub async fn compensation_map(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<MapQuery>,
) -> ApiResult<Json<MapResponse>> {
    let model = ready_model(&state, &id)?;
    let config = &model.pipeline.config;
    let pick = |given: Option<String>, k: usize| {
        given.or_else(|| config.compensation_variables.get(k).cloned()).ok_or_else(|| {
            ApiError::request(StatusCode::UNPROCESSABLE_ENTITY, format!("var{} is required", k + 1))
        })
    };
    let (var1, var2) = (pick(q.var1, 0)?, pick(q.var2, 1)?);
    let resolution = q.resolution.unwrap_or(config.map_resolution);
    blocking(move || {
        let map = model.pipeline.compensation_map(&var1, &var2, resolution)?;
        Ok(Json(MapResponse {
            model_id: id,
            digest: model.digest.clone(),
            units: "variables in original clinical units; delta in Gy/fraction (AI dose minus physician dose)",
            map,
        }))
    })
    .await
}
