//! REST session service.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use petseg::{
    encode_png, render_slice, ClickRequest, Error, Overlays, Plane, SessionStore, SliceChannel, SliceRequest, Tracer,
    Window,
};
use serde::{Deserialize, Serialize};

pub struct ApiError(pub StatusCode, pub String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::UnknownName(_) => StatusCode::NOT_FOUND,
            Error::ClickLimit(_) => StatusCode::CONFLICT,
            Error::OutOfBounds(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::InvalidArgument(_) | Error::Json(_) | Error::GridMismatch(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking core work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> petseg::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseSummary {
    pub id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub tracer: Option<Tracer>,
    pub has_ground_truth: bool,
}

#[derive(Debug, Deserialize)]
pub struct NewSession {
    pub case_id: String,
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub plane: Option<String>,
    pub index: Option<usize>,
    pub channel: Option<String>,
    /// Comma-separated subset of `mask`, `fg`, `bg`, `gt`.
    pub overlay: Option<String>,
    /// Session whose mask and guidance are overlaid.
    pub session: Option<String>,
    pub ct_low: Option<f32>,
    pub ct_high: Option<f32>,
    pub pet_low: Option<f32>,
    pub pet_high: Option<f32>,
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/:id/slice", get(slice))
        .route("/sessions", post(create_session))
        .route("/sessions/:id/clicks", post(add_click))
        .route("/sessions/:id/clicks/last", delete(undo_click))
        .route("/sessions/:id/predict", post(predict))
        .route("/sessions/:id/state", get(state))
        .with_state(store)
}

async fn list_cases(State(store): State<Arc<SessionStore>>) -> ApiResult<Json<Vec<CaseSummary>>> {
    let mut out = Vec::new();
    for id in store.case_ids() {
        let c = store.case(&id)?;
        out.push(CaseSummary {
            id,
            shape: c.grid().shape,
            spacing: c.grid().spacing,
            tracer: c.tracer,
            has_ground_truth: c.lesion_gt.is_some(),
        });
    }
    Ok(Json(out))
}

async fn create_session(
    State(store): State<Arc<SessionStore>>,
    Json(body): Json<NewSession>,
) -> ApiResult<impl IntoResponse> {
    let state = store.create(&body.case_id)?;
    Ok((StatusCode::CREATED, Json(state)))
}

async fn add_click(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    Json(body): Json<ClickRequest>,
) -> ApiResult<impl IntoResponse> {
    let click = store.add_click(&id, body)?;
    Ok((StatusCode::CREATED, Json(click)))
}

async fn undo_click(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    store.undo(&id)?;
    Ok(Json(store.state(&id)?))
}

async fn predict(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let resp = blocking(move || store.predict(&id)).await?;
    Ok(Json(resp))
}

async fn state(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(store.state(&id)?))
}

fn parse_or<T: std::str::FromStr<Err = Error>>(v: Option<&str>, default: T) -> petseg::Result<T> {
    v.map(str::parse).transpose().map(|o| o.unwrap_or(default))
}

async fn slice(
    State(store): State<Arc<SessionStore>>,
    Path(case_id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let png = blocking(move || {
        let case = store.case(&case_id)?;
        let plane = parse_or(q.plane.as_deref(), Plane::Axial)?;
        let channel = parse_or(q.channel.as_deref(), SliceChannel::Fused)?;
        let index = q.index.unwrap_or(case.grid().shape[plane.axis()] / 2);
        let mut req = SliceRequest::new(plane, index, channel);
        req.ct_window = Window {
            low: q.ct_low.unwrap_or(Window::CT.low),
            high: q.ct_high.unwrap_or(Window::CT.high),
        };
        req.pet_window = Window {
            low: q.pet_low.unwrap_or(Window::PET.low),
            high: q.pet_high.unwrap_or(Window::PET.high),
        };
        let wanted: Vec<String> = q
            .overlay
            .as_deref()
            .unwrap_or("")
            .split(',')
            .map(|s| s.trim().to_ascii_lowercase())
            .filter(|s| !s.is_empty())
            .collect();
        if let Some(w) = wanted.iter().find(|w| !["mask", "fg", "bg", "gt"].contains(&w.as_str())) {
            return Err(Error::InvalidArgument(format!("unknown overlay {w:?}")));
        }
        let has = |name: &str| wanted.iter().any(|w| w == name);
        let needs_session = has("mask") || has("fg") || has("bg");
        let gt_mask = if has("gt") {
            Some(
                case.lesion_gt
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("case {case_id} has no ground truth")))?
                    .mask(),
            )
        } else {
            None
        };
        let (mask, guidance) = match (&q.session, needs_session) {
            (_, false) => (None, None),
            (None, true) => return Err(Error::InvalidArgument("mask/fg/bg overlays need a session".into())),
            (Some(sid), true) => store.with_session(sid, |s| {
                if s.case().id != case_id {
                    return Err(Error::InvalidArgument(format!("session {sid} is for case {}", s.case().id)));
                }
                let guidance = if has("fg") || has("bg") {
                    Some(s.guidance_maps(store.pipeline())?)
                } else {
                    None
                };
                Ok((s.latest_mask().cloned(), guidance))
            })??,
        };
        let overlays = Overlays {
            mask: if has("mask") { mask.as_ref() } else { gt_mask.as_ref() },
            fg_guidance: guidance.as_ref().filter(|_| has("fg")).map(|g| &g.0),
            bg_guidance: guidance.as_ref().filter(|_| has("bg")).map(|g| &g.1),
        };
        encode_png(&render_slice(&case, &req, &overlays)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
