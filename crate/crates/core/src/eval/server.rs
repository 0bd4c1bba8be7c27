//! JSON API for blind A/B preference collection.
//!
//! - `GET /api/tasks/next?evaluator=ID`
//! - `POST /api/judgments`
//! - `GET /api/stats`
//! - `GET /api/progress?evaluator=ID`

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::corpus::Speaker;
use crate::error::{Error, Result};
use crate::eval::ab::{ab_stats, ABJudgment, ABTask, Choice, JudgmentLog};

pub const PORT_ENV: &str = "TOD_RERANK_PORT";
pub const DEFAULT_PORT: u16 = 8080;

pub struct AbState {
    tasks: Vec<ABTask>,
    index: HashMap<String, usize>,
    log: Mutex<JudgmentLog>,
}

impl AbState {
    pub fn new(tasks: Vec<ABTask>, log: JudgmentLog) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.task_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.task_id.clone()));
            }
        }
        if let Some(j) = log.judgments().iter().find(|j| !index.contains_key(&j.task_id)) {
            return Err(Error::NotFound(format!("logged task {:?}", j.task_id)));
        }
        Ok(AbState {
            tasks,
            index,
            log: Mutex::new(log),
        })
    }

    fn done(&self, log: &JudgmentLog, evaluator: &str) -> usize {
        self.tasks.iter().filter(|t| log.has(&t.task_id, evaluator)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

/// What an evaluator sees: the history and two unattributed responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub history: Vec<Turn>,
    pub option_a: String,
    pub option_b: String,
    pub progress: Progress,
}

#[derive(Debug, Deserialize)]
pub struct EvaluatorQuery {
    pub evaluator: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgmentRequest {
    pub task_id: String,
    pub evaluator_id: String,
    pub choice: Choice,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::InvalidInput(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn evaluator_id(q: &EvaluatorQuery) -> Result<&str, ApiError> {
    let id = q.evaluator.trim();
    if id.is_empty() {
        Err(ApiError(StatusCode::BAD_REQUEST, "evaluator must be non-empty".into()))
    } else {
        Ok(id)
    }
}

async fn next_task(State(st): State<Arc<AbState>>, Query(q): Query<EvaluatorQuery>) -> Result<Response, ApiError> {
    let ev = evaluator_id(&q)?;
    let log = st.log.lock().expect("judgment log poisoned");
    let progress = Progress {
        done: st.done(&log, ev),
        total: st.tasks.len(),
    };
    let body = match st.tasks.iter().find(|t| !log.has(&t.task_id, ev)) {
        Some(t) => serde_json::to_value(TaskView {
            task_id: t.task_id.clone(),
            history: t
                .context
                .utterances
                .iter()
                .map(|u| Turn {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
            option_a: t.left.response.clone(),
            option_b: t.right.response.clone(),
            progress,
        })
        .map_err(Error::from)?,
        None => json!({ "exhausted": true, "progress": progress }),
    };
    Ok(Json(body).into_response())
}

async fn post_judgment(
    State(st): State<Arc<AbState>>,
    Json(req): Json<JudgmentRequest>,
) -> Result<Response, ApiError> {
    if req.evaluator_id.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "evaluator_id must be non-empty".into()));
    }
    if !st.index.contains_key(&req.task_id) {
        return Err(Error::NotFound(format!("task {:?}", req.task_id)).into());
    }
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let judgment = ABJudgment {
        task_id: req.task_id,
        evaluator_id: req.evaluator_id.trim().to_string(),
        choice: req.choice,
        timestamp,
    };
    let mut log = st.log.lock().expect("judgment log poisoned");
    log.append(judgment.clone())?;
    let progress = Progress {
        done: st.done(&log, &judgment.evaluator_id),
        total: st.tasks.len(),
    };
    Ok((
        StatusCode::CREATED,
        Json(json!({ "task_id": judgment.task_id, "progress": progress })),
    )
        .into_response())
}

async fn stats(State(st): State<Arc<AbState>>) -> Result<Response, ApiError> {
    let log = st.log.lock().expect("judgment log poisoned");
    let s = ab_stats(&st.tasks, log.judgments())?;
    Ok(Json(s).into_response())
}

async fn progress(State(st): State<Arc<AbState>>, Query(q): Query<EvaluatorQuery>) -> Result<Response, ApiError> {
    let ev = evaluator_id(&q)?;
    let log = st.log.lock().expect("judgment log poisoned");
    Ok(Json(json!({
        "evaluator": ev,
        "done": st.done(&log, ev),
        "total": st.tasks.len(),
    }))
    .into_response())
}

/// The API routes, plus static files from `assets` for everything else.
pub fn router(state: Arc<AbState>, assets: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/judgments", post(post_judgment))
        .route("/api/stats", get(stats))
        .route("/api/progress", get(progress))
        .with_state(state);
    match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
