//! HTTP/1.1 JSON front end.
//!
//! | route                    | body / query                          |
//! |--------------------------|---------------------------------------|
//! | `POST /query`            | [`QueryRequest`]                      |
//! | `POST /estimate_cost`    | [`EstimateRequest`]                   |
//! | `GET /budget`            | `?dataset=`                           |
//! | `GET /metadata`          | `?dataset=`                           |
//! | `GET /dummy_dataset`     | `?dataset=&nb_rows=&seed=` (CSV)      |
//! | `GET /previous_queries`  |                                       |
//!
//! The caller is whoever the `X-Lomas-User` header names.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequestParts, Query, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::request::Parts;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tokio::time::Instant;

use crate::error::ServiceError;
use crate::service::{EstimateRequest, Gatekeeper, QueryRequest};

pub const USER_HEADER: &str = "X-Lomas-User";

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    gatekeeper: Arc<Gatekeeper>,
    workers: Arc<Semaphore>,
}

impl AppState {
    /// `workers` bounds how many requests execute at once.
    pub fn new(gatekeeper: Arc<Gatekeeper>, workers: usize) -> Self {
        AppState {
            gatekeeper,
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    /// Runs blocking service code on the bounded worker pool.
    async fn run<T, F>(&self, f: F) -> Result<T, ServiceError>
    where
        T: Send + 'static,
        F: FnOnce(&Gatekeeper) -> Result<T, ServiceError> + Send + 'static,
    {
        let _permit = self
            .workers
            .clone()
            .acquire_owned()
            .await
            .map_err(|_| ServiceError::InternalError("worker pool closed".into()))?;
        let gk = self.gatekeeper.clone();
        tokio::task::spawn_blocking(move || f(&gk))
            .await
            .map_err(|e| ServiceError::InternalError(format!("worker failed: {e}")))?
    }
}

/// Declared caller identity.
pub struct User(pub String);

impl<S: Send + Sync> FromRequestParts<S> for User {
    type Rejection = ServiceError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, ServiceError> {
        parts
            .headers
            .get(USER_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| User(v.to_owned()))
            .ok_or_else(|| ServiceError::AccessDenied(format!("missing {USER_HEADER} header")))
    }
}

fn bad_json(e: JsonRejection) -> ServiceError {
    ServiceError::ValidationFailed(e.body_text())
}

fn bad_query(e: QueryRejection) -> ServiceError {
    ServiceError::ValidationFailed(e.body_text())
}

async fn query(
    State(state): State<AppState>,
    User(user): User,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Response {
    let start = Instant::now();
    let private = !matches!(&body, Ok(Json(r)) if r.dummy);
    let out = match body {
        Ok(Json(request)) => state.run(move |gk| gk.handle_query_unpadded(&user, &request)).await,
        Err(e) => Err(bad_json(e)),
    };
    if private {
        let floor = state.gatekeeper.config().min_latency;
        tokio::time::sleep_until(start + floor).await;
    }
    match out {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn estimate_cost(
    State(state): State<AppState>,
    User(user): User,
    body: Result<Json<EstimateRequest>, JsonRejection>,
) -> Result<Response, ServiceError> {
    let Json(request) = body.map_err(bad_json)?;
    let cost = state.run(move |gk| gk.handle_estimate_cost(&user, &request)).await?;
    Ok(Json(cost).into_response())
}

#[derive(Deserialize)]
struct DatasetParam {
    dataset: String,
}

async fn budget(
    State(state): State<AppState>,
    User(user): User,
    params: Result<Query<DatasetParam>, QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(p) = params.map_err(bad_query)?;
    let snapshot = state.run(move |gk| gk.handle_budget(&user, &p.dataset)).await?;
    Ok(Json(snapshot).into_response())
}

async fn metadata(
    State(state): State<AppState>,
    User(user): User,
    params: Result<Query<DatasetParam>, QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(p) = params.map_err(bad_query)?;
    let md = state.run(move |gk| gk.handle_metadata(&user, &p.dataset)).await?;
    Ok(Json(md).into_response())
}

#[derive(Deserialize)]
struct DummyParams {
    dataset: String,
    nb_rows: Option<usize>,
    seed: Option<i64>,
}

async fn dummy_dataset(
    State(state): State<AppState>,
    User(user): User,
    params: Result<Query<DummyParams>, QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(p) = params.map_err(bad_query)?;
    let csv = state
        .run(move |gk| gk.handle_dummy_dataset(&user, &p.dataset, p.nb_rows, p.seed))
        .await?;
    Ok(([(CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn previous_queries(State(state): State<AppState>, User(user): User) -> Result<Response, ServiceError> {
    let entries = state.run(move |gk| gk.handle_previous_queries(&user)).await?;
    Ok(Json(entries).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/estimate_cost", post(estimate_cost))
        .route("/budget", get(budget))
        .route("/metadata", get(metadata))
        .route("/dummy_dataset", get(dummy_dataset))
        .route("/previous_queries", get(previous_queries))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server on its own runtime thread, for embedding in tests and tools.
pub struct BackgroundServer {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    /// Binds `addr` (port 0 picks a free one) and starts serving.
    pub fn start(state: AppState, addr: SocketAddr) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let out = runtime.block_on(serve(listener, state, async {
                let _ = stopped.await;
            }));
            runtime.shutdown_timeout(Duration::from_secs(5));
            out
        });
        Ok(BackgroundServer {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
