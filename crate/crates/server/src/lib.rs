//! Gatekeeper service: request handling over the admin and dataset stores,
//! plus its HTTP front end.

pub mod error;
pub mod http;
pub mod service;

pub use error::{ErrorBody, ServiceError};
pub use http::{router, serve, AppState, BackgroundServer, USER_HEADER};
pub use service::{
    EstimateRequest, FaultHook, Gatekeeper, GatekeeperConfig, QueryRequest, QueryResponse, Stage, DEFAULT_DUMMY_ROWS,
    DEFAULT_DUMMY_SEED,
};
