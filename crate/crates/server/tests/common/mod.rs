//! Shared setup for the server integration tests: a PENGUIN store, an
//! in-process server and a small blocking HTTP client.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use gatekeeper_core::budget::BudgetSnapshot;
use gatekeeper_core::{AggregateSpec, PrivacyBudget, PrivacyParams, QueryAst};
use gatekeeper_server::{
    AppState, BackgroundServer, ErrorBody, Gatekeeper, GatekeeperConfig, QueryRequest, QueryResponse,
};
use gatekeeper_store::{AdminStore, StorageLocator};
use serde::Serialize;

pub const USER: &str = "Dr. Antartica";
pub const DATASET: &str = "PENGUIN";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn metadata_doc() -> String {
    std::fs::read_to_string(fixture("penguin_metadata.yaml")).unwrap()
}

pub fn budget(eps: &str, delta: &str) -> PrivacyBudget {
    PrivacyBudget::parse(eps, delta).unwrap()
}

/// A store at `dir/store.jsonl` holding PENGUIN (local CSV) and `USER` with
/// the given allocation.
pub fn penguin_store(dir: &Path, initial: PrivacyBudget) -> Arc<AdminStore> {
    let store = AdminStore::open(dir.join("store.jsonl")).unwrap();
    store
        .add_dataset(
            DATASET,
            StorageLocator::local(fixture("penguins.csv").to_str().unwrap()).unwrap(),
            &metadata_doc(),
        )
        .unwrap();
    store.add_user_with_budget(USER, DATASET, initial).unwrap();
    Arc::new(store)
}

pub fn quick_config() -> GatekeeperConfig {
    GatekeeperConfig {
        min_latency: Duration::ZERO,
        ..Default::default()
    }
}

pub fn start(gk: Gatekeeper, workers: usize) -> BackgroundServer {
    BackgroundServer::start(AppState::new(Arc::new(gk), workers), "127.0.0.1:0".parse().unwrap()).unwrap()
}

pub fn mean_query() -> QueryAst {
    QueryAst::new(vec![AggregateSpec::mean("bill_length")])
}

pub fn count_query() -> QueryAst {
    QueryAst::new(vec![AggregateSpec::count()])
}

pub fn private(query: QueryAst, eps: f64, delta: f64) -> QueryRequest {
    QueryRequest::private(DATASET, query, PrivacyParams::new(eps, delta))
}

#[derive(Debug)]
pub struct Reply {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: String,
}

impl Reply {
    pub fn json<T: serde::de::DeserializeOwned>(&self) -> T {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("{e}: {}", self.body))
    }

    pub fn error(&self) -> ErrorBody {
        self.json()
    }

    pub fn code(&self) -> String {
        serde_json::from_str::<ErrorBody>(&self.body)
            .map(|b| b.code)
            .unwrap_or_else(|_| format!("<{}>", self.status))
    }
}

pub struct Client {
    agent: ureq::Agent,
    base: String,
    user: Option<String>,
}

impl Client {
    pub fn new(base: &str, user: Option<&str>) -> Self {
        Client {
            agent: ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(60)))
                .build()
                .into(),
            base: base.to_owned(),
            user: user.map(str::to_owned),
        }
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        Self::try_finish(resp).expect("transport")
    }

    fn try_finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Reply, ureq::Error> {
        let mut resp = resp?;
        let content_type = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        Ok(Reply {
            status: resp.status().as_u16(),
            content_type,
            body: resp.body_mut().read_to_string()?,
        })
    }

    /// Like [`Self::post`], but transport failures are returned, not fatal.
    pub fn try_post<T: Serialize>(&self, path: &str, body: &T) -> Result<Reply, ureq::Error> {
        let mut req = self
            .agent
            .post(format!("{}{path}", self.base))
            .content_type("application/json");
        if let Some(u) = &self.user {
            req = req.header("X-Lomas-User", u);
        }
        Self::try_finish(req.send(serde_json::to_string(body).unwrap()))
    }

    pub fn post_raw(&self, path: &str, body: &str) -> Reply {
        let mut req = self
            .agent
            .post(format!("{}{path}", self.base))
            .content_type("application/json");
        if let Some(u) = &self.user {
            req = req.header("X-Lomas-User", u);
        }
        Self::finish(req.send(body))
    }

    pub fn post<T: Serialize>(&self, path: &str, body: &T) -> Reply {
        self.post_raw(path, &serde_json::to_string(body).unwrap())
    }

    pub fn get(&self, path: &str) -> Reply {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(u) = &self.user {
            req = req.header("X-Lomas-User", u);
        }
        Self::finish(req.call())
    }

    pub fn query(&self, request: &QueryRequest) -> Result<QueryResponse, Reply> {
        let r = self.post("/query", request);
        if r.status == 200 {
            Ok(r.json())
        } else {
            Err(r)
        }
    }

    pub fn budget(&self, dataset: &str) -> BudgetSnapshot {
        let r = self.get(&format!("/budget?dataset={dataset}"));
        assert_eq!(r.status, 200, "{}", r.body);
        r.json()
    }
}
