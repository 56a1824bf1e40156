//! Request handling independent of the HTTP transport.
//!
//! Private queries run, in order: access check, per-user guard, validation,
//! budget pre-check, fetch + clamp + noisy execution, one atomic
//! spend-and-archive commit, response. The guard is released on every exit
//! path, including panics; dummy queries never touch the guard or ledger.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gatekeeper_core::budget::{BudgetSnapshot, SpendOutcome};
use gatekeeper_core::{
    clamp_dataset, execute_dp, generate_dummy, validate_query, validate_query_with, DatasetMetadata, DpError,
    PrivacyBudget, PrivacyParams, QueryAst, ResultEntry, ValidationMode,
};
use gatekeeper_store::{AdminStore, ArchiveEntry, DatasetRecord, DatasetStore, DatasetStoreConfig, StoreError};
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const DEFAULT_DUMMY_ROWS: usize = 100;
pub const DEFAULT_DUMMY_SEED: i64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub dataset_name: String,
    pub query: QueryAst,
    pub params: PrivacyParams,
    #[serde(default)]
    pub dummy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nb_rows: Option<usize>,
}

impl QueryRequest {
    pub fn private(dataset_name: impl Into<String>, query: QueryAst, params: PrivacyParams) -> Self {
        QueryRequest {
            dataset_name: dataset_name.into(),
            query,
            params,
            dummy: false,
            seed: None,
            nb_rows: None,
        }
    }

    pub fn dummy(dataset_name: impl Into<String>, query: QueryAst, params: PrivacyParams, seed: i64) -> Self {
        QueryRequest {
            dummy: true,
            seed: Some(seed),
            ..Self::private(dataset_name, query, params)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub values: Vec<ResultEntry>,
    pub charged_cost: PrivacyBudget,
    pub remaining_budget: PrivacyBudget,
}

impl QueryResponse {
    pub fn get(&self, group: Option<&str>, aggregate: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|e| e.group.as_deref() == group && e.aggregate == aggregate)
            .map(|e| e.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRequest {
    pub dataset_name: String,
    pub query: QueryAst,
    pub params: PrivacyParams,
}

/// Points in the private pipeline where a [`FaultHook`] is invoked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GuardAcquired,
    Fetched,
    Executed,
}

/// Test hook called at each [`Stage`]; it may block or panic.
pub type FaultHook = Arc<dyn Fn(&str, Stage) + Send + Sync>;

#[derive(Debug, Clone)]
pub struct GatekeeperConfig {
    /// Private-path responses take at least this long.
    pub min_latency: Duration,
    /// Seeds one noise stream shared by all dummy executions; fresh OS
    /// randomness when unset.
    pub dummy_noise_seed: Option<u64>,
    pub datasets: DatasetStoreConfig,
}

impl Default for GatekeeperConfig {
    fn default() -> Self {
        GatekeeperConfig {
            min_latency: Duration::from_millis(50),
            dummy_noise_seed: None,
            datasets: DatasetStoreConfig::default(),
        }
    }
}

impl GatekeeperConfig {
    /// Reads `LOMAS_MIN_LATENCY_MS`, `LOMAS_DUMMY_NOISE_SEED` and the dataset
    /// store keys.
    pub fn from_env() -> Result<Self, String> {
        let mut c = GatekeeperConfig {
            datasets: DatasetStoreConfig::from_env()?,
            ..Default::default()
        };
        if let Ok(v) = std::env::var("LOMAS_MIN_LATENCY_MS") {
            let ms: u64 = v
                .trim()
                .parse()
                .map_err(|_| format!("invalid LOMAS_MIN_LATENCY_MS `{v}`"))?;
            c.min_latency = Duration::from_millis(ms);
        }
        if let Ok(v) = std::env::var("LOMAS_DUMMY_NOISE_SEED") {
            c.dummy_noise_seed = Some(
                v.trim()
                    .parse()
                    .map_err(|_| format!("invalid LOMAS_DUMMY_NOISE_SEED `{v}`"))?,
            );
        }
        Ok(c)
    }
}

pub struct Gatekeeper {
    store: Arc<AdminStore>,
    datasets: DatasetStore,
    config: GatekeeperConfig,
    dummy_noise: Option<Mutex<ChaCha20Rng>>,
    fault: Option<FaultHook>,
}

fn store_error(e: StoreError) -> ServiceError {
    match e {
        StoreError::UnknownDataset(d) => ServiceError::UnknownDataset(d),
        StoreError::UnknownUser(u) => ServiceError::AccessDenied(format!("unknown user `{u}`")),
        StoreError::UnknownUserOrDataset { user, dataset } => {
            ServiceError::AccessDenied(format!("user `{user}` has no access to dataset `{dataset}`"))
        }
        StoreError::QueryInProgress(u) => ServiceError::QueryInProgress(u),
        e => ServiceError::InternalError(e.to_string()),
    }
}

fn validation_error(e: DpError) -> ServiceError {
    ServiceError::ValidationFailed(e.to_string())
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

impl Gatekeeper {
    pub fn new(store: Arc<AdminStore>, config: GatekeeperConfig) -> Self {
        Gatekeeper {
            store,
            datasets: DatasetStore::new(config.datasets.clone()),
            dummy_noise: config
                .dummy_noise_seed
                .map(|s| Mutex::new(ChaCha20Rng::seed_from_u64(s))),
            config,
            fault: None,
        }
    }

    pub fn with_fault_hook(mut self, hook: FaultHook) -> Self {
        self.fault = Some(hook);
        self
    }

    pub fn store(&self) -> &AdminStore {
        &self.store
    }

    pub fn dataset_store(&self) -> &DatasetStore {
        &self.datasets
    }

    pub fn config(&self) -> &GatekeeperConfig {
        &self.config
    }

    fn fault(&self, user: &str, stage: Stage) {
        if let Some(hook) = &self.fault {
            hook(user, stage);
        }
    }

    /// The dataset, provided `user` holds a budget on it.
    fn authorize(&self, user: &str, dataset: &str) -> Result<DatasetRecord, ServiceError> {
        let record = self
            .store
            .get_dataset(dataset)
            .map_err(store_error)?
            .ok_or_else(|| ServiceError::UnknownDataset(dataset.to_owned()))?;
        let allowed = self
            .store
            .get_user(user)
            .map_err(store_error)?
            .is_some_and(|u| u.budgets.contains_key(dataset));
        if !allowed {
            return Err(ServiceError::AccessDenied(format!(
                "user `{user}` has no access to dataset `{dataset}`"
            )));
        }
        Ok(record)
    }

    /// Full query handling, including the private-path latency floor.
    pub fn handle_query(&self, user: &str, request: &QueryRequest) -> Result<QueryResponse, ServiceError> {
        let start = Instant::now();
        let out = self.handle_query_unpadded(user, request);
        if !request.dummy {
            if let Some(rest) = self.config.min_latency.checked_sub(start.elapsed()) {
                std::thread::sleep(rest);
            }
        }
        out
    }

    /// [`Self::handle_query`] without the latency floor; the async front end
    /// pads with a timer instead of a blocked thread.
    pub fn handle_query_unpadded(&self, user: &str, request: &QueryRequest) -> Result<QueryResponse, ServiceError> {
        if request.dummy {
            self.dummy_query(user, request)
        } else {
            self.private_query(user, request)
        }
    }

    fn private_query(&self, user: &str, request: &QueryRequest) -> Result<QueryResponse, ServiceError> {
        if request.seed.is_some() || request.nb_rows.is_some() {
            return Err(ServiceError::ValidationFailed(
                "seed and nb_rows are only allowed with dummy = true".into(),
            ));
        }
        let dataset = self.authorize(user, &request.dataset_name)?;
        self.store.acquire_query_guard(user).map_err(store_error)?;

        let out = catch_unwind(AssertUnwindSafe(|| self.run_private(user, &dataset, request))).unwrap_or_else(|p| {
            Err(ServiceError::InternalError(format!(
                "query aborted: {}",
                panic_message(&*p)
            )))
        });

        if let Err(e) = self.store.release_query_guard(user) {
            tracing::error!(user, error = %e, "failed to release query guard");
            // A second attempt covers transient i/o errors; a persistent
            // failure is cleared by the reconcile pass on restart.
            if self.store.release_query_guard(user).is_err() && out.is_err() {
                return Err(ServiceError::InternalError(format!(
                    "failed to release query guard: {e}"
                )));
            }
        }
        out
    }

    fn run_private(
        &self,
        user: &str,
        dataset: &DatasetRecord,
        request: &QueryRequest,
    ) -> Result<QueryResponse, ServiceError> {
        self.fault(user, Stage::GuardAcquired);
        let md = &dataset.metadata;
        let query = validate_query(&request.query, md, &request.params).map_err(validation_error)?;

        let before = self
            .store
            .get_budget(user, &dataset.dataset_name)
            .map_err(store_error)?;
        if !query.cost().fits_within(&before.remaining) {
            return Err(ServiceError::InsufficientBudget {
                remaining: before.remaining,
            });
        }

        let data = self
            .datasets
            .fetch_dataset(&dataset.locator, md)
            .map_err(|e| ServiceError::DatasetUnavailable(e.to_string()))?;
        self.fault(user, Stage::Fetched);
        let data = clamp_dataset(&data, md).map_err(|e| ServiceError::DatasetUnavailable(e.to_string()))?;

        let mut rng = StdRng::from_os_rng();
        let result = execute_dp(&query, &data, md, &mut rng).map_err(|e| ServiceError::InternalError(e.to_string()))?;
        self.fault(user, Stage::Executed);

        let archive = ArchiveEntry::new(
            user,
            &dataset.dataset_name,
            request.query.clone(),
            request.params,
            result.charged_cost,
            result.values.clone(),
        );
        match self.store.commit_spend(archive).map_err(store_error)? {
            SpendOutcome::Accepted { remaining } => Ok(QueryResponse {
                values: result.values,
                charged_cost: result.charged_cost,
                remaining_budget: remaining,
            }),
            SpendOutcome::InsufficientBudget { remaining } => Err(ServiceError::InsufficientBudget { remaining }),
        }
    }

    fn dummy_rows(&self, nb_rows: Option<usize>, min: usize) -> Result<usize, ServiceError> {
        let n = nb_rows.unwrap_or(DEFAULT_DUMMY_ROWS);
        if n < min || n > self.config.datasets.max_rows {
            return Err(ServiceError::ValidationFailed(format!(
                "nb_rows must lie in [{min}, {}], got {n}",
                self.config.datasets.max_rows
            )));
        }
        Ok(n)
    }

    fn dummy_query(&self, user: &str, request: &QueryRequest) -> Result<QueryResponse, ServiceError> {
        let dataset = self.authorize(user, &request.dataset_name)?;
        let nb_rows = self.dummy_rows(request.nb_rows, 1)?;
        let md = &dataset.metadata;
        let query = validate_query_with(&request.query, md, &request.params, ValidationMode::Dummy)
            .map_err(validation_error)?;
        let data = generate_dummy(md, nb_rows, request.seed.unwrap_or(DEFAULT_DUMMY_SEED));

        let result = match &self.dummy_noise {
            Some(shared) => {
                let mut rng = shared.lock().unwrap_or_else(|e| e.into_inner());
                execute_dp(&query, &data, md, &mut *rng)
            }
            None => execute_dp(&query, &data, md, &mut StdRng::from_os_rng() as &mut dyn RngCore),
        }
        .map_err(|e| ServiceError::InternalError(e.to_string()))?;

        let remaining = self
            .store
            .get_budget(user, &dataset.dataset_name)
            .map_err(store_error)?
            .remaining;
        Ok(QueryResponse {
            values: result.values,
            charged_cost: PrivacyBudget::ZERO,
            remaining_budget: remaining,
        })
    }

    /// Cost the query would be charged on private data. Never touches the ledger.
    pub fn handle_estimate_cost(&self, user: &str, request: &EstimateRequest) -> Result<PrivacyBudget, ServiceError> {
        let dataset = self.authorize(user, &request.dataset_name)?;
        let query = validate_query(&request.query, &dataset.metadata, &request.params).map_err(validation_error)?;
        Ok(query.cost())
    }

    pub fn handle_budget(&self, user: &str, dataset: &str) -> Result<BudgetSnapshot, ServiceError> {
        self.authorize(user, dataset)?;
        self.store.get_budget(user, dataset).map_err(store_error)
    }

    pub fn handle_metadata(&self, user: &str, dataset: &str) -> Result<DatasetMetadata, ServiceError> {
        Ok(self.authorize(user, dataset)?.metadata)
    }

    /// Dummy table as RFC 4180 CSV; zero rows yields just the header.
    pub fn handle_dummy_dataset(
        &self,
        user: &str,
        dataset: &str,
        nb_rows: Option<usize>,
        seed: Option<i64>,
    ) -> Result<String, ServiceError> {
        let record = self.authorize(user, dataset)?;
        let nb_rows = self.dummy_rows(nb_rows, 0)?;
        Ok(generate_dummy(&record.metadata, nb_rows, seed.unwrap_or(DEFAULT_DUMMY_SEED)).to_csv_string())
    }

    pub fn handle_previous_queries(&self, user: &str) -> Result<Vec<ArchiveEntry>, ServiceError> {
        if self.store.get_user(user).map_err(store_error)?.is_none() {
            return Err(ServiceError::AccessDenied(format!("unknown user `{user}`")));
        }
        self.store.get_previous_queries(user).map_err(store_error)
    }
}
