//! Read-only adapters that fetch private CSV datasets and parse them against
//! their metadata, behind a per-locator single-flight cache.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gatekeeper_core::{Dataset, DatasetError, DatasetMetadata};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    LocalPath,
    HttpUrl,
    /// Reserved; no adapter is implemented.
    S3,
}

impl StorageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StorageKind::LocalPath => "local_path",
            StorageKind::HttpUrl => "http_url",
            StorageKind::S3 => "s3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLocator")]
pub struct StorageLocator {
    kind: StorageKind,
    address: String,
}

#[derive(Deserialize)]
struct RawLocator {
    kind: StorageKind,
    address: String,
}

impl TryFrom<RawLocator> for StorageLocator {
    type Error = LocatorError;

    fn try_from(raw: RawLocator) -> Result<Self, LocatorError> {
        StorageLocator::new(raw.kind, raw.address)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocatorError {
    #[error("locator address is empty")]
    EmptyAddress,
    #[error("http_url address must be an absolute http(s) URL, got `{0}`")]
    NotAbsoluteUrl(String),
    #[error("locator must look like `<kind>:<address>` with kind local_path or http_url, got `{0}`")]
    Malformed(String),
}

impl StorageLocator {
    pub fn new(kind: StorageKind, address: impl Into<String>) -> Result<Self, LocatorError> {
        let address = address.into();
        if address.is_empty() {
            return Err(LocatorError::EmptyAddress);
        }
        if kind == StorageKind::HttpUrl {
            let rest = address
                .strip_prefix("http://")
                .or_else(|| address.strip_prefix("https://"));
            if rest.is_none_or(|r| r.is_empty() || r.starts_with('/')) {
                return Err(LocatorError::NotAbsoluteUrl(address));
            }
        }
        Ok(StorageLocator { kind, address })
    }

    pub fn local(path: impl Into<String>) -> Result<Self, LocatorError> {
        Self::new(StorageKind::LocalPath, path)
    }

    pub fn http(url: impl Into<String>) -> Result<Self, LocatorError> {
        Self::new(StorageKind::HttpUrl, url)
    }

    pub fn kind(&self) -> StorageKind {
        self.kind
    }

    pub fn address(&self) -> &str {
        &self.address
    }
}

impl fmt::Display for StorageLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.address)
    }
}

impl FromStr for StorageLocator {
    type Err = LocatorError;

    /// Parses `local_path:/data/p.csv` or `http_url:https://host/p.csv`.
    fn from_str(s: &str) -> Result<Self, LocatorError> {
        let (kind, address) = s.split_once(':').ok_or_else(|| LocatorError::Malformed(s.to_owned()))?;
        let kind = match kind {
            "local_path" => StorageKind::LocalPath,
            "http_url" => StorageKind::HttpUrl,
            "s3" => StorageKind::S3,
            _ => return Err(LocatorError::Malformed(s.to_owned())),
        };
        Self::new(kind, address)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FetchError {
    #[error("dataset not found at {0}")]
    NotFound(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed CSV: {0}")]
    Parse(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("dataset too large: {0}")]
    TooLarge(String),
    #[error("no adapter for storage kind `{0}`")]
    Unsupported(&'static str),
}

/// Fetch limits; field names double as the configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetStoreConfig {
    pub dataset_cache_ttl_seconds: u64,
    pub fetch_timeout_seconds: u64,
    pub max_rows: usize,
    pub max_bytes: u64,
}

impl Default for DatasetStoreConfig {
    fn default() -> Self {
        DatasetStoreConfig {
            dataset_cache_ttl_seconds: 300,
            fetch_timeout_seconds: 30,
            max_rows: 1_000_000,
            max_bytes: 256 * 1024 * 1024,
        }
    }
}

impl DatasetStoreConfig {
    /// Defaults overridden by `LOMAS_<KEY>` variables, e.g. `LOMAS_MAX_ROWS`.
    pub fn from_env() -> Result<Self, String> {
        fn var<T: FromStr>(key: &str, default: T) -> Result<T, String> {
            match std::env::var(format!("LOMAS_{}", key.to_uppercase())) {
                Ok(v) => v.trim().parse().map_err(|_| format!("invalid value for {key}: `{v}`")),
                Err(_) => Ok(default),
            }
        }
        let d = Self::default();
        Ok(DatasetStoreConfig {
            dataset_cache_ttl_seconds: var("dataset_cache_ttl_seconds", d.dataset_cache_ttl_seconds)?,
            fetch_timeout_seconds: var("fetch_timeout_seconds", d.fetch_timeout_seconds)?,
            max_rows: var("max_rows", d.max_rows)?,
            max_bytes: var("max_bytes", d.max_bytes)?,
        })
    }
}

struct Cached {
    fetched_at: Instant,
    metadata: DatasetMetadata,
    data: Arc<Dataset>,
}

/// Fetches datasets; safe to share between threads.
pub struct DatasetStore {
    config: DatasetStoreConfig,
    agent: ureq::Agent,
    // One slot per locator. Holding a slot's lock while fetching makes
    // concurrent misses for the same locator wait for a single fetch.
    slots: Mutex<HashMap<StorageLocator, Arc<Mutex<Option<Cached>>>>>,
    fetches: AtomicU64,
}

impl Default for DatasetStore {
    fn default() -> Self {
        Self::new(DatasetStoreConfig::default())
    }
}

impl DatasetStore {
    pub fn new(config: DatasetStoreConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.fetch_timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .into();
        DatasetStore {
            config,
            agent,
            slots: Mutex::new(HashMap::new()),
            fetches: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &DatasetStoreConfig {
        &self.config
    }

    /// Number of reads that actually reached storage.
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }

    /// Drops every cached dataset.
    pub fn invalidate(&self) {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }

    /// Returns the parsed dataset, from cache when fresh. Errors are never cached.
    pub fn fetch_dataset(
        &self,
        locator: &StorageLocator,
        metadata: &DatasetMetadata,
    ) -> Result<Arc<Dataset>, FetchError> {
        let slot = {
            let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
            slots.entry(locator.clone()).or_default().clone()
        };
        let mut slot = slot.lock().unwrap_or_else(|e| e.into_inner());
        let ttl = Duration::from_secs(self.config.dataset_cache_ttl_seconds);
        if let Some(c) = slot.as_ref() {
            if c.fetched_at.elapsed() < ttl && c.metadata == *metadata {
                return Ok(c.data.clone());
            }
        }
        let data = Arc::new(self.fetch_uncached(locator, metadata)?);
        *slot = Some(Cached {
            fetched_at: Instant::now(),
            metadata: metadata.clone(),
            data: data.clone(),
        });
        Ok(data)
    }

    /// Reads and parses without touching the cache.
    pub fn fetch_uncached(&self, locator: &StorageLocator, metadata: &DatasetMetadata) -> Result<Dataset, FetchError> {
        self.fetches.fetch_add(1, Ordering::SeqCst);
        let bytes = match locator.kind() {
            StorageKind::LocalPath => self.read_local(locator.address())?,
            StorageKind::HttpUrl => self.read_http(locator.address())?,
            StorageKind::S3 => return Err(FetchError::Unsupported("s3")),
        };
        Dataset::read_csv(bytes.as_slice(), metadata, self.config.max_rows).map_err(|e| match e {
            DatasetError::Parse(m) => FetchError::Parse(m),
            DatasetError::SchemaMismatch(m) => FetchError::SchemaMismatch(m),
            DatasetError::TooManyRows(n) => FetchError::TooLarge(format!("more than {n} rows")),
        })
    }

    fn read_local(&self, path: &str) -> Result<Vec<u8>, FetchError> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => FetchError::NotFound(path.to_owned()),
            _ => FetchError::Transport(format!("{path}: {e}")),
        })?;
        let mut bytes = Vec::new();
        file.take(self.config.max_bytes + 1)
            .read_to_end(&mut bytes)
            .map_err(|e| FetchError::Transport(format!("{path}: {e}")))?;
        if bytes.len() as u64 > self.config.max_bytes {
            return Err(FetchError::TooLarge(format!(
                "more than {} bytes",
                self.config.max_bytes
            )));
        }
        Ok(bytes)
    }

    fn read_http(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        let mut resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| FetchError::Transport(format!("{url}: {e}")))?;
        match resp.status().as_u16() {
            200..=299 => {}
            404 | 410 => return Err(FetchError::NotFound(url.to_owned())),
            s => return Err(FetchError::Transport(format!("{url}: HTTP status {s}"))),
        }
        resp.body_mut()
            .with_config()
            .limit(self.config.max_bytes)
            .read_to_vec()
            .map_err(|e| match e {
                ureq::Error::BodyExceedsLimit(_) => {
                    FetchError::TooLarge(format!("more than {} bytes", self.config.max_bytes))
                }
                e => FetchError::Transport(format!("{url}: {e}")),
            })
    }
}
