//! Users, dataset registrations, metadata documents and query archives,
//! persisted as one JSON-lines file.
//!
//! Every line is `{"collection": <name>, "record": {...}}`. Each mutation
//! rewrites the whole file to `<path>.tmp`, fsyncs it and renames it over
//! `<path>`, so a crash leaves either the old or the new state, never a mix.
//! Writers (the server and the admin CLI) serialize on an exclusive `flock`
//! of `<path>.lock`; within a process an additional mutex orders callers.
//!
//! A budget spend and its archive entry are committed by the same rename, so
//! there is no window in which one exists without the other.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::SystemTime;

use chrono::{DateTime, Utc};
use gatekeeper_core::budget::{BudgetLedgerEntry, BudgetSnapshot, PrivacyBudget, SpendOutcome};
use gatekeeper_core::{parse_metadata, DatasetMetadata, MetadataError, PrivacyParams, QueryAst, ResultEntry};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;
use uuid::Uuid;

use crate::dataset_store::StorageLocator;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dataset `{0}` is not registered")]
    UnknownDataset(String),
    #[error("dataset `{0}` is already registered")]
    DuplicateDataset(String),
    #[error("user `{user}` already has a budget on dataset `{dataset}`")]
    DuplicateUserDataset { user: String, dataset: String },
    #[error("user `{0}` does not exist")]
    UnknownUser(String),
    #[error("no budget for user `{user}` on dataset `{dataset}`")]
    UnknownUserOrDataset { user: String, dataset: String },
    #[error("unknown collection `{0}`; expected users, datasets, metadata or archives")]
    UnknownCollection(String),
    #[error("user `{0}` already has a query in progress")]
    QueryInProgress(String),
    #[error("dataset `{0}` has spent budget; its metadata can no longer change")]
    MetadataInUse(String),
    #[error("metadata describes dataset `{found}`, expected `{expected}`")]
    NameMismatch { expected: String, found: String },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error("store file corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("store i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_name: String,
    /// False while a budget-consuming query is in flight.
    pub may_query: bool,
    pub budgets: BTreeMap<String, BudgetLedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub dataset_name: String,
    pub locator: StorageLocator,
    pub metadata: DatasetMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub id: Uuid,
    pub user_name: String,
    pub dataset_name: String,
    pub query: QueryAst,
    pub params: PrivacyParams,
    pub charged_cost: PrivacyBudget,
    pub result: Vec<ResultEntry>,
    pub timestamp: DateTime<Utc>,
}

impl ArchiveEntry {
    pub fn new(
        user_name: impl Into<String>,
        dataset_name: impl Into<String>,
        query: QueryAst,
        params: PrivacyParams,
        charged_cost: PrivacyBudget,
        result: Vec<ResultEntry>,
    ) -> Self {
        ArchiveEntry {
            id: Uuid::new_v4(),
            user_name: user_name.into(),
            dataset_name: dataset_name.into(),
            query,
            params,
            charged_cost,
            result,
            timestamp: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collection {
    Users,
    Datasets,
    Metadata,
    Archives,
}

impl Collection {
    pub fn as_str(self) -> &'static str {
        match self {
            Collection::Users => "users",
            Collection::Datasets => "datasets",
            Collection::Metadata => "metadata",
            Collection::Archives => "archives",
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Collection {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, StoreError> {
        Ok(match s {
            "users" => Collection::Users,
            "datasets" => Collection::Datasets,
            "metadata" => Collection::Metadata,
            "archives" => Collection::Archives,
            _ => return Err(StoreError::UnknownCollection(s.to_owned())),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetLine {
    dataset_name: String,
    locator: StorageLocator,
}

#[derive(Serialize, Deserialize)]
struct MetadataLine {
    dataset_name: String,
    metadata: DatasetMetadata,
}

#[derive(Serialize)]
struct LineOut<'a, T> {
    collection: &'a str,
    record: &'a T,
}

#[derive(Deserialize)]
struct LineIn<'a> {
    collection: String,
    #[serde(borrow)]
    record: &'a RawValue,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct State {
    users: BTreeMap<String, UserRecord>,
    datasets: BTreeMap<String, DatasetRecord>,
    archives: Vec<ArchiveEntry>,
}

impl State {
    fn parse(text: &str) -> Result<Self, StoreError> {
        let mut state = State::default();
        let mut locators: Vec<(usize, DatasetLine)> = Vec::new();
        let mut metadata: BTreeMap<String, DatasetMetadata> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |e: serde_json::Error| StoreError::Corrupt {
                line: n,
                message: e.to_string(),
            };
            // Records are decoded from text so exact-decimal budgets survive.
            let raw: LineIn = serde_json::from_str(line).map_err(corrupt)?;
            let record = raw.record.get();
            match raw.collection.parse::<Collection>() {
                Ok(Collection::Users) => {
                    let u: UserRecord = serde_json::from_str(record).map_err(corrupt)?;
                    state.users.insert(u.user_name.clone(), u);
                }
                Ok(Collection::Datasets) => locators.push((n, serde_json::from_str(record).map_err(corrupt)?)),
                Ok(Collection::Metadata) => {
                    let m: MetadataLine = serde_json::from_str(record).map_err(corrupt)?;
                    metadata.insert(m.dataset_name, m.metadata);
                }
                Ok(Collection::Archives) => state.archives.push(serde_json::from_str(record).map_err(corrupt)?),
                Err(_) => {
                    return Err(StoreError::Corrupt {
                        line: n,
                        message: format!("unknown collection `{}`", raw.collection),
                    })
                }
            }
        }
        for (line, d) in locators {
            let md = metadata.remove(&d.dataset_name).ok_or_else(|| StoreError::Corrupt {
                line,
                message: format!("dataset `{}` has no metadata record", d.dataset_name),
            })?;
            state.datasets.insert(
                d.dataset_name.clone(),
                DatasetRecord {
                    dataset_name: d.dataset_name,
                    locator: d.locator,
                    metadata: md,
                },
            );
        }
        Ok(state)
    }

    fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        fn line<W: Write, T: Serialize>(w: &mut W, c: Collection, record: &T) -> std::io::Result<()> {
            serde_json::to_writer(
                &mut *w,
                &LineOut {
                    collection: c.as_str(),
                    record,
                },
            )?;
            w.write_all(b"\n")
        }
        for d in self.datasets.values() {
            line(
                &mut w,
                Collection::Datasets,
                &DatasetLine {
                    dataset_name: d.dataset_name.clone(),
                    locator: d.locator.clone(),
                },
            )?;
            line(
                &mut w,
                Collection::Metadata,
                &MetadataLine {
                    dataset_name: d.dataset_name.clone(),
                    metadata: d.metadata.clone(),
                },
            )?;
        }
        for u in self.users.values() {
            line(&mut w, Collection::Users, u)?;
        }
        for a in &self.archives {
            line(&mut w, Collection::Archives, a)?;
        }
        w.flush()
    }

    fn listing(&self, c: Collection) -> Vec<String> {
        match c {
            Collection::Users => self.users.values().map(to_json).collect(),
            Collection::Datasets => self
                .datasets
                .values()
                .map(|d| {
                    to_json(&DatasetLine {
                        dataset_name: d.dataset_name.clone(),
                        locator: d.locator.clone(),
                    })
                })
                .collect(),
            Collection::Metadata => self
                .datasets
                .values()
                .map(|d| {
                    to_json(&MetadataLine {
                        dataset_name: d.dataset_name.clone(),
                        metadata: d.metadata.clone(),
                    })
                })
                .collect(),
            Collection::Archives => self.sorted_archives(|_| true).into_iter().map(to_json).collect(),
        }
    }

    fn sorted_archives(&self, keep: impl Fn(&ArchiveEntry) -> bool) -> Vec<&ArchiveEntry> {
        let mut out: Vec<&ArchiveEntry> = self.archives.iter().filter(|a| keep(a)).collect();
        // Stable: equal timestamps keep append order.
        out.sort_by_key(|a| a.timestamp);
        out
    }
}

fn to_json<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("store records always serialize")
}

/// Identity of the file contents last loaded; any rename or write changes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stamp {
    ino: u64,
    len: u64,
    modified: Option<SystemTime>,
}

impl Stamp {
    fn of(path: &Path) -> std::io::Result<Option<Stamp>> {
        match std::fs::metadata(path) {
            Ok(m) => {
                #[cfg(unix)]
                let ino = std::os::unix::fs::MetadataExt::ino(&m);
                #[cfg(not(unix))]
                let ino = 0;
                Ok(Some(Stamp {
                    ino,
                    len: m.len(),
                    modified: m.modified().ok(),
                }))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

struct Cache {
    stamp: Option<Stamp>,
    state: State,
}

/// Handle on a store file. Cheap to share behind an `Arc`.
pub struct AdminStore {
    path: PathBuf,
    lock_path: PathBuf,
    cache: Mutex<Cache>,
}

impl AdminStore {
    /// Opens (without creating) the store at `path` and validates its contents.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let mut lock_path = path.clone().into_os_string();
        lock_path.push(".lock");
        let store = AdminStore {
            path,
            lock_path: lock_path.into(),
            cache: Mutex::new(Cache {
                stamp: None,
                state: State::default(),
            }),
        };
        store.read(|_| ())?;
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock_file(&self, exclusive: bool) -> Result<File, StoreError> {
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&self.lock_path)?;
        if exclusive {
            f.lock()?;
        } else {
            f.lock_shared()?;
        }
        Ok(f)
    }

    fn refresh(&self, cache: &mut Cache) -> Result<(), StoreError> {
        let stamp = Stamp::of(&self.path)?;
        if stamp != cache.stamp || stamp.is_none() {
            cache.state = match stamp {
                Some(_) => State::parse(&std::fs::read_to_string(&self.path)?)?,
                None => State::default(),
            };
            cache.stamp = stamp;
        }
        Ok(())
    }

    fn read<T>(&self, f: impl FnOnce(&State) -> T) -> Result<T, StoreError> {
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        let _lock = self.lock_file(false)?;
        self.refresh(&mut cache)?;
        Ok(f(&cache.state))
    }

    /// Runs `f` on a copy of the latest state and persists the copy if `f`
    /// reports a change. Errors leave file and cache untouched.
    fn transact<T>(&self, f: impl FnOnce(&mut State) -> Result<(T, bool), StoreError>) -> Result<T, StoreError> {
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        let _lock = self.lock_file(true)?;
        self.refresh(&mut cache)?;
        let mut next = cache.state.clone();
        let (out, dirty) = f(&mut next)?;
        if dirty {
            self.persist(&next)?;
            cache.stamp = Stamp::of(&self.path)?;
            cache.state = next;
        }
        Ok(out)
    }

    fn persist(&self, state: &State) -> Result<(), StoreError> {
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let file = File::create(&tmp)?;
            let mut w = BufWriter::new(&file);
            state.write_to(&mut w)?;
            drop(w);
            file.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            // Makes the rename itself durable.
            File::open(dir)?.sync_all()?;
        }
        Ok(())
    }

    /// Clears every `may_query = false` flag. Call once when the server starts:
    /// a flag that survived a crash belongs to a query that no longer runs.
    pub fn reconcile_after_restart(&self) -> Result<usize, StoreError> {
        self.transact(|s| {
            let mut n = 0;
            for u in s.users.values_mut().filter(|u| !u.may_query) {
                u.may_query = true;
                n += 1;
            }
            Ok((n, n > 0))
        })
    }

    pub fn add_dataset(
        &self,
        dataset_name: &str,
        locator: StorageLocator,
        metadata_document: &str,
    ) -> Result<DatasetRecord, StoreError> {
        let metadata = parse_metadata(metadata_document)?;
        if metadata.dataset_name != dataset_name {
            return Err(StoreError::NameMismatch {
                expected: dataset_name.to_owned(),
                found: metadata.dataset_name,
            });
        }
        self.transact(|s| {
            if s.datasets.contains_key(dataset_name) {
                return Err(StoreError::DuplicateDataset(dataset_name.to_owned()));
            }
            let record = DatasetRecord {
                dataset_name: dataset_name.to_owned(),
                locator,
                metadata,
            };
            s.datasets.insert(dataset_name.to_owned(), record.clone());
            Ok((record, true))
        })
    }

    /// Replaces a dataset's metadata; refused once any budget was spent on it.
    pub fn replace_metadata(&self, dataset_name: &str, metadata_document: &str) -> Result<DatasetRecord, StoreError> {
        let metadata = parse_metadata(metadata_document)?;
        self.transact(|s| {
            let in_use = s
                .users
                .values()
                .filter_map(|u| u.budgets.get(dataset_name))
                .any(|e| !e.spent().is_zero());
            let record = s
                .datasets
                .get_mut(dataset_name)
                .ok_or_else(|| StoreError::UnknownDataset(dataset_name.to_owned()))?;
            if in_use {
                return Err(StoreError::MetadataInUse(dataset_name.to_owned()));
            }
            if metadata.dataset_name != dataset_name {
                return Err(StoreError::NameMismatch {
                    expected: dataset_name.to_owned(),
                    found: metadata.dataset_name,
                });
            }
            record.metadata = metadata;
            Ok((record.clone(), true))
        })
    }

    pub fn add_user_with_budget(
        &self,
        user_name: &str,
        dataset_name: &str,
        initial: PrivacyBudget,
    ) -> Result<UserRecord, StoreError> {
        if initial.delta > Decimal::ONE {
            return Err(StoreError::InvalidBudget(format!(
                "delta must not exceed 1, got {}",
                initial.delta
            )));
        }
        self.transact(|s| {
            if !s.datasets.contains_key(dataset_name) {
                return Err(StoreError::UnknownDataset(dataset_name.to_owned()));
            }
            let user = s.users.entry(user_name.to_owned()).or_insert_with(|| UserRecord {
                user_name: user_name.to_owned(),
                may_query: true,
                budgets: BTreeMap::new(),
            });
            if user.budgets.contains_key(dataset_name) {
                return Err(StoreError::DuplicateUserDataset {
                    user: user_name.to_owned(),
                    dataset: dataset_name.to_owned(),
                });
            }
            user.budgets.insert(
                dataset_name.to_owned(),
                BudgetLedgerEntry::new(user_name, dataset_name, initial),
            );
            Ok((user.clone(), true))
        })
    }

    /// Removes a user and their ledgers. Their archive entries are kept.
    pub fn drop_user(&self, user_name: &str) -> Result<UserRecord, StoreError> {
        self.transact(|s| {
            let u = s
                .users
                .remove(user_name)
                .ok_or_else(|| StoreError::UnknownUser(user_name.to_owned()))?;
            Ok((u, true))
        })
    }

    /// One JSON document per record, in a stable order.
    pub fn show_collection(&self, name: &str) -> Result<Vec<String>, StoreError> {
        let c: Collection = name.parse()?;
        self.read(|s| s.listing(c))
    }

    pub fn get_dataset(&self, dataset_name: &str) -> Result<Option<DatasetRecord>, StoreError> {
        self.read(|s| s.datasets.get(dataset_name).cloned())
    }

    pub fn get_user(&self, user_name: &str) -> Result<Option<UserRecord>, StoreError> {
        self.read(|s| s.users.get(user_name).cloned())
    }

    pub fn get_budget(&self, user_name: &str, dataset_name: &str) -> Result<BudgetSnapshot, StoreError> {
        self.read(|s| {
            s.users
                .get(user_name)
                .and_then(|u| u.budgets.get(dataset_name))
                .map(BudgetLedgerEntry::snapshot)
        })?
        .ok_or_else(|| StoreError::UnknownUserOrDataset {
            user: user_name.to_owned(),
            dataset: dataset_name.to_owned(),
        })
    }

    /// Every ledger entry, ordered by (user, dataset).
    pub fn ledger_entries(&self) -> Result<Vec<BudgetLedgerEntry>, StoreError> {
        self.read(|s| s.users.values().flat_map(|u| u.budgets.values().cloned()).collect())
    }

    /// Sets `may_query = false`, failing if it already was.
    pub fn acquire_query_guard(&self, user_name: &str) -> Result<(), StoreError> {
        self.transact(|s| {
            let u = s
                .users
                .get_mut(user_name)
                .ok_or_else(|| StoreError::UnknownUser(user_name.to_owned()))?;
            if !u.may_query {
                return Err(StoreError::QueryInProgress(user_name.to_owned()));
            }
            u.may_query = false;
            Ok(((), true))
        })
    }

    /// Sets `may_query = true`. Releasing a dropped user is a no-op.
    pub fn release_query_guard(&self, user_name: &str) -> Result<(), StoreError> {
        self.transact(|s| match s.users.get_mut(user_name) {
            Some(u) if !u.may_query => {
                u.may_query = true;
                Ok(((), true))
            }
            _ => Ok(((), false)),
        })
    }

    /// Atomically spends `archive.charged_cost` on the user's ledger and, if
    /// accepted, appends `archive` in the same write. On rejection nothing
    /// changes.
    pub fn commit_spend(&self, archive: ArchiveEntry) -> Result<SpendOutcome, StoreError> {
        self.transact(|s| {
            let unknown = || StoreError::UnknownUserOrDataset {
                user: archive.user_name.clone(),
                dataset: archive.dataset_name.clone(),
            };
            let entry = s
                .users
                .get_mut(&archive.user_name)
                .and_then(|u| u.budgets.get_mut(&archive.dataset_name))
                .ok_or_else(unknown)?;
            let outcome = entry.check_and_spend(&archive.charged_cost);
            let accepted = outcome.is_accepted();
            if accepted {
                s.archives.push(archive);
            }
            Ok((outcome, accepted))
        })
    }

    pub fn append_archive(&self, entry: ArchiveEntry) -> Result<Uuid, StoreError> {
        self.transact(|s| {
            let id = entry.id;
            s.archives.push(entry);
            Ok((id, true))
        })
    }

    /// The user's archive entries in timestamp order.
    pub fn get_previous_queries(&self, user_name: &str) -> Result<Vec<ArchiveEntry>, StoreError> {
        self.read(|s| {
            s.sorted_archives(|a| a.user_name == user_name)
                .into_iter()
                .cloned()
                .collect()
        })
    }

    /// Every archive entry, in timestamp order (admin export).
    pub fn archives(&self) -> Result<Vec<ArchiveEntry>, StoreError> {
        self.read(|s| s.sorted_archives(|_| true).into_iter().cloned().collect())
    }
}

/// Reads a store file's raw lines; for diagnostics and tests.
pub fn read_lines(path: &Path) -> std::io::Result<Vec<String>> {
    BufReader::new(File::open(path)?).lines().collect()
}
