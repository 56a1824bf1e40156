//! Persistence for the gatekeeper: private dataset adapters and the
//! administration store.

pub mod admin_store;
pub mod dataset_store;

pub use admin_store::{AdminStore, ArchiveEntry, Collection, DatasetRecord, StoreError, UserRecord};
pub use dataset_store::{DatasetStore, DatasetStoreConfig, FetchError, LocatorError, StorageKind, StorageLocator};
