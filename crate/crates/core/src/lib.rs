//! Differential-privacy core: metadata, query validation, noisy execution,
//! exact-decimal budget accounting and dummy data.
//!
//! The numeric pipeline is generic over [`scalar::DpFloat`]; the aliases at
//! the crate root fix it to `f64`, which is what the service uses.

pub mod budget;
pub mod dataset;
pub mod dummy;
pub mod engine;
pub mod mechanism;
pub mod metadata;
pub mod query;
pub mod scalar;

pub use budget::{BudgetError, BudgetLedgerEntry, BudgetSnapshot, Ledger, PrivacyBudget, SpendOutcome};
pub use dataset::{clamp_dataset, ClampError, DatasetError};
pub use engine::{
    decompose_aggregate, estimate_cost, validate_query, validate_query_with, DpError, DpResult, Primitive, ResultEntry,
    ValidatedQuery, ValidationMode,
};
pub use mechanism::{gaussian_sigma, laplace_scale, Mechanism, MechanismError};
pub use metadata::{
    parse_metadata, ColumnDomain, ColumnError, ColumnKind, ColumnSchema, DatasetMetadata, MetadataError,
};
pub use query::{AggregateFunction, AggregateSpec, Comparator, FilterPredicate, Literal, PrivacyParams, QueryAst};
pub use scalar::DpFloat;

/// Working precision of the service.
pub type Scalar = f64;
pub type Dataset = dataset::Dataset<Scalar>;
pub type Value = dataset::Value<Scalar>;

/// [`dummy::generate_dummy`] at service precision.
pub fn generate_dummy(metadata: &DatasetMetadata, nb_rows: usize, seed: i64) -> Dataset {
    dummy::generate_dummy(metadata, nb_rows, seed)
}

/// [`engine::execute_dp`] at service precision.
pub fn execute_dp<R: rand::RngCore + ?Sized>(
    query: &ValidatedQuery,
    rows: &Dataset,
    metadata: &DatasetMetadata,
    rng: &mut R,
) -> Result<DpResult, DpError> {
    engine::execute_dp(query, rows, metadata, rng)
}
