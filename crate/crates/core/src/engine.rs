//! Query validation, sensitivity, cost estimation and noisy execution.
//!
//! Every aggregate decomposes into primitive noisy sums and counts:
//!
//! | aggregate      | primitives                            |
//! |----------------|---------------------------------------|
//! | `COUNT`        | `COUNT`                               |
//! | `SUM(c)`       | `SUM(c)`                              |
//! | `MEAN(c)`      | `SUM_C(c)`, `COUNT`                   |
//! | `VARIANCE(c)`  | `SUM_SQ(c)`, `SUM_C(c)`, `COUNT`      |
//!
//! The statistics are computed around the midpoint `m` of the column's
//! bounds: `SUM_C(c)` sums `x - m` (per-row range `[-h, h]`, `h = (upper -
//! lower) / 2`) and `SUM_SQ(c)` sums `(x - m)^2` (range `[0, h^2]`). Then
//! `MEAN = m + S/N` and `VARIANCE = Q/N - (S/N)^2`, algebraically the usual
//! formulas but with sensitivity set by the width of the bounds rather than
//! their magnitude, which matters when the bounds sit far from zero.
//!
//! Primitives shared between aggregates of one query are noised once. Each
//! distinct primitive is charged the full requested `(epsilon, delta)`, so a
//! query with `k` distinct primitives costs `(k * epsilon, k * delta)`. MEAN
//! and VARIANCE are post-processing of the noisy primitives.
//!
//! The neighbouring relation adds or removes one privacy unit contributing at
//! most `max_contributions` rows. Under `group_by` the bins are the declared
//! categories, so a unit's rows still change the histogram by at most the
//! primitive's sensitivity in L1.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::PrivacyBudget;
use crate::dataset::{Dataset, Value};
use crate::mechanism::{
    classical_gaussian_sigma, gaussian_sigma, laplace_scale, sample_gaussian, sample_laplace, Mechanism, MechanismError,
};
use crate::metadata::{validate_column_reference, ColumnDomain, ColumnError, DatasetMetadata, KindSet};
use crate::query::{AggregateFunction, AggregateSpec, Comparator, FilterPredicate, Literal, PrivacyParams, QueryAst};
use crate::scalar::DpFloat;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DpError {
    #[error(transparent)]
    Column(#[from] ColumnError),
    #[error(transparent)]
    InvalidPrivacyParams(#[from] MechanismError),
    #[error("column `{0}` is nullable; nullable columns are not supported")]
    NullableUnsupported(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("dataset lacks column `{0}`")]
    MissingColumn(String),
}

/// A primitive noisy aggregate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Primitive {
    Count,
    Sum(String),
    /// Sum of the clamped column's deviations from its bound midpoint.
    CenteredSum(String),
    /// Sum of squared deviations of the clamped column from its bound midpoint.
    SumSquares(String),
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Count => f.write_str("COUNT"),
            Primitive::Sum(c) => write!(f, "SUM({c})"),
            Primitive::CenteredSum(c) => write!(f, "SUM_C({c})"),
            Primitive::SumSquares(c) => write!(f, "SUM_SQ({c})"),
        }
    }
}

/// Decomposes an aggregate into the primitives it is derived from.
pub fn decompose_aggregate(agg: &AggregateSpec) -> Vec<Primitive> {
    let col = || agg.column.clone().unwrap_or_default();
    match agg.function {
        AggregateFunction::Count => vec![Primitive::Count],
        AggregateFunction::Sum => vec![Primitive::Sum(col())],
        AggregateFunction::Mean => vec![Primitive::CenteredSum(col()), Primitive::Count],
        AggregateFunction::Variance => vec![
            Primitive::SumSquares(col()),
            Primitive::CenteredSum(col()),
            Primitive::Count,
        ],
    }
}

/// Distinct primitives of a query, in order of first appearance.
pub fn distinct_primitives(aggregates: &[AggregateSpec]) -> Vec<Primitive> {
    let mut out: Vec<Primitive> = Vec::new();
    for p in aggregates.iter().flat_map(decompose_aggregate) {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Inclusive bounds of the values a primitive sums over, per row.
pub fn primitive_bounds(primitive: &Primitive, metadata: &DatasetMetadata) -> Option<(f64, f64)> {
    match primitive {
        Primitive::Count => Some((0.0, 1.0)),
        Primitive::Sum(c) => metadata.column(c)?.domain.numeric_bounds(),
        Primitive::CenteredSum(c) => {
            let (lo, hi) = metadata.column(c)?.domain.numeric_bounds()?;
            let half = (hi - lo) / 2.0;
            Some((-half, half))
        }
        Primitive::SumSquares(c) => {
            let (lo, hi) = metadata.column(c)?.domain.numeric_bounds()?;
            let half = (hi - lo) / 2.0;
            Some((0.0, half * half))
        }
    }
}

/// L1 sensitivity of a primitive: `max_contributions` times the largest
/// absolute per-row value.
pub fn sensitivity<F: DpFloat>(primitive: &Primitive, metadata: &DatasetMetadata) -> Result<F, DpError> {
    let (lo, hi) = primitive_bounds(primitive, metadata)
        .ok_or_else(|| DpError::InvalidQuery(format!("{primitive} does not reference a numeric column")))?;
    let per_row = lo.abs().max(hi.abs());
    Ok(F::from_f64_lossy(f64::from(metadata.max_contributions) * per_row))
}

fn check_params(params: &PrivacyParams) -> Result<PrivacyBudget, DpError> {
    let invalid = |msg: String| DpError::InvalidPrivacyParams(MechanismError::InvalidPrivacyParams(msg));
    if !params.epsilon.is_finite() || params.epsilon <= 0.0 {
        return Err(invalid(format!(
            "epsilon must be positive and finite, got {}",
            params.epsilon
        )));
    }
    if !(0.0..1.0).contains(&params.delta) {
        return Err(invalid(format!("delta must lie in [0, 1), got {}", params.delta)));
    }
    PrivacyBudget::from_f64(params.epsilon, params.delta).map_err(|e| invalid(e.to_string()))
}

fn check_shape(aggregates: &[AggregateSpec]) -> Result<(), DpError> {
    if aggregates.is_empty() {
        return Err(DpError::InvalidQuery("at least one aggregate is required".into()));
    }
    for (i, agg) in aggregates.iter().enumerate() {
        match (agg.function, &agg.column) {
            (AggregateFunction::Count, Some(_)) => {
                return Err(DpError::InvalidQuery("COUNT takes no column".into()));
            }
            (AggregateFunction::Count, None) => {}
            (f, None) => return Err(DpError::InvalidQuery(format!("{f} requires a column"))),
            _ => {}
        }
        if aggregates[..i].contains(agg) {
            return Err(DpError::InvalidQuery(format!("duplicate aggregate {}", agg.label())));
        }
    }
    Ok(())
}

/// Privacy cost of a query: `k` times the requested parameters, where `k` is the
/// number of distinct primitives. Never touches any ledger.
pub fn estimate_cost(ast: &QueryAst, params: &PrivacyParams) -> Result<PrivacyBudget, DpError> {
    check_shape(&ast.aggregates)?;
    let unit = check_params(params)?;
    let k = distinct_primitives(&ast.aggregates).len() as u32;
    unit.checked_mul(k)
        .ok_or_else(|| DpError::InvalidQuery("privacy cost overflows".into()))
}

/// Whether the `epsilon <= 1` validity range of the classical Gaussian
/// mechanism is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidationMode {
    /// Private data: every guarantee must hold.
    #[default]
    Private,
    /// Dummy data: nothing to protect, the Gaussian range check is lifted.
    Dummy,
}

#[derive(Debug, Clone, PartialEq)]
struct ResolvedFilter {
    column: String,
    comparator: Comparator,
    literal: Literal,
}

/// A query checked against metadata, with its mechanism and cost fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedQuery {
    ast: QueryAst,
    params: PrivacyParams,
    mechanism: Mechanism,
    mode: ValidationMode,
    primitives: Vec<Primitive>,
    groups: Option<(String, Vec<String>)>,
    filters: Vec<ResolvedFilter>,
    cost: PrivacyBudget,
}

impl ValidatedQuery {
    pub fn ast(&self) -> &QueryAst {
        &self.ast
    }

    pub fn params(&self) -> PrivacyParams {
        self.params
    }

    pub fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn cost(&self) -> PrivacyBudget {
        self.cost
    }
}

pub fn validate_query(
    ast: &QueryAst,
    metadata: &DatasetMetadata,
    params: &PrivacyParams,
) -> Result<ValidatedQuery, DpError> {
    validate_query_with(ast, metadata, params, ValidationMode::Private)
}

pub fn validate_query_with(
    ast: &QueryAst,
    metadata: &DatasetMetadata,
    params: &PrivacyParams,
    mode: ValidationMode,
) -> Result<ValidatedQuery, DpError> {
    check_shape(&ast.aggregates)?;
    let cost = estimate_cost(ast, params)?;

    let not_nullable = |col: &crate::metadata::ColumnSchema| {
        if col.nullable {
            Err(DpError::NullableUnsupported(col.name.clone()))
        } else {
            Ok(())
        }
    };

    for agg in &ast.aggregates {
        if let Some(c) = &agg.column {
            not_nullable(validate_column_reference(metadata, c, KindSet::NUMERIC)?)?;
        }
    }

    let groups = match &ast.group_by {
        Some(g) => {
            let col = validate_column_reference(metadata, g, KindSet::CATEGORICAL)?;
            not_nullable(col)?;
            let cats = col.domain.categories().unwrap_or_default().to_vec();
            Some((g.clone(), cats))
        }
        None => None,
    };

    let filters = ast
        .filters
        .iter()
        .map(|f| resolve_filter(f, metadata))
        .collect::<Result<Vec<_>, _>>()?;

    let mechanism = if params.delta == 0.0 {
        Mechanism::Laplace
    } else {
        Mechanism::Gaussian
    };
    // Fails early on parameters the mechanism cannot calibrate.
    match (mechanism, mode) {
        (Mechanism::Laplace, _) => {
            laplace_scale(1.0, params.epsilon)?;
        }
        (Mechanism::Gaussian, ValidationMode::Private) => {
            gaussian_sigma(1.0, params.epsilon, params.delta)?;
        }
        (Mechanism::Gaussian, ValidationMode::Dummy) => {
            classical_gaussian_sigma(1.0, params.epsilon, params.delta)?;
        }
    }

    Ok(ValidatedQuery {
        ast: ast.clone(),
        params: *params,
        mechanism,
        mode,
        primitives: distinct_primitives(&ast.aggregates),
        groups,
        filters,
        cost,
    })
}

fn resolve_filter(f: &FilterPredicate, metadata: &DatasetMetadata) -> Result<ResolvedFilter, DpError> {
    let col = validate_column_reference(metadata, &f.column, KindSet::ANY)?;
    if col.nullable {
        return Err(DpError::NullableUnsupported(col.name.clone()));
    }
    let bad = |why: &str| DpError::InvalidQuery(format!("filter on `{}`: {why}", f.column));
    match (&col.domain, &f.literal) {
        (ColumnDomain::Integer { .. } | ColumnDomain::Real { .. }, Literal::Number(n)) => {
            if !n.is_finite() {
                return Err(bad("literal must be finite"));
            }
        }
        (ColumnDomain::Categorical { categories }, Literal::Text(t)) => {
            if !f.comparator.is_equality() {
                return Err(bad("categorical columns only support = and !="));
            }
            if !categories.contains(t) {
                return Err(bad("literal is not a declared category"));
            }
        }
        (ColumnDomain::Boolean, Literal::Bool(_)) => {
            if !f.comparator.is_equality() {
                return Err(bad("boolean columns only support = and !="));
            }
        }
        _ => return Err(bad("literal type does not match the column kind")),
    }
    Ok(ResolvedFilter {
        column: f.column.clone(),
        comparator: f.comparator,
        literal: f.literal.clone(),
    })
}

fn filter_holds<F: DpFloat>(value: &Value<F>, comparator: Comparator, literal: &Literal) -> bool {
    match (value, literal) {
        (Value::Int(i), Literal::Number(n)) => comparator.holds(&(*i as f64), n),
        (Value::Real(r), Literal::Number(n)) => comparator.holds(&r.to_f64_lossy(), n),
        (Value::Category(c), Literal::Text(t)) => comparator.holds(c.as_str(), t.as_str()),
        (Value::Bool(b), Literal::Bool(l)) => comparator.holds(b, l),
        _ => false,
    }
}

/// One released value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub group: Option<String>,
    pub aggregate: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpResult {
    pub values: Vec<ResultEntry>,
    pub charged_cost: PrivacyBudget,
}

impl DpResult {
    pub fn get(&self, group: Option<&str>, aggregate: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|e| e.group.as_deref() == group && e.aggregate == aggregate)
            .map(|e| e.value)
    }
}

/// Ratios divide by the noisy count floored here, so tiny or negative
/// counts cannot blow the estimate up.
const MIN_DIVISOR: f64 = 1.0;

/// Runs a validated query on (already clamped) rows, adding independent noise
/// to every primitive in every bin.
pub fn execute_dp<F: DpFloat, R: RngCore + ?Sized>(
    query: &ValidatedQuery,
    rows: &Dataset<F>,
    metadata: &DatasetMetadata,
    rng: &mut R,
) -> Result<DpResult, DpError> {
    let index = |name: &str| {
        rows.column_index(name)
            .ok_or_else(|| DpError::MissingColumn(name.to_owned()))
    };

    let filters = query
        .filters
        .iter()
        .map(|f| Ok((index(&f.column)?, f)))
        .collect::<Result<Vec<_>, DpError>>()?;
    let selected: Vec<&Vec<Value<F>>> = rows
        .rows()
        .iter()
        .filter(|row| {
            filters
                .iter()
                .all(|(i, f)| filter_holds(&row[*i], f.comparator, &f.literal))
        })
        .collect();

    let bins: Vec<Option<String>> = match &query.groups {
        Some((_, cats)) => cats.iter().cloned().map(Some).collect(),
        None => vec![None],
    };
    let group_index = match &query.groups {
        Some((col, _)) => Some(index(col)?),
        None => None,
    };

    // Noise scale per primitive, independent of the bin.
    let eps = F::from_f64_lossy(query.params.epsilon);
    let delta = F::from_f64_lossy(query.params.delta);
    let mut scales = Vec::with_capacity(query.primitives.len());
    let mut columns = Vec::with_capacity(query.primitives.len());
    for p in &query.primitives {
        let sens: F = sensitivity(p, metadata)?;
        let scale = match (query.mechanism, query.mode) {
            (Mechanism::Laplace, _) => laplace_scale(sens, eps)?,
            (Mechanism::Gaussian, ValidationMode::Private) => gaussian_sigma(sens, eps, delta)?,
            (Mechanism::Gaussian, ValidationMode::Dummy) => classical_gaussian_sigma(sens, eps, delta)?,
        };
        scales.push(scale);
        columns.push(match p {
            Primitive::Count => None,
            Primitive::Sum(c) | Primitive::CenteredSum(c) | Primitive::SumSquares(c) => {
                Some((index(c)?, midpoint(c, metadata)))
            }
        });
    }

    let mut values = Vec::with_capacity(bins.len() * query.ast.aggregates.len());
    for bin in &bins {
        let in_bin: Vec<&&Vec<Value<F>>> = selected
            .iter()
            .filter(|row| match (bin, group_index) {
                (Some(cat), Some(gi)) => matches!(&row[gi], Value::Category(c) if c == cat),
                _ => true,
            })
            .collect();

        let noisy: Vec<F> = query
            .primitives
            .iter()
            .zip(&scales)
            .zip(&columns)
            .map(|((p, &scale), col)| {
                let exact = exact_primitive(p, *col, &in_bin);
                let noise = match query.mechanism {
                    Mechanism::Laplace => sample_laplace(rng, scale),
                    Mechanism::Gaussian => sample_gaussian(rng, scale),
                };
                exact + noise
            })
            .collect();
        let lookup = |p: &Primitive| {
            let i = query
                .primitives
                .iter()
                .position(|q| q == p)
                .expect("every aggregate's primitives were registered");
            noisy[i]
        };

        for agg in &query.ast.aggregates {
            let col = agg.column.clone().unwrap_or_default();
            // Everything past the noisy primitives is post-processing: dividing
            // and clamping to the range the exact statistic must lie in.
            let value = match agg.function {
                AggregateFunction::Count => lookup(&Primitive::Count),
                AggregateFunction::Sum => lookup(&Primitive::Sum(col)),
                AggregateFunction::Mean => {
                    let count = lookup(&Primitive::Count).max(F::from_f64_lossy(MIN_DIVISOR));
                    let (lo, hi) = bounds::<F>(&col, metadata);
                    let m = midpoint::<F>(&col, metadata);
                    (m + lookup(&Primitive::CenteredSum(col)) / count).max(lo).min(hi)
                }
                AggregateFunction::Variance => {
                    let count = lookup(&Primitive::Count).max(F::from_f64_lossy(MIN_DIVISOR));
                    let (lo, hi) = bounds::<F>(&col, metadata);
                    let half = (hi - lo) / F::from_f64_lossy(2.0);
                    let shifted_mean = lookup(&Primitive::CenteredSum(col.clone())) / count;
                    let v = lookup(&Primitive::SumSquares(col)) / count - shifted_mean * shifted_mean;
                    v.max(F::zero()).min(half * half)
                }
            };
            values.push(ResultEntry {
                group: bin.clone(),
                aggregate: agg.label(),
                value: value.to_f64_lossy(),
            });
        }
    }

    Ok(DpResult {
        values,
        charged_cost: query.cost,
    })
}

fn numeric_bounds(column: &str, metadata: &DatasetMetadata) -> (f64, f64) {
    metadata
        .column(column)
        .and_then(|c| c.domain.numeric_bounds())
        .unwrap_or_default()
}

fn bounds<F: DpFloat>(column: &str, metadata: &DatasetMetadata) -> (F, F) {
    let (lo, hi) = numeric_bounds(column, metadata);
    (F::from_f64_lossy(lo), F::from_f64_lossy(hi))
}

fn midpoint<F: DpFloat>(column: &str, metadata: &DatasetMetadata) -> F {
    let (lo, hi) = numeric_bounds(column, metadata);
    F::from_f64_lossy(lo / 2.0 + hi / 2.0)
}

fn exact_primitive<F: DpFloat>(p: &Primitive, column: Option<(usize, F)>, rows: &[&&Vec<Value<F>>]) -> F {
    match (p, column) {
        (Primitive::Count, _) => F::from_usize(rows.len()).unwrap_or_else(F::max_value),
        (Primitive::Sum(_), Some((i, _))) => rows.iter().filter_map(|r| r[i].as_scalar()).sum(),
        (Primitive::CenteredSum(_), Some((i, m))) => rows.iter().filter_map(|r| r[i].as_scalar()).map(|v| v - m).sum(),
        (Primitive::SumSquares(_), Some((i, m))) => rows
            .iter()
            .filter_map(|r| r[i].as_scalar())
            .map(|v| (v - m) * (v - m))
            .sum(),
        _ => F::zero(),
    }
}
