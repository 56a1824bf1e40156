//! Public dataset metadata.
//!
//! A metadata document describes every column of a private table: its kind, the
//! inclusive range of admissible values (numeric columns) or the closed set of
//! categories, and how many rows a single privacy unit may contribute. All
//! downstream validation, sensitivity computation and dummy generation reads
//! from it, so a parsed [`DatasetMetadata`] always satisfies its invariants.
//!
//! Documents are YAML; JSON with the same tree shape is accepted as well:
//!
//! ```yaml
//! dataset_name: PENGUIN
//! max_contributions: 1
//! columns:
//!   - {name: island, kind: categorical, categories: [A, B]}
//!   - {name: bill_length, kind: real, lower: 30.0, upper: 65.0}
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetadataError {
    #[error("malformed metadata document: {0}")]
    MalformedDocument(String),
    #[error("missing field `{field}` in {context}")]
    MissingField { context: String, field: &'static str },
    #[error("metadata invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ColumnError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{column}` is {actual}, expected one of {expected}")]
    KindMismatch {
        column: String,
        actual: ColumnKind,
        expected: KindSet,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Integer,
    Real,
    Categorical,
    Boolean,
}

impl ColumnKind {
    pub fn is_numeric(self) -> bool {
        matches!(self, ColumnKind::Integer | ColumnKind::Real)
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Integer => "integer",
            ColumnKind::Real => "real",
            ColumnKind::Categorical => "categorical",
            ColumnKind::Boolean => "boolean",
        })
    }
}

/// A set of acceptable column kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KindSet(&'static [ColumnKind]);

impl KindSet {
    pub const NUMERIC: KindSet = KindSet(&[ColumnKind::Integer, ColumnKind::Real]);
    pub const ANY: KindSet = KindSet(&[
        ColumnKind::Integer,
        ColumnKind::Real,
        ColumnKind::Categorical,
        ColumnKind::Boolean,
    ]);
    pub const CATEGORICAL: KindSet = KindSet(&[ColumnKind::Categorical]);

    pub fn contains(self, kind: ColumnKind) -> bool {
        self.0.contains(&kind)
    }
}

impl fmt::Display for KindSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}")?;
        }
        f.write_str("}")
    }
}

/// Value domain of a column, with the bounds or categories its kind requires.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnDomain {
    Integer { lower: i64, upper: i64 },
    Real { lower: f64, upper: f64 },
    Categorical { categories: Vec<String> },
    Boolean,
}

impl ColumnDomain {
    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnDomain::Integer { .. } => ColumnKind::Integer,
            ColumnDomain::Real { .. } => ColumnKind::Real,
            ColumnDomain::Categorical { .. } => ColumnKind::Categorical,
            ColumnDomain::Boolean => ColumnKind::Boolean,
        }
    }

    /// Inclusive numeric bounds as `f64`, for numeric columns.
    pub fn numeric_bounds(&self) -> Option<(f64, f64)> {
        match *self {
            ColumnDomain::Integer { lower, upper } => Some((lower as f64, upper as f64)),
            ColumnDomain::Real { lower, upper } => Some((lower, upper)),
            _ => None,
        }
    }

    pub fn categories(&self) -> Option<&[String]> {
        match self {
            ColumnDomain::Categorical { categories } => Some(categories),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawColumn", try_from = "RawColumn")]
pub struct ColumnSchema {
    pub name: String,
    pub domain: ColumnDomain,
    pub nullable: bool,
}

impl ColumnSchema {
    pub fn new(name: impl Into<String>, domain: ColumnDomain) -> Self {
        ColumnSchema {
            name: name.into(),
            domain,
            nullable: false,
        }
    }

    pub fn kind(&self) -> ColumnKind {
        self.domain.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawMetadata", try_from = "RawMetadata")]
pub struct DatasetMetadata {
    pub dataset_name: String,
    pub max_contributions: u32,
    pub columns: Vec<ColumnSchema>,
}

impl DatasetMetadata {
    /// Builds metadata from parts, checking every invariant.
    pub fn new(
        dataset_name: impl Into<String>,
        max_contributions: u32,
        columns: Vec<ColumnSchema>,
    ) -> Result<Self, MetadataError> {
        let md = DatasetMetadata {
            dataset_name: dataset_name.into(),
            max_contributions,
            columns,
        };
        md.check()?;
        Ok(md)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSchema> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("metadata always serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metadata always serializes")
    }

    fn check(&self) -> Result<(), MetadataError> {
        check_identifier(&self.dataset_name, "dataset_name")?;
        if self.max_contributions < 1 {
            return Err(MetadataError::InvariantViolation(
                "max_contributions must be at least 1".into(),
            ));
        }
        if self.columns.is_empty() {
            return Err(MetadataError::InvariantViolation(
                "at least one column is required".into(),
            ));
        }
        let mut seen = HashSet::new();
        for col in &self.columns {
            check_identifier(&col.name, "column name")?;
            if !seen.insert(col.name.as_str()) {
                return Err(MetadataError::InvariantViolation(format!(
                    "duplicate column name `{}`",
                    col.name
                )));
            }
            check_domain(&col.name, &col.domain)?;
        }
        Ok(())
    }
}

fn check_identifier(name: &str, what: &str) -> Result<(), MetadataError> {
    if name.trim().is_empty() {
        return Err(MetadataError::InvariantViolation(format!("{what} must be non-empty")));
    }
    if name.trim() != name || name.chars().any(char::is_control) {
        return Err(MetadataError::InvariantViolation(format!(
            "{what} `{name}` contains surrounding whitespace or control characters"
        )));
    }
    Ok(())
}

fn check_domain(column: &str, domain: &ColumnDomain) -> Result<(), MetadataError> {
    match domain {
        ColumnDomain::Integer { lower, upper } => {
            if lower > upper {
                return Err(inverted(column, *lower as f64, *upper as f64));
            }
        }
        ColumnDomain::Real { lower, upper } => {
            if !lower.is_finite() || !upper.is_finite() {
                return Err(MetadataError::InvariantViolation(format!(
                    "column `{column}` bounds must be finite"
                )));
            }
            if lower > upper {
                return Err(inverted(column, *lower, *upper));
            }
        }
        ColumnDomain::Categorical { categories } => {
            if categories.is_empty() {
                return Err(MetadataError::InvariantViolation(format!(
                    "column `{column}` declares no categories"
                )));
            }
            let mut seen = HashSet::new();
            for c in categories {
                if !seen.insert(c.as_str()) {
                    return Err(MetadataError::InvariantViolation(format!(
                        "column `{column}` repeats category `{c}`"
                    )));
                }
            }
        }
        ColumnDomain::Boolean => {}
    }
    Ok(())
}

fn inverted(column: &str, lower: f64, upper: f64) -> MetadataError {
    MetadataError::InvariantViolation(format!(
        "column `{column}` has lower bound {lower} above upper bound {upper}"
    ))
}

/// Parses a YAML or JSON metadata document.
pub fn parse_metadata(document: &str) -> Result<DatasetMetadata, MetadataError> {
    let raw: RawMetadata = if document.trim_start().starts_with('{') {
        serde_json::from_str(document).map_err(|e| MetadataError::MalformedDocument(e.to_string()))?
    } else {
        serde_yaml::from_str(document).map_err(|e| MetadataError::MalformedDocument(e.to_string()))?
    };
    DatasetMetadata::try_from(raw)
}

/// Looks up `column` and checks its kind is one of `required`.
pub fn validate_column_reference<'a>(
    metadata: &'a DatasetMetadata,
    column: &str,
    required: KindSet,
) -> Result<&'a ColumnSchema, ColumnError> {
    let schema = metadata
        .column(column)
        .ok_or_else(|| ColumnError::UnknownColumn(column.to_owned()))?;
    if !required.contains(schema.kind()) {
        return Err(ColumnError::KindMismatch {
            column: column.to_owned(),
            actual: schema.kind(),
            expected: required,
        });
    }
    Ok(schema)
}

// Wire shape. Fields are optional here so that absence is reported as
// MissingField rather than as a syntax error.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetadata {
    dataset_name: Option<String>,
    max_contributions: Option<i64>,
    columns: Option<Vec<RawColumn>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawColumn {
    name: Option<String>,
    kind: Option<ColumnKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "is_false")]
    nullable: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl TryFrom<RawMetadata> for DatasetMetadata {
    type Error = MetadataError;

    fn try_from(raw: RawMetadata) -> Result<Self, Self::Error> {
        let missing = |field| MetadataError::MissingField {
            context: "document".into(),
            field,
        };
        let dataset_name = raw.dataset_name.ok_or_else(|| missing("dataset_name"))?;
        let max_contributions = raw.max_contributions.ok_or_else(|| missing("max_contributions"))?;
        let max_contributions = u32::try_from(max_contributions)
            .ok()
            .filter(|m| *m >= 1)
            .ok_or_else(|| {
                MetadataError::InvariantViolation(format!(
                    "max_contributions must be a positive integer, got {max_contributions}"
                ))
            })?;
        let columns = raw
            .columns
            .ok_or_else(|| missing("columns"))?
            .into_iter()
            .enumerate()
            .map(|(i, c)| column_from_raw(i, c))
            .collect::<Result<Vec<_>, _>>()?;
        DatasetMetadata::new(dataset_name, max_contributions, columns)
    }
}

impl TryFrom<RawColumn> for ColumnSchema {
    type Error = MetadataError;

    fn try_from(raw: RawColumn) -> Result<Self, Self::Error> {
        let col = column_from_raw(0, raw)?;
        check_identifier(&col.name, "column name")?;
        check_domain(&col.name, &col.domain)?;
        Ok(col)
    }
}

fn column_from_raw(index: usize, raw: RawColumn) -> Result<ColumnSchema, MetadataError> {
    let context = match &raw.name {
        Some(n) => format!("column `{n}`"),
        None => format!("column #{index}"),
    };
    let missing = |field| MetadataError::MissingField {
        context: context.clone(),
        field,
    };
    let name = raw.name.clone().ok_or_else(|| missing("name"))?;
    let kind = raw.kind.ok_or_else(|| missing("kind"))?;
    let unexpected =
        |field: &str| MetadataError::InvariantViolation(format!("{context} of kind {kind} must not declare `{field}`"));

    let domain = match kind {
        ColumnKind::Integer | ColumnKind::Real => {
            if raw.categories.is_some() {
                return Err(unexpected("categories"));
            }
            let lower = raw.lower.ok_or_else(|| missing("lower"))?;
            let upper = raw.upper.ok_or_else(|| missing("upper"))?;
            if !lower.is_finite() || !upper.is_finite() {
                return Err(MetadataError::InvariantViolation(format!(
                    "{context} bounds must be finite"
                )));
            }
            if kind == ColumnKind::Integer {
                ColumnDomain::Integer {
                    lower: integral_bound(&context, lower)?,
                    upper: integral_bound(&context, upper)?,
                }
            } else {
                ColumnDomain::Real { lower, upper }
            }
        }
        ColumnKind::Categorical => {
            if raw.lower.is_some() {
                return Err(unexpected("lower"));
            }
            if raw.upper.is_some() {
                return Err(unexpected("upper"));
            }
            ColumnDomain::Categorical {
                categories: raw.categories.ok_or_else(|| missing("categories"))?,
            }
        }
        ColumnKind::Boolean => {
            for (field, present) in [
                ("lower", raw.lower.is_some()),
                ("upper", raw.upper.is_some()),
                ("categories", raw.categories.is_some()),
            ] {
                if present {
                    return Err(unexpected(field));
                }
            }
            ColumnDomain::Boolean
        }
    };
    Ok(ColumnSchema {
        name,
        domain,
        nullable: raw.nullable,
    })
}

fn integral_bound(context: &str, v: f64) -> Result<i64, MetadataError> {
    // 2^63 is exactly representable; anything at or above it overflows i64.
    const TWO_POW_63: f64 = 9_223_372_036_854_775_808.0;
    if v.fract() != 0.0 || !(-TWO_POW_63..TWO_POW_63).contains(&v) {
        return Err(MetadataError::InvariantViolation(format!(
            "{context} integer bound {v} is not an i64 integer"
        )));
    }
    Ok(v as i64)
}

impl From<DatasetMetadata> for RawMetadata {
    fn from(md: DatasetMetadata) -> Self {
        RawMetadata {
            dataset_name: Some(md.dataset_name),
            max_contributions: Some(i64::from(md.max_contributions)),
            columns: Some(md.columns.into_iter().map(RawColumn::from).collect()),
        }
    }
}

impl From<ColumnSchema> for RawColumn {
    fn from(col: ColumnSchema) -> Self {
        let kind = col.kind();
        let (lower, upper, categories) = match col.domain {
            ColumnDomain::Integer { lower, upper } => (Some(lower as f64), Some(upper as f64), None),
            ColumnDomain::Real { lower, upper } => (Some(lower), Some(upper), None),
            ColumnDomain::Categorical { categories } => (None, None, Some(categories)),
            ColumnDomain::Boolean => (None, None, None),
        };
        RawColumn {
            name: Some(col.name),
            kind: Some(kind),
            lower,
            upper,
            categories,
            nullable: col.nullable,
        }
    }
}
