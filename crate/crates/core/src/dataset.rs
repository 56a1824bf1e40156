//! In-memory tables, CSV coercion against metadata, and clamping.

use std::fmt;
use std::io::{Read, Write};

use thiserror::Error;

use crate::metadata::{ColumnDomain, ColumnSchema, DatasetMetadata};
use crate::scalar::DpFloat;

#[derive(Debug, Clone, PartialEq)]
pub enum Value<F> {
    Int(i64),
    Real(F),
    Category(String),
    Bool(bool),
    Null,
}

impl<F: DpFloat> Value<F> {
    /// Numeric view for aggregation; `None` for non-numeric values.
    pub fn as_scalar(&self) -> Option<F> {
        match self {
            Value::Int(i) => F::from_i64(*i),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }
}

impl<F: DpFloat> fmt::Display for Value<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Category(c) => f.write_str(c),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Null => Ok(()),
        }
    }
}

/// Row-major table whose column order matches a [`DatasetMetadata`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    columns: Vec<String>,
    rows: Vec<Vec<Value<F>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("malformed CSV: {0}")]
    Parse(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("dataset exceeds the row cap of {0}")]
    TooManyRows(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClampError {
    #[error("column `{column}` holds a value outside its declared categories")]
    UnknownCategory { column: String },
    #[error("column `{column}` holds a value of the wrong kind")]
    KindMismatch { column: String },
}

impl<F: DpFloat> Dataset<F> {
    /// Builds a table from column names and rows. Panics if a row's width differs.
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Value<F>>>) -> Self {
        for row in &rows {
            assert_eq!(row.len(), columns.len(), "row width must match column count");
        }
        Dataset { columns, rows }
    }

    pub fn empty(metadata: &DatasetMetadata) -> Self {
        Dataset {
            columns: metadata.column_names().map(str::to_owned).collect(),
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Value<F>>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column_values<'a>(&'a self, name: &str) -> Option<impl Iterator<Item = &'a Value<F>> + 'a> {
        let idx = self.column_index(name)?;
        Some(self.rows.iter().map(move |r| &r[idx]))
    }

    /// RFC 4180 CSV with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(writer);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads CSV and coerces every declared column to its kind. Extra file
    /// columns are ignored; the result's columns follow metadata order.
    pub fn read_csv<R: Read>(reader: R, metadata: &DatasetMetadata, max_rows: usize) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| DatasetError::Parse(e.to_string()))?.clone();
        let mut positions = Vec::with_capacity(metadata.columns.len());
        for col in &metadata.columns {
            let pos = headers
                .iter()
                .position(|h| h == col.name)
                .ok_or_else(|| DatasetError::SchemaMismatch(format!("missing column `{}`", col.name)))?;
            positions.push(pos);
        }

        let mut rows = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| DatasetError::Parse(e.to_string()))?;
            if rows.len() >= max_rows {
                return Err(DatasetError::TooManyRows(max_rows));
            }
            let row = metadata
                .columns
                .iter()
                .zip(&positions)
                .map(|(col, &pos)| {
                    let cell = record.get(pos).ok_or_else(|| {
                        DatasetError::Parse(format!("record {} is missing field {}", line + 1, pos + 1))
                    })?;
                    coerce(col, cell).map_err(|msg| DatasetError::SchemaMismatch(format!("record {}: {msg}", line + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Dataset {
            columns: metadata.column_names().map(str::to_owned).collect(),
            rows,
        })
    }
}

fn coerce<F: DpFloat>(col: &ColumnSchema, cell: &str) -> Result<Value<F>, String> {
    let trimmed = cell.trim();
    if trimmed.is_empty() || (col.nullable && trimmed == "NA") {
        return if col.nullable {
            Ok(Value::Null)
        } else {
            Err(format!("empty value in non-nullable column `{}`", col.name))
        };
    }
    let bad = || format!("column `{}` cannot hold {:?}", col.name, cell);
    match &col.domain {
        ColumnDomain::Integer { .. } => {
            if let Ok(i) = trimmed.parse::<i64>() {
                return Ok(Value::Int(i));
            }
            match trimmed.parse::<f64>() {
                Ok(v) if v.is_finite() && v.fract() == 0.0 && v.abs() < 9.2e18 => Ok(Value::Int(v as i64)),
                _ => Err(bad()),
            }
        }
        ColumnDomain::Real { .. } => match trimmed.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Value::Real(F::from_f64_lossy(v))),
            _ => Err(bad()),
        },
        ColumnDomain::Categorical { .. } => Ok(Value::Category(cell.to_owned())),
        ColumnDomain::Boolean => match trimmed.to_ascii_lowercase().as_str() {
            "true" | "1" => Ok(Value::Bool(true)),
            "false" | "0" => Ok(Value::Bool(false)),
            _ => Err(bad()),
        },
    }
}

/// Clamps every numeric value into its column's declared bounds and rejects
/// categorical values outside the declared category list.
pub fn clamp_dataset<F: DpFloat>(dataset: &Dataset<F>, metadata: &DatasetMetadata) -> Result<Dataset<F>, ClampError> {
    let schemas: Vec<Option<&ColumnSchema>> = dataset.columns.iter().map(|c| metadata.column(c)).collect();
    let rows = dataset
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .zip(&schemas)
                .map(|(v, schema)| match schema {
                    Some(schema) => clamp_value(v, schema),
                    None => Ok(v.clone()),
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        columns: dataset.columns.clone(),
        rows,
    })
}

fn clamp_value<F: DpFloat>(v: &Value<F>, schema: &ColumnSchema) -> Result<Value<F>, ClampError> {
    let mismatch = || ClampError::KindMismatch {
        column: schema.name.clone(),
    };
    Ok(match (&schema.domain, v) {
        (_, Value::Null) => Value::Null,
        (ColumnDomain::Integer { lower, upper }, Value::Int(i)) => Value::Int((*i).clamp(*lower, *upper)),
        (ColumnDomain::Real { lower, upper }, Value::Real(r)) => {
            let lo = F::from_f64_lossy(*lower);
            let hi = F::from_f64_lossy(*upper);
            Value::Real(r.max(lo).min(hi))
        }
        (ColumnDomain::Real { lower, upper }, Value::Int(i)) => {
            let x = (*i as f64).clamp(*lower, *upper);
            Value::Real(F::from_f64_lossy(x))
        }
        (ColumnDomain::Categorical { categories }, Value::Category(c)) => {
            if !categories.iter().any(|k| k == c) {
                return Err(ClampError::UnknownCategory {
                    column: schema.name.clone(),
                });
            }
            v.clone()
        }
        (ColumnDomain::Boolean, Value::Bool(_)) => v.clone(),
        _ => return Err(mismatch()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::parse_metadata;

    fn penguin() -> DatasetMetadata {
        parse_metadata(
            "dataset_name: PENGUIN\nmax_contributions: 1\ncolumns:\n  - {name: island, kind: categorical, categories: [A, B]}\n  - {name: bill_length, kind: real, lower: 30.0, upper: 65.0}\n",
        )
        .unwrap()
    }

    fn one(island: &str, bill: f64) -> Dataset<f64> {
        Dataset::new(
            vec!["island".into(), "bill_length".into()],
            vec![vec![Value::Category(island.into()), Value::Real(bill)]],
        )
    }

    #[test]
    fn clamp_upper_bound() {
        let out = clamp_dataset(&one("A", 70.0), &penguin()).unwrap();
        assert_eq!(out.rows()[0][1], Value::Real(65.0));
    }

    #[test]
    fn in_range_value_is_unchanged() {
        let out = clamp_dataset(&one("B", 46.1), &penguin()).unwrap();
        assert_eq!(out.rows()[0][1], Value::Real(46.1));
    }

    #[test]
    fn unknown_category_is_rejected() {
        assert_eq!(
            clamp_dataset(&one("C", 40.0), &penguin()),
            Err(ClampError::UnknownCategory {
                column: "island".into()
            })
        );
    }

    #[test]
    fn csv_reorders_and_ignores_extra_columns() {
        let csv = "species,bill_length,island\nAdelie,39.1,A\nGentoo,46.5,B\n";
        let ds = Dataset::<f64>::read_csv(csv.as_bytes(), &penguin(), 100).unwrap();
        assert_eq!(ds.columns(), ["island", "bill_length"]);
        assert_eq!(ds.rows()[1], vec![Value::Category("B".into()), Value::Real(46.5)]);
    }

    #[test]
    fn csv_errors() {
        let md = penguin();
        assert!(matches!(
            Dataset::<f64>::read_csv("island\nA\n".as_bytes(), &md, 10),
            Err(DatasetError::SchemaMismatch(_))
        ));
        assert!(matches!(
            Dataset::<f64>::read_csv("island,bill_length\nA,long\n".as_bytes(), &md, 10),
            Err(DatasetError::SchemaMismatch(_))
        ));
        assert!(matches!(
            Dataset::<f64>::read_csv("island,bill_length\nA,NaN\n".as_bytes(), &md, 10),
            Err(DatasetError::SchemaMismatch(_))
        ));
        assert!(matches!(
            Dataset::<f64>::read_csv("island,bill_length\nA,40\nB\n".as_bytes(), &md, 10),
            Err(DatasetError::Parse(_))
        ));
        assert!(matches!(
            Dataset::<f64>::read_csv("island,bill_length\nA,40\nB,41\n".as_bytes(), &md, 1),
            Err(DatasetError::TooManyRows(1))
        ));
        assert!(matches!(
            Dataset::<f64>::read_csv(&[0xff, 0xfe, b'\n'][..], &md, 1),
            Err(DatasetError::Parse(_) | DatasetError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn nulls_only_in_nullable_columns() {
        let md = parse_metadata(
            "dataset_name: T\nmax_contributions: 1\ncolumns:\n  - {name: x, kind: integer, lower: 0, upper: 9, nullable: true}\n  - {name: b, kind: boolean}\n",
        )
        .unwrap();
        let ds = Dataset::<f64>::read_csv("x,b\nNA,true\n4.0,0\n".as_bytes(), &md, 10).unwrap();
        assert_eq!(ds.rows()[0], vec![Value::Null, Value::Bool(true)]);
        assert_eq!(ds.rows()[1], vec![Value::Int(4), Value::Bool(false)]);
        assert!(Dataset::<f64>::read_csv("x,b\n1,\n".as_bytes(), &md, 10).is_err());
    }

    #[test]
    fn csv_output_is_rfc4180() {
        let ds = Dataset::<f64>::new(vec!["name".into()], vec![vec![Value::Category("a,\"b\"".into())]]);
        assert_eq!(ds.to_csv_string(), "name\r\n\"a,\"\"b\"\"\"\r\n");
    }
}
