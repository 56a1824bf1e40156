//! Restricted aggregate query AST and privacy parameters.
//!
//! The canonical wire form is JSON:
//!
//! ```json
//! {"aggregates":[{"function":"MEAN","column":"bill_length"}],
//!  "group_by":null,
//!  "filters":[{"column":"island","comparator":"=","literal":"A"}]}
//! ```

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggregateFunction {
    Count,
    Sum,
    Mean,
    Variance,
}

impl fmt::Display for AggregateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregateFunction::Count => "COUNT",
            AggregateFunction::Sum => "SUM",
            AggregateFunction::Mean => "MEAN",
            AggregateFunction::Variance => "VARIANCE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub function: AggregateFunction,
    #[serde(default)]
    pub column: Option<String>,
}

impl AggregateSpec {
    pub fn count() -> Self {
        AggregateSpec {
            function: AggregateFunction::Count,
            column: None,
        }
    }

    pub fn sum(column: impl Into<String>) -> Self {
        Self::over(AggregateFunction::Sum, column)
    }

    pub fn mean(column: impl Into<String>) -> Self {
        Self::over(AggregateFunction::Mean, column)
    }

    pub fn variance(column: impl Into<String>) -> Self {
        Self::over(AggregateFunction::Variance, column)
    }

    pub fn over(function: AggregateFunction, column: impl Into<String>) -> Self {
        AggregateSpec {
            function,
            column: Some(column.into()),
        }
    }

    /// Result label, e.g. `COUNT` or `MEAN(bill_length)`.
    pub fn label(&self) -> String {
        match &self.column {
            Some(c) => format!("{}({c})", self.function),
            None => self.function.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "=",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    pub fn is_equality(self) -> bool {
        matches!(self, Comparator::Eq | Comparator::Ne)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "=" | "==" => Comparator::Eq,
            "!=" | "<>" | "≠" => Comparator::Ne,
            "<" => Comparator::Lt,
            "<=" | "≤" => Comparator::Le,
            ">" => Comparator::Gt,
            ">=" | "≥" => Comparator::Ge,
            _ => return None,
        })
    }

    pub fn holds<T: PartialOrd + ?Sized>(self, lhs: &T, rhs: &T) -> bool {
        match self {
            Comparator::Eq => lhs == rhs,
            Comparator::Ne => lhs != rhs,
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Gt => lhs > rhs,
            Comparator::Ge => lhs >= rhs,
        }
    }
}

impl Serialize for Comparator {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Comparator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Comparator::parse(&s).ok_or_else(|| de::Error::custom(format!("unknown comparator `{s}`")))
    }
}

/// Filter literal; its JSON type must match the column kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Number(f64),
    Text(String),
    Bool(bool),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Text(s) => write!(f, "{s:?}"),
            Literal::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl Serialize for Literal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            // Integral literals go out as JSON integers so `3` stays `3`.
            Literal::Number(n) if n.fract() == 0.0 && n.abs() < 9.0e15 => s.serialize_i64(*n as i64),
            Literal::Number(n) => s.serialize_f64(*n),
            Literal::Text(t) => s.serialize_str(t),
            Literal::Bool(b) => s.serialize_bool(*b),
        }
    }
}

impl<'de> Deserialize<'de> for Literal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct LiteralVisitor;

        impl Visitor<'_> for LiteralVisitor {
            type Value = Literal;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number, string or boolean literal")
            }

            fn visit_bool<E: de::Error>(self, v: bool) -> Result<Literal, E> {
                Ok(Literal::Bool(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Literal, E> {
                Ok(Literal::Number(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Literal, E> {
                Ok(Literal::Number(v as f64))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Literal, E> {
                Ok(Literal::Number(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Literal, E> {
                Ok(Literal::Text(v.to_owned()))
            }

            fn visit_string<E: de::Error>(self, v: String) -> Result<Literal, E> {
                Ok(Literal::Text(v))
            }
        }

        d.deserialize_any(LiteralVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPredicate {
    pub column: String,
    pub comparator: Comparator,
    pub literal: Literal,
}

impl FilterPredicate {
    pub fn new(column: impl Into<String>, comparator: Comparator, literal: Literal) -> Self {
        FilterPredicate {
            column: column.into(),
            comparator,
            literal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAst {
    pub aggregates: Vec<AggregateSpec>,
    #[serde(default)]
    pub group_by: Option<String>,
    #[serde(default)]
    pub filters: Vec<FilterPredicate>,
}

impl QueryAst {
    pub fn new(aggregates: Vec<AggregateSpec>) -> Self {
        QueryAst {
            aggregates,
            group_by: None,
            filters: Vec::new(),
        }
    }

    pub fn group_by(mut self, column: impl Into<String>) -> Self {
        self.group_by = Some(column.into());
        self
    }

    pub fn filter(mut self, predicate: FilterPredicate) -> Self {
        self.filters.push(predicate);
        self
    }
}

/// Requested privacy-loss parameters for one noisy primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        PrivacyParams { epsilon, delta }
    }

    pub fn pure(epsilon: f64) -> Self {
        PrivacyParams { epsilon, delta: 0.0 }
    }
}
