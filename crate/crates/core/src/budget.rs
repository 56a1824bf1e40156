//! Privacy-loss budget accounting.
//!
//! Budgets are `(epsilon, delta)` pairs held as exact decimals, so any sequence
//! of spends conserves `initial = spent + remaining` without rounding drift.
//! Composition is basic sequential composition: costs add componentwise.
//!
//! On the JSON wire a budget is `{"epsilon": 9.8, "delta": 0.00498}`. The
//! numbers are emitted as exact decimal text and parsed back without passing
//! through binary floating point.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use rust_decimal::Decimal;
use serde::de::Error as _;
use serde::ser::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BudgetError {
    #[error("no budget allocated for user `{user}` on dataset `{dataset}`")]
    UnknownUserOrDataset { user: String, dataset: String },
    #[error("budget allocation for user `{user}` on dataset `{dataset}` already exists")]
    DuplicateEntry { user: String, dataset: String },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PrivacyBudget {
    pub epsilon: Decimal,
    pub delta: Decimal,
}

impl PrivacyBudget {
    pub const ZERO: PrivacyBudget = PrivacyBudget {
        epsilon: Decimal::ZERO,
        delta: Decimal::ZERO,
    };

    /// Builds a budget from exact decimals; both components must be non-negative.
    pub fn new(epsilon: Decimal, delta: Decimal) -> Result<Self, BudgetError> {
        if epsilon.is_sign_negative() && !epsilon.is_zero() || delta.is_sign_negative() && !delta.is_zero() {
            return Err(BudgetError::InvalidBudget(format!(
                "components must be non-negative, got ({epsilon}, {delta})"
            )));
        }
        Ok(PrivacyBudget {
            epsilon: epsilon.normalize(),
            delta: delta.normalize(),
        })
    }

    /// Converts binary floats through their shortest round-trip decimal form,
    /// so `0.1` becomes exactly `0.1`.
    pub fn from_f64(epsilon: f64, delta: f64) -> Result<Self, BudgetError> {
        let conv = |v: f64, what: &str| {
            decimal_from_f64(v).ok_or_else(|| BudgetError::InvalidBudget(format!("{what} {v} is not representable")))
        };
        PrivacyBudget::new(conv(epsilon, "epsilon")?, conv(delta, "delta")?)
    }

    /// Parses decimal text such as `"0.00001"` or `"1e-5"`.
    pub fn parse(epsilon: &str, delta: &str) -> Result<Self, BudgetError> {
        let conv =
            |s: &str| parse_decimal(s).ok_or_else(|| BudgetError::InvalidBudget(format!("`{s}` is not a decimal")));
        PrivacyBudget::new(conv(epsilon)?, conv(delta)?)
    }

    pub fn is_zero(&self) -> bool {
        self.epsilon.is_zero() && self.delta.is_zero()
    }

    /// Componentwise `self <= other`.
    pub fn fits_within(&self, other: &PrivacyBudget) -> bool {
        self.epsilon <= other.epsilon && self.delta <= other.delta
    }

    pub fn checked_add(&self, other: &PrivacyBudget) -> Option<PrivacyBudget> {
        Some(PrivacyBudget {
            epsilon: self.epsilon.checked_add(other.epsilon)?.normalize(),
            delta: self.delta.checked_add(other.delta)?.normalize(),
        })
    }

    /// Componentwise difference; `None` if either component would go negative.
    pub fn checked_sub(&self, other: &PrivacyBudget) -> Option<PrivacyBudget> {
        let epsilon = self.epsilon.checked_sub(other.epsilon)?;
        let delta = self.delta.checked_sub(other.delta)?;
        if epsilon < Decimal::ZERO || delta < Decimal::ZERO {
            return None;
        }
        Some(PrivacyBudget {
            epsilon: epsilon.normalize(),
            delta: delta.normalize(),
        })
    }

    pub fn checked_mul(&self, k: u32) -> Option<PrivacyBudget> {
        let k = Decimal::from(k);
        Some(PrivacyBudget {
            epsilon: self.epsilon.checked_mul(k)?.normalize(),
            delta: self.delta.checked_mul(k)?.normalize(),
        })
    }
}

impl fmt::Display for PrivacyBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(ε={}, δ={})", self.epsilon, self.delta)
    }
}

pub fn decimal_from_f64(v: f64) -> Option<Decimal> {
    if !v.is_finite() {
        return None;
    }
    let d = Decimal::from_scientific(&format!("{v:e}")).ok()?;
    // Underflow below 28 fractional digits silently rounds to zero.
    if d.is_zero() && v != 0.0 {
        return None;
    }
    Some(d.normalize())
}

fn parse_decimal(s: &str) -> Option<Decimal> {
    let s = s.trim();
    if s.contains(['e', 'E']) {
        Decimal::from_scientific(s).ok()
    } else {
        Decimal::from_str_exact(s).ok()
    }
}

#[derive(Serialize, Deserialize)]
struct WireBudget {
    epsilon: Box<RawValue>,
    delta: Box<RawValue>,
}

impl Serialize for PrivacyBudget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let raw = |d: Decimal| RawValue::from_string(d.normalize().to_string()).map_err(S::Error::custom);
        WireBudget {
            epsilon: raw(self.epsilon)?,
            delta: raw(self.delta)?,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PrivacyBudget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = WireBudget::deserialize(d)?;
        let component = |raw: &RawValue| -> Result<Decimal, D::Error> {
            let text = raw.get();
            let text = if text.starts_with('"') {
                serde_json::from_str::<String>(text).map_err(D::Error::custom)?
            } else {
                text.to_owned()
            };
            parse_decimal(&text).ok_or_else(|| D::Error::custom(format!("`{text}` is not a decimal number")))
        };
        PrivacyBudget::new(component(&wire.epsilon)?, component(&wire.delta)?).map_err(D::Error::custom)
    }
}

impl FromStr for PrivacyBudget {
    type Err = BudgetError;

    /// Parses `"<epsilon>,<delta>"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (e, d) = s
            .split_once(',')
            .ok_or_else(|| BudgetError::InvalidBudget(format!("expected `epsilon,delta`, got `{s}`")))?;
        PrivacyBudget::parse(e, d)
    }
}

/// Result of an atomic check-and-spend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpendOutcome {
    Accepted { remaining: PrivacyBudget },
    InsufficientBudget { remaining: PrivacyBudget },
}

impl SpendOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, SpendOutcome::Accepted { .. })
    }

    pub fn remaining(&self) -> PrivacyBudget {
        match *self {
            SpendOutcome::Accepted { remaining } | SpendOutcome::InsufficientBudget { remaining } => remaining,
        }
    }
}

/// `(initial, spent, remaining)` snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSnapshot {
    pub initial: PrivacyBudget,
    pub spent: PrivacyBudget,
    pub remaining: PrivacyBudget,
}

/// Budget state of one user on one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedgerEntry {
    pub user: String,
    pub dataset: String,
    initial: PrivacyBudget,
    spent: PrivacyBudget,
}

impl BudgetLedgerEntry {
    pub fn new(user: impl Into<String>, dataset: impl Into<String>, initial: PrivacyBudget) -> Self {
        BudgetLedgerEntry {
            user: user.into(),
            dataset: dataset.into(),
            initial,
            spent: PrivacyBudget::ZERO,
        }
    }

    pub fn initial(&self) -> PrivacyBudget {
        self.initial
    }

    pub fn spent(&self) -> PrivacyBudget {
        self.spent
    }

    pub fn remaining(&self) -> PrivacyBudget {
        self.initial
            .checked_sub(&self.spent)
            .expect("spent never exceeds initial")
    }

    pub fn snapshot(&self) -> BudgetSnapshot {
        BudgetSnapshot {
            initial: self.initial,
            spent: self.spent,
            remaining: self.remaining(),
        }
    }

    /// Spends `cost` if it fits in the remaining budget in both components;
    /// otherwise leaves the entry untouched.
    pub fn check_and_spend(&mut self, cost: &PrivacyBudget) -> SpendOutcome {
        let remaining = self.remaining();
        if !cost.fits_within(&remaining) {
            return SpendOutcome::InsufficientBudget { remaining };
        }
        self.spent = self
            .spent
            .checked_add(cost)
            .expect("spent + cost <= initial cannot overflow");
        SpendOutcome::Accepted {
            remaining: self.remaining(),
        }
    }

    /// Rejects stored entries whose spent exceeds their allocation.
    pub fn is_consistent(&self) -> bool {
        self.spent.fits_within(&self.initial)
    }
}

type Key = (String, String);

/// Concurrent in-memory ledger with per-(user, dataset) atomic spends.
#[derive(Debug, Default)]
pub struct Ledger {
    entries: RwLock<HashMap<Key, Arc<Mutex<BudgetLedgerEntry>>>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = BudgetLedgerEntry>) -> Self {
        let map = entries
            .into_iter()
            .map(|e| ((e.user.clone(), e.dataset.clone()), Arc::new(Mutex::new(e))))
            .collect();
        Ledger {
            entries: RwLock::new(map),
        }
    }

    pub fn allocate(&self, user: &str, dataset: &str, initial: PrivacyBudget) -> Result<(), BudgetError> {
        let mut map = self.entries.write().expect("ledger lock poisoned");
        let key = (user.to_owned(), dataset.to_owned());
        if map.contains_key(&key) {
            return Err(BudgetError::DuplicateEntry {
                user: user.to_owned(),
                dataset: dataset.to_owned(),
            });
        }
        map.insert(
            key,
            Arc::new(Mutex::new(BudgetLedgerEntry::new(user, dataset, initial))),
        );
        Ok(())
    }

    fn entry(&self, user: &str, dataset: &str) -> Result<Arc<Mutex<BudgetLedgerEntry>>, BudgetError> {
        let map = self.entries.read().expect("ledger lock poisoned");
        map.get(&(user.to_owned(), dataset.to_owned()))
            .cloned()
            .ok_or_else(|| BudgetError::UnknownUserOrDataset {
                user: user.to_owned(),
                dataset: dataset.to_owned(),
            })
    }

    pub fn get_budget(&self, user: &str, dataset: &str) -> Result<BudgetSnapshot, BudgetError> {
        let entry = self.entry(user, dataset)?;
        let guard = entry.lock().expect("ledger entry poisoned");
        Ok(guard.snapshot())
    }

    pub fn check_and_spend(
        &self,
        user: &str,
        dataset: &str,
        cost: &PrivacyBudget,
    ) -> Result<SpendOutcome, BudgetError> {
        let entry = self.entry(user, dataset)?;
        let mut guard = entry.lock().expect("ledger entry poisoned");
        Ok(guard.check_and_spend(cost))
    }

    /// Consistent copy of every entry, sorted by (user, dataset).
    pub fn entries(&self) -> Vec<BudgetLedgerEntry> {
        let map = self.entries.read().expect("ledger lock poisoned");
        let mut out: Vec<_> = map
            .values()
            .map(|e| e.lock().expect("ledger entry poisoned").clone())
            .collect();
        out.sort_by(|a, b| (&a.user, &a.dataset).cmp(&(&b.user, &b.dataset)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(e: &str, d: &str) -> PrivacyBudget {
        PrivacyBudget::parse(e, d).unwrap()
    }

    #[test]
    fn fresh_entry_reports_full_budget() {
        let ledger = Ledger::new();
        ledger.allocate("Dr. Antartica", "PENGUIN", b("10", "0.005")).unwrap();
        let snap = ledger.get_budget("Dr. Antartica", "PENGUIN").unwrap();
        assert_eq!(snap.initial, b("10", "0.005"));
        assert_eq!(snap.spent, PrivacyBudget::ZERO);
        assert_eq!(snap.remaining, b("10", "0.005"));
    }

    #[test]
    fn spend_subtracts_exactly() {
        let ledger = Ledger::new();
        ledger.allocate("u", "d", b("10", "0.005")).unwrap();
        let out = ledger.check_and_spend("u", "d", &b("0.2", "0.00002")).unwrap();
        assert_eq!(
            out,
            SpendOutcome::Accepted {
                remaining: b("9.8", "0.00498")
            }
        );
        assert_eq!(
            ledger.get_budget("u", "d").unwrap().remaining.epsilon,
            Decimal::from_str_exact("9.8").unwrap()
        );
    }

    #[test]
    fn insufficient_leaves_ledger_unchanged() {
        let mut e = BudgetLedgerEntry::new("u", "d", b("0.1", "0"));
        let before = e.clone();
        assert_eq!(
            e.check_and_spend(&b("0.2", "0")),
            SpendOutcome::InsufficientBudget {
                remaining: b("0.1", "0")
            }
        );
        assert_eq!(e, before);
    }

    #[test]
    fn delta_must_fit_too() {
        let mut e = BudgetLedgerEntry::new("u", "d", b("5", "0.00001"));
        assert!(!e.check_and_spend(&b("0.1", "0.00002")).is_accepted());
        assert_eq!(e.spent(), PrivacyBudget::ZERO);
    }

    #[test]
    fn exact_exhaustion_is_allowed() {
        let mut e = BudgetLedgerEntry::new("u", "d", b("0.2", "0"));
        assert_eq!(
            e.check_and_spend(&b("0.2", "0")),
            SpendOutcome::Accepted {
                remaining: PrivacyBudget::ZERO
            }
        );
    }

    #[test]
    fn unknown_entry() {
        let ledger = Ledger::new();
        assert!(matches!(
            ledger.get_budget("nobody", "d"),
            Err(BudgetError::UnknownUserOrDataset { .. })
        ));
        assert!(ledger.check_and_spend("nobody", "d", &PrivacyBudget::ZERO).is_err());
    }

    #[test]
    fn float_conversion_uses_shortest_decimal() {
        let p = PrivacyBudget::from_f64(0.1, 0.00001).unwrap();
        assert_eq!(p, b("0.1", "0.00001"));
        assert_eq!(p.checked_mul(2).unwrap(), b("0.2", "0.00002"));
        assert!(PrivacyBudget::from_f64(f64::NAN, 0.0).is_err());
        assert!(PrivacyBudget::from_f64(-1.0, 0.0).is_err());
        assert!(PrivacyBudget::from_f64(1e-40, 0.0).is_err());
    }

    #[test]
    fn json_wire_is_exact() {
        let p = b("9.8", "0.00498");
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"epsilon":9.8,"delta":0.00498}"#);
        let back: PrivacyBudget = serde_json::from_str(r#"{"epsilon":1e-1,"delta":"0.3"}"#).unwrap();
        assert_eq!(back, b("0.1", "0.3"));
        assert!(serde_json::from_str::<PrivacyBudget>(r#"{"epsilon":-1,"delta":0}"#).is_err());
    }

    #[test]
    fn concurrent_spends_never_overspend() {
        let ledger = Arc::new(Ledger::new());
        ledger.allocate("u", "d", b("1.0", "0")).unwrap();
        let cost = b("0.2", "0");
        let accepted: usize = std::thread::scope(|s| {
            let handles: Vec<_> = (0..64)
                .map(|_| {
                    let ledger = Arc::clone(&ledger);
                    s.spawn(move || ledger.check_and_spend("u", "d", &cost).unwrap().is_accepted() as usize)
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(accepted, 5);
        assert_eq!(ledger.get_budget("u", "d").unwrap().remaining, PrivacyBudget::ZERO);
    }

    proptest! {
        #[test]
        fn conservation_and_monotonicity(costs in prop::collection::vec((0u32..5000, 0u32..50), 1..200)) {
            let mut e = BudgetLedgerEntry::new("u", "d", b("10", "0.005"));
            let mut prev = e.spent();
            for (ce, cd) in costs {
                let cost = PrivacyBudget::new(Decimal::new(ce as i64, 4), Decimal::new(cd as i64, 6)).unwrap();
                e.check_and_spend(&cost);
                prop_assert!(prev.fits_within(&e.spent()));
                prop_assert_eq!(e.spent().checked_add(&e.remaining()).unwrap(), e.initial());
                prev = e.spent();
            }
        }
    }
}
