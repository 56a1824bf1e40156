//! Seeded synthetic tables that satisfy a metadata document exactly.
//!
//! The generator is xoshiro256++ seeded through SplitMix64
//! (`Xoshiro256PlusPlus::seed_from_u64`, seed reinterpreted as `u64`). Draws
//! are column-major: all rows of the first column, then all rows of the next,
//! in metadata order. Per value:
//!
//! * real: `lower + (upper - lower) * u`, `u = ((x >> 11) + 0.5) / 2^53`
//! * integer / categorical: rejection sampling of `x` over the inclusive range
//!   (or the category indices) so every outcome is equally likely
//! * boolean: the top bit of `x`
//!
//! where `x` is one 64-bit output.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dataset::{Dataset, Value};
use crate::metadata::{ColumnDomain, DatasetMetadata};
use crate::scalar::DpFloat;

/// Uniform integer in `[0, span)`; `span == 0` means the full 64-bit range.
fn below<R: RngCore>(rng: &mut R, span: u64) -> u64 {
    if span == 0 {
        return rng.next_u64();
    }
    // Largest multiple of `span` representable; draws at or above it are rejected.
    let zone = u64::MAX - (u64::MAX - span + 1) % span;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % span;
        }
    }
}

fn draw<F: DpFloat, R: RngCore>(rng: &mut R, domain: &ColumnDomain) -> Value<F> {
    match domain {
        ColumnDomain::Real { lower, upper } => {
            let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            Value::Real(F::from_f64_lossy((lower + (upper - lower) * u).min(*upper)))
        }
        ColumnDomain::Integer { lower, upper } => {
            let span = (*upper as i128 - *lower as i128 + 1) as u128;
            let span = if span > u64::MAX as u128 { 0 } else { span as u64 };
            Value::Int(lower.wrapping_add(below(rng, span) as i64))
        }
        ColumnDomain::Categorical { categories } => {
            let i = below(rng, categories.len() as u64) as usize;
            Value::Category(categories[i].clone())
        }
        ColumnDomain::Boolean => Value::Bool(rng.next_u64() >> 63 == 1),
    }
}

/// Generates `nb_rows` rows uniformly over every column's declared domain.
/// Deterministic in `(metadata, nb_rows, seed)`.
pub fn generate_dummy<F: DpFloat>(metadata: &DatasetMetadata, nb_rows: usize, seed: i64) -> Dataset<F> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed as u64);
    let columns: Vec<Vec<Value<F>>> = metadata
        .columns
        .iter()
        .map(|c| (0..nb_rows).map(|_| draw(&mut rng, &c.domain)).collect())
        .collect();

    let rows = (0..nb_rows)
        .map(|r| columns.iter().map(|col| col[r].clone()).collect())
        .collect();
    Dataset::new(metadata.column_names().map(str::to_owned).collect(), rows)
}
