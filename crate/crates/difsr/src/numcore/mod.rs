//! Dense-tensor arithmetic with reverse-mode differentiation, plus the
//! numeric-rank utility the diagnostics are built on.

mod rank;
mod value;

pub use rank::{numeric_rank, numeric_rank_slice, singular_values, RankReport};
pub use value::{backward, Value};
