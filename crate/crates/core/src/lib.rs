#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod design;
pub mod error;
pub mod geodata;
pub mod ingest;
pub mod nbdid;
pub mod pipeline;
pub mod regionalize;
pub mod spatial_stats;
pub mod synthetic;
pub mod warning;

pub use error::{Error, Result};
pub use warning::Warning;
