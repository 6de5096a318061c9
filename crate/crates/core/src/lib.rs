// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod formats;
pub mod nets;
pub mod pipeline;
pub mod promptbank;
pub mod scenegen;
pub mod train;

pub use error::{GamaError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Magic tag and format version of every binary artifact this crate writes.
pub fn artifact_versions() -> [(&'static str, u16); 3] {
    [
        (scenegen::DATASET_MAGIC, scenegen::DATASET_VERSION),
        (nets::checkpoint::MAGIC, nets::checkpoint::VERSION),
        (promptbank::MAGIC, promptbank::VERSION),
    ]
}
