//! Moving-digit video synthesis, IDX ingestion, and the binary dataset format.

mod dataset;
mod glyphs;
mod idx;
mod moving;

pub use dataset::{read_dataset, write_dataset, Dataset, DatasetHeader, DatasetWriter, VideoBatch, DATASET_MAGIC};
pub use glyphs::{render_digit, render_digit_pool, write_glyph_fixture};
pub use idx::{load_idx1_labels, load_mnist_idx, parse_idx3, write_idx1, write_idx3, IdxImages};
pub use moving::{
    bounce, generate_dataset, generate_sequence, generate_sequences, DigitPool, MovingSpec, TEST_SEED_OFFSET,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{what}: bad magic at byte 0, expected {expected}, found {found}")]
    BadMagic {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("{what}: truncated at byte offset {offset}, expected {expected} bytes in total, file has {actual}")]
    Truncated {
        what: &'static str,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("dataset format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dataset: {0}")]
    Invalid(String),
    #[error("dataset shape {actual:?} is incompatible with the run: {reason}")]
    ShapeMismatch { actual: Vec<usize>, reason: String },
}
