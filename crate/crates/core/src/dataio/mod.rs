//! File formats: EMB1 dense arrays, CSV label/score tables, JSON run
//! configuration, and model checkpoints.

mod checkpoint;
mod config;
mod csv;
mod emb1;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{EmaSection, EnsembleSection, OptimizerSection, RunConfig, ScheduleSection, TrainingSection, ZeroShotSection};
pub use csv::{
    format_score, labels_csv_string, parse_labels_csv, parse_scores_csv, read_labels_csv, read_scores_csv, scores_csv_string,
    write_labels_csv, write_scores_csv, LabelTable,
};
pub use emb1::{decode_emb1, encode_emb1, read_emb1, write_emb1, EMB1_HEADER_LEN, EMB1_MAGIC};

use thiserror::Error;

/// Malformed input file. Each variant has a stable [`code`](FormatError::code).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("size overflow: {rows} x {cols} does not fit in memory")]
    SizeOverflow { rows: u64, cols: u64 },

    #[error("{count} trailing bytes after payload")]
    TrailingBytes { count: usize },

    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow { line: u64, expected: usize, found: usize },

    #[error("line {line}, column {column:?}: label {value:?} is not 0 or 1")]
    NonBinaryLabel { line: u64, column: String, value: String },

    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: u64, id: String },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid header: {0}")]
    Header(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad_magic",
            FormatError::Truncated { .. } => "truncated",
            FormatError::SizeOverflow { .. } => "size_overflow",
            FormatError::TrailingBytes { .. } => "trailing_bytes",
            FormatError::RaggedRow { .. } => "ragged_row",
            FormatError::NonBinaryLabel { .. } => "non_binary_label",
            FormatError::DuplicateId { .. } => "duplicate_id",
            FormatError::Parse { .. } => "parse",
            FormatError::Header(_) => "header",
            FormatError::Manifest(_) => "manifest",
        }
    }
}
