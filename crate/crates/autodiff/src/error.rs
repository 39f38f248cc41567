//! Error type shared by tensor construction, ops, and the tape.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: slice [{start}, {start}+{len}) exceeds extent {extent} on axis {axis}")]
    SliceOutOfRange {
        op: &'static str,
        axis: usize,
        start: usize,
        len: usize,
        extent: usize,
    },

    #[error("embedding_lookup: row {row} out of range for table with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },

    #[error("{op}: degenerate input ({detail})")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward root does not belong to this tape")]
    RootNotOnTape,

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}
