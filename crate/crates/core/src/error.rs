use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while loading, validating, or writing an attention capture.
#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing capture file {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unsupported schema_version {0} (expected 1)")]
    SchemaVersion(u32),
    #[error("{file}: expected {expected} bytes, found {found}")]
    ByteLength {
        file: String,
        expected: usize,
        found: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("causality violation at layer {layer}, head {head}, row {row}: weight above the diagonal")]
    Causality { layer: usize, head: usize, row: usize },
    #[error("row-sum violation at layer {layer}, head {head}, row {row}: sum {sum}")]
    RowSum {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
    #[error("invalid attention weight {value} at layer {layer}, head {head}, row {row}")]
    Weight {
        layer: usize,
        head: usize,
        row: usize,
        value: f32,
    },
    #[error("non-finite value tensor entry at layer {layer}, kv head {kv_head}")]
    ValueNotFinite { layer: usize, kv_head: usize },
    #[error("kv_map entry for head {head} is {kv_head}, outside [0, {kv_heads})")]
    KvMap {
        head: usize,
        kv_head: usize,
        kv_heads: usize,
    },
}

/// Argument errors from the synthetic generators.
#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("prompt length T must be at least 2, got {0}")]
    PromptTooShort(usize),
    #[error("invalid synthetic argument: {0}")]
    Argument(String),
}

/// Violations of the selector contract and of the shared selection machinery.
#[derive(Debug, Error, PartialEq)]
pub enum ContractError {
    #[error("invalid contract: {0}")]
    Invalid(String),
    #[error("observation window {window} exceeds prompt length {t}")]
    WindowTooLong { window: usize, t: usize },
    #[error("layer {layer} in the contract is absent from a capture with {layers} layers")]
    UnknownLayer { layer: usize, layers: usize },
    #[error("top-k asked for {k} of {len} entries")]
    KTooLarge { k: usize, len: usize },
    #[error("reserved tail needs {needed} slots but only {available} are budgeted")]
    ReserveExceedsBudget { needed: usize, available: usize },
    #[error("allocation does not conserve the token total: expected {expected}, got {got}")]
    Allocation { expected: usize, got: usize },
    #[error("contract json: {0}")]
    Parse(String),
}

/// Domain and argument errors in the Stage I/II/III numerics.
#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticError {
    #[error("estimators live on different query domains ({0} vs {1})")]
    Domain(usize, usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("block partition mismatch: {0}")]
    Partition(String),
    #[error("undefined input: {0}")]
    Undefined(String),
    #[error("problem exceeds brute-force limits: {0}")]
    Size(String),
    #[error(transparent)]
    Contract(#[from] ContractError),
}

/// Errors from the statistics harness and cell-grid I/O.
#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid statistics input: {0}")]
    Argument(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file: {0}")]
    Parse(String),
    #[error(transparent)]
    Contract(#[from] ContractError),
}
