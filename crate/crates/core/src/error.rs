use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- manifest / data ----
    #[error("manifest not found: {0}")]
    ManifestNotFound(PathBuf),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest line {line}: {msg}")]
    ManifestSyntax { line: usize, msg: String },
    #[error("manifest line {line}: label missing")]
    MissingLabel { line: usize },
    #[error("manifest line {line}: unresolvable image path {path}")]
    UnresolvablePath { line: usize, path: PathBuf },
    #[error("duplicate image_id {0}")]
    DuplicateImageId(String),
    #[error("conflicting records for patient_id {0}")]
    DuplicatePatientId(String),
    #[error("image {image_id}: roi {roi} outside image bounds {width}x{height}")]
    RoiOutOfBounds {
        image_id: String,
        roi: String,
        width: usize,
        height: usize,
    },
    #[error("roi has zero area")]
    EmptyRoi,
    #[error("failed to decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{path}: expected {expected} channel(s), found {found}")]
    ChannelCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid resize target {0}")]
    InvalidSize(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("patient leakage: {0}")]
    Leakage(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),

    // ---- models ----
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("weight checksum mismatch for {path}: expected {expected}, got {actual}")]
    WeightChecksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("invalid channel count {0}: must be at least 3")]
    InvalidChannels(usize),
    #[error("freeze policy references unknown group {0:?}")]
    UnknownGroup(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model has no classification head")]
    MissingHead,
    #[error("classifier already stripped")]
    AlreadyStripped,
    #[error("feature width mismatch: {0}")]
    FeatureDim(String),
    #[error("target class {0} out of range")]
    ClassOutOfRange(usize),
    #[error("model exposes no convolutional activations")]
    NoConvLayer,

    // ---- training ----
    #[error("no trainable parameters")]
    NoTrainableParameters,
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f32 },
    #[error("fold {fold} contains a single class")]
    SingleClassFold { fold: usize },

    // ---- checkpoints ----
    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    CheckpointVersion { found: u32, supported: u32 },
    #[error("checkpoint corrupted: {0}")]
    CheckpointCorrupt(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    // ---- metrics ----
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid probability row {row:?} (sum deviates from 1)")]
    InvalidDistribution { row: [f64; 2] },
    #[error("sample too small: {0} element(s), need at least 2")]
    SampleTooSmall(usize),
    #[error("zero variance in both samples")]
    ZeroVariance,
    #[error("fewer than 2 folds ({0})")]
    TooFewFolds(usize),

    // ---- config ----
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Config(_) | UnknownArchitecture(_) | InvalidSynthConfig(_) | UnknownGroup(_) => {
                ErrorKind::Config
            }
            ManifestNotFound(_)
            | EmptyManifest
            | ManifestSyntax { .. }
            | MissingLabel { .. }
            | UnresolvablePath { .. }
            | DuplicateImageId(_)
            | DuplicatePatientId(_)
            | RoiOutOfBounds { .. }
            | EmptyRoi
            | Decode { .. }
            | ChannelCount { .. }
            | InvalidSplit(_)
            | Leakage(_)
            | SingleClassFold { .. }
            | Csv(_)
            | Image(_) => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }
}
