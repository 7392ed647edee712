//! Synthetic time-series generation through functional embeddings.
//!
//! Windows of a series are decomposed on a per-channel functional basis
//! (principal components or independent components), the resulting
//! coefficient table is serialized as fill-in-the-middle text, new rows are
//! sampled from a text-generation backend, filtered, and decoded back into
//! series. A metric suite scores the synthetic set against the original.

pub mod backend;
pub mod codec;
pub mod data;
pub mod embedding;
pub mod error;
pub mod filter;
pub mod generation;
mod linalg;
pub mod metrics;
pub mod segmentation;

pub use backend::{
    Backend, BackendHandle, BackendKind, FaultModes, ReferenceBackend, RemoteBackend,
    SamplingParams, TrainingParams,
};
pub use data::{
    apply_scaler, fit_scaler, invert_scaler, load_dataset, Channel, ColumnSelection, InstanceSet,
    RawSeries, ScalerState,
};
pub use embedding::{
    embed, fit_basis, reconstruct, select_k, variance_retained, BasisSystem, ChannelBasis,
    ChannelSpan, EmbeddingTable, FastIcaParams, Method,
};
pub use error::{Error, Result};
pub use filter::{
    diversity_score, filter_batch, norm_bounds, should_stop, BatchDisposition, BatchLogRecord,
    FilterState, RejectReason, StopDecision, StoppingRule,
};
pub use generation::{generate_rows, GenerationConfig, GenerationOutcome, StopReason};
pub use metrics::{
    evaluate, normalize_and_rank, ComparisonTable, DtwCost, Metric, MetricConfig, MetricReport,
    Pairing,
};
pub use segmentation::{segment, segment_with, PeriodChoice, SegmentationPlan};
