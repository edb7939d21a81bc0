//! Persistence: weight files, trace files, run configs and exports.

mod config;
mod export;
mod trace;
mod weights;

pub use config::{
    resolve_out_dir, AblationSection, BridgeSection, DynRagSection, ModelSource, PolicyKind, ProbeSection, RunConfig,
    TaskKind, TaskSection, OUT_ENV,
};
pub use export::{write_csv, write_json, ExportMeta};
pub use trace::{
    read_trace_file, read_traces, sparse_preserves_argmax, sparsify, write_trace_file, write_traces, RowFormat,
    StoredTrace, TraceHeader, TRACE_SCHEMA,
};
pub use weights::{
    load_model, load_probe, read_weights, save_model, save_probe, write_weights, Tensor, WeightFile, WeightKind,
    WEIGHTS_MAGIC, WEIGHTS_VERSION,
};
