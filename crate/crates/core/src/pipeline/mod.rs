//! The four training stages (layer replacement, 10-bit min-max PTQ, gradual
//! bit-width convergence, learning-rate annealing) with the unique-value
//! audit, checkpoints and metrics.

mod audit;
mod checkpoint;
mod config;
mod metrics;
mod ptq;
mod qat;

pub use audit::{audit_bitwidth, bits_for_count, unique_levels, BitAggregate, BitWidthReport, SiteBits};
pub use checkpoint::{
    decode_sections, encode_sections, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, RngState,
    SectionData, Sections, SessionCounters, Stage, TrainingState, FORMAT_VERSION, MAGIC,
};
pub use config::{DataSource, RunConfig, DEFAULT_SYNTHETIC_N};
pub use metrics::{metrics_to_csv, read_metrics_csv, write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use ptq::{
    explicit_init, ptq_minmax, ptq_minmax_bits, site_activations, EXPLICIT_INIT_ACTIVATION_UPPER, EXPLICIT_INIT_BITS,
    PTQ_BITS,
};
pub use qat::{prepare_student, teacher_probabilities, BatchRecord, EpochAudit, QatSession};
