//! Pre-training, linear probing and fine-tuning loops.

mod config;
mod metrics;
mod optim;
mod phase;
mod schedule;
mod sweep;

pub use config::{parse_kv, set_model_key, Phase, PhaseConfig, Schedule};
pub use metrics::{compute_metrics, MetricReport};
pub use optim::{adamw_step, AdamWState};
pub use phase::{evaluate, run_phase, EpochRecord, PhaseOutcome};
pub use schedule::{cosine_lr, lr_at};
pub use sweep::{meta_dropout_sweep, SweepRow, SweepTable, DEFAULT_RATES};
