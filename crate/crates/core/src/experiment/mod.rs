//! Run orchestration: configuration, training with selection rounds,
//! transfer and oracle harnesses, timing.

mod config;
mod model;
mod runs;
mod timing;
mod train;

pub use config::{DatasetSource, LoadedData, Mode, Reward, RunConfig};
pub use model::{Model, StepLosses};
pub use runs::{
    check_oracle_guard, exhaustive_oracle, exhaustive_oracle_on, transfer_matrix,
    transfer_matrix_on, without_domain, OracleEntry, OracleReport, TransferMatrix,
    ORACLE_MAX_DOMAINS, ORACLE_MAX_SAMPLES,
};
pub use timing::{timing, timing_on, LatencyStats, ScalingPoint, TimingOptions, TimingReport};
pub use train::{
    all_domains, evaluate, prepare, probe_prototypes, train, train_on, train_pinned, EpochLog,
    PartitionSizes, RunOutcome, RunReport, ValueRow,
};
