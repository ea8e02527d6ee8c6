//! Datasets, splitting, CSV ingestion, the fixed-quota batch sampler and the
//! synthetic generator.

mod csv_io;
mod dataset;
mod sampler;
mod schema;
mod synth;

pub use csv_io::{load_csv, read_csv, write_csv, CsvLoad, MalformedRow};
pub use dataset::{
    largest_remainder, split, split_with_min, DomainDataset, Partitions, Sample, SplitFractions,
};
pub use sampler::{equal_quotas, Batch, BatchGroup, QuotaSampler};
pub use schema::{FieldSpec, Schema};
pub use synth::{mixture_directions, synth_generate, AffinitySpec};
