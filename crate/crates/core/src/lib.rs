//! Class-incremental learning with fixed uniform prototypes.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: prototype sets on the unit hypersphere and their uniformity
//! - [`assignment`]: EMA class centers and class-to-prototype matching
//! - [`losses`]: prototype, contrastive, distillation and cosine-classifier losses
//! - [`encoder`]: a hand-differentiated MLP feature extractor with SGD
//! - [`memory`]: rehearsal buffer, herding and imbalance ratio
//! - [`dataflow`]: synthetic blobs, IDX files and task schedules
//! - [`harness`]: the task loop, evaluation, metrics and the ablation grid
//! - [`config`] and [`report`]: run configuration and machine-readable outputs

pub mod assignment;
pub mod config;
pub mod dataflow;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod memory;
pub mod report;
pub mod rng;

pub use assignment::{Assignment, ClassCenters};
pub use config::RunConfig;
pub use dataflow::{LabeledDataset, TaskSchedule};
pub use encoder::{EncoderState, OptimizerState, TeacherSnapshot};
pub use error::{Error, Result};
pub use geometry::{Generator, PrototypeSet, UnitVector};
pub use harness::{MetricsRecord, RunOutput, VariantSpec};
pub use losses::{ClassPrior, FeatureBatch, LossConfig, LossResult, MarginMode};
pub use memory::{ClassCountTable, MemoryBuffer, MemoryStrategy};
