//! Dataset simulation, training, evaluation and the utilities behind the
//! command-line tool.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod train;

pub use config::{format_float, TrainConfig};
pub use dataset::{simulate_dataset, split_counts, Dataset, DatasetManifest};
pub use eval::{adjoint_test, evaluate, export_slice, parse_methods, reconstruct, write_report, AdjointPreset, AdjointReport, Axis, Method};
pub use train::{train, EpochLog, RunSummary, Trainer, TrainingData};
