//! Run configuration, training, evaluation and sweeps.

pub mod config;
pub mod gradcheck;
pub mod sweep;
pub mod train;

pub use config::{parse_depths, RunConfig, ACT_WEIGHT_AXIS};
pub use sweep::{parse_axis, sweep, SweepRow};
pub use train::{accuracy, checkpoint_config, evaluate, load_data, read_metrics, train, train_on, EvalReport, Metric, TrainReport};
