//! Training, evaluation, ablation, benchmarking and inference.

mod ablate;
mod bench;
mod checkpoint;
mod config;
mod evaluate;
mod infer;
mod model;
mod train;

pub use ablate::{ablate, AblationRow, AblationTable};
pub use bench::{bench, device_descriptor, BenchReport};
pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use config::{
    apply_override, BenchConfig, BranchSelector, DataConfig, EvalConfig, ForgeSection, ModelConfig,
    OutputConfig, Preset, RunConfig, TrainConfig,
};
pub use evaluate::{evaluate, metric_header, metric_line, LabelOracle, ModelPredictor, Predictor};
pub use infer::{infer_pair, load_for_inference, InferOutputs};
pub use model::{JointNet, ModelTrace, Prediction, CD_PREFIX, OF_PREFIX};
pub use train::{history_csv, learning_rates, sample_step, train, write_history, EpochRecord, SampleStep};
