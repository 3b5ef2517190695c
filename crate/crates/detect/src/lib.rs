//! Desk-scale video detection: synthetic clips, a tiny anchor-based
//! detector with optional entropy attention and squeezed GRU, training,
//! evaluation and placement sweeps.

pub mod ablation;
pub mod boxes;
pub mod checks;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, run_experiment, AblationTable, AblationTarget, ExperimentConfig};
pub use boxes::{BBox, Detection};
pub use data::{generate_dataset, DatasetConfig, ToySequence};
pub use eval::{evaluate_map, EvalConfig, EvalReport};
pub use model::{Model, ModelConfig, Placement};
pub use train::{train, TrainConfig};
