//! Synthetic benchmark: scene generation, training, evaluation and the ablation runner.

pub mod ablate;
pub mod config;
pub mod metrics;
pub mod scene;
pub mod train;

pub use ablate::{ablate, AblationReport, AblationRow, Setting};
pub use config::{Grouping, OptimizerConfig, RunConfig, SceneConfig};
pub use metrics::{average_precision, evaluate, Detection, Metrics};
pub use scene::{generate_dataset, generate_scene, read_dataset, write_dataset, PreparedScene, Scene};
pub use train::{train, train_on, TrainReport};
