//! Synthetic multimodal data, training, metrics, ablation grids and result
//! files around the `hypca` network.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod probe;
pub mod results;
pub mod synth;
pub mod train;

pub use ablate::{grid_rows, run_ablation, AblationRecord, AblationRow, Grid};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, TrainConfig, SEED_ENV};
pub use error::{HarnessError, Result};
pub use metrics::{metrics, Metrics};
pub use probe::{linear_probe, ProbeConfig};
pub use synth::{synth_dataset, ClassPattern, SynthSpec, SyntheticDataset};
pub use train::{evaluate_checkpoint, train, ExperimentResult, RunStatus, Trained};
