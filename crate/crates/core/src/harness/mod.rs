//! Desk-scale experiments: synthetic speckle scenes, a small host network,
//! SGD training, gradient checks and ablation sweeps.

pub mod gradcheck;
pub mod report;
pub mod speckle;
pub mod sweep;
pub mod toynet;
pub mod train;

pub use gradcheck::{gradcheck, module_gradcheck, GradcheckReport, ProbeSize};
pub use report::{ExperimentRecord, TrialReport};
pub use speckle::{generate, SpeckleNoise, SpeckleScene};
pub use sweep::{ablation_sweep, Axis, RowResult, SweepRow, SweepSettings};
pub use toynet::{Task, ToyNet};
pub use train::{train, TrainConfig, TrainOutcome};
