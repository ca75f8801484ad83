//! Training engine for positive-incentive noise on embedding-space binary
//! detectors.
//!
//! A frozen projection plus a low-rank adapter maps raw features to `f`. A
//! cross-attention generator conditioned on a label anchor produces a
//! diagonal Gaussian perturbation, and two linear heads are trained jointly
//! on `f` and `f + eps`. Inference uses the clean head only.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod noise;
pub mod numeric;
pub mod objective;
pub mod optim;
pub mod pinf;
pub mod rng;
pub mod state_file;
pub mod tape;
pub mod train;
pub mod verify;

pub use config::{NoiseModeTag, RunConfig};
pub use data::{Domain, FeatureRecord, FeatureSet, Label, ShortcutSpec};
pub use error::{Error, Result};
pub use eval::{EvalReport, evaluate, run_ablation};
pub use model::Params;
pub use numeric::{Mat64, Vec64};
pub use train::{train, CurveRow, TrainState};
pub use verify::{verify_all, VerificationReport};
