//! Influence-based trajectory curation for imitation learning, reproduced at
//! desk scale on a synthetic 2-D pick-and-place environment.
//!
//! The pipeline scores every training state-action pair by the similarity of
//! its policy-gradient direction to the gradients of a validation set,
//! aggregates those scores per trajectory, and keeps the top trajectories
//! under a budget. Retraining on the curated subset filters out planted
//! failure demonstrations and improves downstream success.
//!
//! Modules, in pipeline order:
//!
//! * [`data`] — trajectory containers and the JSONL dataset format.
//! * [`sim`] — the PointBin pick-and-place environment, scripted
//!   demonstrators, and policy evaluation.
//! * [`policy`] — Gaussian MLP policy: log-likelihoods, analytic gradients,
//!   flattening, and the checkpoint format.
//! * [`train`] — behavior cloning with Adam.
//! * [`grad`] — per-step gradient extraction, OPORP sketch compression, and
//!   the gradient cache format.
//! * [`score`] — dot-product influence scores of training steps against a
//!   validation cache, trajectory aggregation, and rollout-weighted scores.
//! * [`curate`] — budget policies, top-N selection, and materialization of
//!   curated datasets.
//! * [`baselines`] — random selection and autoencoder latent-similarity
//!   retrieval.
//! * [`metrics`] — curation accuracy against planted labels and Kendall's W
//!   ranking consistency.
//! * [`experiment`] — seeded end-to-end experiment runner and report.

#![forbid(unsafe_code)]

pub mod baselines;
pub mod curate;
pub mod data;
pub mod experiment;
pub mod grad;
pub mod metrics;
pub mod policy;
pub mod score;
pub mod sim;
pub mod train;

pub use baselines::{Autoencoder, AutoencoderArch};
pub use curate::{BudgetPolicy, CurationResult, Selection, SelectionLevel};
pub use data::{Dataset, Label, Step, Trajectory};
pub use experiment::{ExperimentConfig, ExperimentReport};
pub use grad::{GradCache, GradSketch, OporpConfig};
pub use metrics::AccuracyReport;
pub use policy::{LayerMask, MlpPolicy, PolicyArch};
pub use score::{ScoreMode, ScoreTable, StepScore, TrajScore, Weighting};
pub use sim::{DemoMode, EpisodeOutcome, PointBinAction, PointBinState};
pub use train::{TrainConfig, TrainReport};
