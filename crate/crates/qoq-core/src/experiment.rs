//! Seeded end-to-end experiment runner.
//!
//! One experiment fans out over seeds. Each seed generates a planted
//! training set and a held-out expert validation set, trains a reference
//! policy on everything, sketches gradients once, and then runs every
//! curation arm against the same caches: influence scoring at max and mean
//! aggregation, a step-granularity ablation at a matched step budget, random
//! selection, autoencoder retrieval, and rollout-weighted scoring. Arms that
//! produce a curated dataset are retrained from scratch and evaluated on the
//! task; every arm reports curation accuracy against the planted labels.
//!
//! The report is plain serde data with ordered maps and no timestamps, so a
//! rerun of the same config is byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    merge_for_autoencoder, random_select, retrieval_step_scores, train_autoencoder,
};
use crate::curate::{
    dataset_hash_hex, materialize, select_top_steps, select_top_trajectories, BudgetPolicy,
    CurateError, CurationResult, Selection,
};
use crate::data::{Dataset, Label};
use crate::grad::{build_grad_cache, OporpConfig};
use crate::metrics::{
    curation_accuracy, kendalls_w, mean_stderr, ranking_from_scores, AccuracyReport,
    ConsistencyReport,
};
use crate::policy::{LayerMask, PolicyArch};
use crate::score::{aggregate_trajectories, rollout_weighted_scores, step_scores, ScoreMode,
    Weighting};
use crate::sim::{
    evaluate_policy, generate_dataset, mix_seed, rollout_dataset, trim_to_contact, DemoMode,
    ACTION_DIM, STATE_DIM,
};
use crate::train::{train_bc, TrainConfig};

/// Arm that keeps the whole training set and evaluates the reference policy.
pub const ARM_ALL_DATA: &str = "all_data";
/// Influence curation with max-over-validation aggregation (the main method).
pub const ARM_QOQ_MAX: &str = "qoq_max";
/// Influence curation with mean-over-validation aggregation.
pub const ARM_QOQ_MEAN: &str = "qoq_mean";
/// Step-granularity influence curation at a matched step budget.
pub const ARM_QOQ_STEP: &str = "qoq_step";
/// Uniform random selection at the same trajectory budget.
pub const ARM_RANDOM: &str = "random";
/// Autoencoder latent-similarity retrieval at the same trajectory budget.
pub const ARM_RETRIEVAL: &str = "retrieval";
/// Influence against policy rollouts, success and failure sides combined.
pub const ARM_ROLLOUT_WEIGHTED: &str = "rollout_weighted";
/// Influence against successful policy rollouts only.
pub const ARM_ROLLOUT_SUCCESS_ONLY: &str = "rollout_success_only";

// Streams for deriving independent seeds from one experiment seed.
const VAL_STREAM: u64 = 1;
const ROLLOUT_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const RANDOM_STREAM: u64 = 4;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("seed {seed} failed during {stage}: {message}")]
    Stage {
        stage: &'static str,
        seed: u64,
        message: String,
    },
    #[error("consistency comparison needs at least 2 training seeds, got {got}")]
    TooFewTrainSeeds { got: usize },
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad experiment JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn stage_err<E: Display>(stage: &'static str, seed: u64) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::Stage {
        stage,
        seed,
        message: e.to_string(),
    }
}

fn default_n_success() -> usize {
    60
}
fn default_n_fail() -> usize {
    40
}
fn default_fail_modes() -> Vec<DemoMode> {
    vec![DemoMode::GraspMiss, DemoMode::WrongGoal]
}
fn default_n_val() -> usize {
    10
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_epochs() -> usize {
    300
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    3e-3
}
fn default_mask() -> LayerMask {
    LayerMask::All
}
fn default_sketch_dim() -> usize {
    1024
}
fn default_oporp_seed() -> u64 {
    7
}
fn default_true() -> bool {
    true
}
fn default_budget() -> BudgetPolicy {
    BudgetPolicy::MatchSuccessCount
}
fn default_eval_episodes() -> usize {
    50
}
fn default_rollout_episodes() -> usize {
    20
}
fn default_rollout_success_cap() -> usize {
    5
}

/// Everything a run depends on. Only `seeds` is required in a config file;
/// every other field has the headline-experiment default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment seeds; each produces an independent dataset and policy.
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_success")]
    pub n_success: usize,
    #[serde(default = "default_n_fail")]
    pub n_fail: usize,
    /// Failure modes cycled through when generating the planted failures.
    #[serde(default = "default_fail_modes")]
    pub fail_modes: Vec<DemoMode>,
    /// Held-out expert demonstrations used as the validation set.
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_mask")]
    pub mask: LayerMask,
    #[serde(default = "default_sketch_dim")]
    pub sketch_dim: usize,
    #[serde(default = "default_oporp_seed")]
    pub oporp_seed: u64,
    #[serde(default = "default_true")]
    pub renormalize: bool,
    /// Trim validation demonstrations to their post-contact suffix before
    /// gradient extraction. Retrieval always sees the untrimmed validation
    /// set: its similarity needs the full state distribution, not the part
    /// that separates outcomes.
    #[serde(default = "default_true")]
    pub trim_validation: bool,
    #[serde(default = "default_budget")]
    pub budget: BudgetPolicy,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Policy rollouts drawn for the rollout-as-validation arms; 0 disables
    /// those arms.
    #[serde(default = "default_rollout_episodes")]
    pub rollout_episodes: usize,
    /// Keep at most this many successful rollouts, emulating the
    /// scarce-success regime the weighting is built for.
    #[serde(default = "default_rollout_success_cap")]
    pub rollout_success_cap: usize,
}

impl ExperimentConfig {
    /// Config with the headline defaults for the given seeds.
    pub fn new(seeds: Vec<u64>) -> Self {
        Self {
            seeds,
            n_success: default_n_success(),
            n_fail: default_n_fail(),
            fail_modes: default_fail_modes(),
            n_val: default_n_val(),
            hidden: default_hidden(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            mask: default_mask(),
            sketch_dim: default_sketch_dim(),
            oporp_seed: default_oporp_seed(),
            renormalize: true,
            trim_validation: true,
            budget: default_budget(),
            eval_episodes: default_eval_episodes(),
            rollout_episodes: default_rollout_episodes(),
            rollout_success_cap: default_rollout_success_cap(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.n_success == 0 {
            return bad("n_success must be at least 1");
        }
        if self.n_fail > 0 && self.fail_modes.is_empty() {
            return bad("fail_modes must be non-empty when n_fail > 0");
        }
        if self.n_val == 0 {
            return bad("n_val must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if self.sketch_dim == 0 {
            return bad("sketch_dim must be at least 1");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1");
        }
        Ok(())
    }

    pub fn arch(&self) -> PolicyArch {
        PolicyArch::new(STATE_DIM, ACTION_DIM, self.hidden.clone()).with_task_relative_input()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        let path = path.as_ref();
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serializes");
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|source| ExperimentError::Write {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// One curation arm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmOutcome {
    pub accuracy: AccuracyReport,
    /// Task success of a policy retrained on the curated subset. Absent for
    /// arms that only score, like the rollout-weighting ablations.
    pub success_rate: Option<f64>,
    /// Trajectories or steps selected, at the arm's native granularity.
    pub selected: usize,
    /// Distinct trajectories the selection touches.
    pub distinct_trajectories: usize,
    /// Trajectories the selection covers in full; for step selections this
    /// counts trajectories with every step selected.
    pub complete_trajectories: usize,
}

/// Everything produced for one experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dataset_hash: String,
    pub val_dataset_hash: String,
    pub checkpoint_hash: String,
    pub n_rollout_successes: usize,
    pub n_rollout_failures: usize,
    pub notes: Vec<String>,
    pub arms: BTreeMap<String, ArmOutcome>,
}

/// Mean and standard error over the seeds that ran an arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSummary {
    pub seeds_counted: usize,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
    pub mean_success_rate: Option<f64>,
    pub stderr_success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedOutcome>,
    pub summary: BTreeMap<String, ArmSummary>,
}

impl ExperimentReport {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_bytes()).map_err(|source| ExperimentError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Runs every seed (in parallel, in config order) and summarizes per arm.
/// Any stage failure aborts the whole run, naming the stage and seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let seeds: Vec<SeedOutcome> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed))
        .collect::<Result<_, _>>()?;
    let summary = summarize(&seeds);
    Ok(ExperimentReport {
        config: cfg.clone(),
        seeds,
        summary,
    })
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, ExperimentError> {
    let arch = cfg.arch();
    let tcfg = cfg.train_config(seed);
    let eval_seed = mix_seed(seed, EVAL_STREAM);

    let train_ds = generate_dataset(cfg.n_success, cfg.n_fail, &cfg.fail_modes, seed)
        .map_err(stage_err("generate", seed))?;
    let val_raw = generate_dataset(cfg.n_val, 0, &[], mix_seed(seed, VAL_STREAM))
        .map_err(stage_err("generate", seed))?;
    let val_ds = if cfg.trim_validation {
        trim_to_contact(&val_raw).map_err(stage_err("trim", seed))?
    } else {
        val_raw.clone()
    };

    let (policy, _) = train_bc(&train_ds, &arch, &tcfg).map_err(stage_err("train", seed))?;

    let input_dim = cfg.mask.param_count(&arch).map_err(stage_err("grads", seed))?;
    let oporp = OporpConfig {
        input_dim,
        sketch_dim: cfg.sketch_dim,
        seed: cfg.oporp_seed,
    };
    let train_cache = build_grad_cache(&policy, &train_ds, cfg.mask, &oporp, cfg.renormalize)
        .map_err(stage_err("grads", seed))?;
    let val_cache = build_grad_cache(&policy, &val_ds, cfg.mask, &oporp, cfg.renormalize)
        .map_err(stage_err("grads", seed))?;

    let mut notes: Vec<String> = Vec::new();
    let mut arms: BTreeMap<String, ArmOutcome> = BTreeMap::new();

    // Keep everything. Retraining on the full set would reproduce the
    // reference policy, so it is evaluated directly.
    let all_sel = select_all(&train_ds).map_err(stage_err("curate", seed))?;
    let all_success = evaluate_policy(&policy, cfg.eval_episodes, eval_seed)
        .map_err(stage_err("evaluate", seed))?;
    arms.insert(
        ARM_ALL_DATA.to_string(),
        arm_outcome(&all_sel, &train_ds, ARM_ALL_DATA, Some(all_success), seed)?,
    );

    // Influence scores at both aggregation modes, from the shared caches.
    let max_steps =
        step_scores(&train_cache, &val_cache, ScoreMode::Max).map_err(stage_err("score", seed))?;
    let max_trajs =
        aggregate_trajectories(&max_steps, &train_ds).map_err(stage_err("score", seed))?;
    let mean_steps =
        step_scores(&train_cache, &val_cache, ScoreMode::Mean).map_err(stage_err("score", seed))?;
    let mean_trajs =
        aggregate_trajectories(&mean_steps, &train_ds).map_err(stage_err("score", seed))?;

    let qoq_max_sel = select_top_trajectories(&max_trajs, cfg.budget, &train_ds)
        .map_err(stage_err("curate", seed))?;
    let qoq_max_ds = materialize(&qoq_max_sel, &train_ds).map_err(stage_err("curate", seed))?;
    let qoq_max_success =
        retrain_and_eval(&qoq_max_ds, &arch, &tcfg, cfg.eval_episodes, eval_seed, seed)?;
    arms.insert(
        ARM_QOQ_MAX.to_string(),
        arm_outcome(&qoq_max_sel, &train_ds, ARM_QOQ_MAX, Some(qoq_max_success), seed)?,
    );

    let qoq_mean_sel = select_top_trajectories(&mean_trajs, cfg.budget, &train_ds)
        .map_err(stage_err("curate", seed))?;
    let qoq_mean_ds = materialize(&qoq_mean_sel, &train_ds).map_err(stage_err("curate", seed))?;
    let qoq_mean_success =
        retrain_and_eval(&qoq_mean_ds, &arch, &tcfg, cfg.eval_episodes, eval_seed, seed)?;
    arms.insert(
        ARM_QOQ_MEAN.to_string(),
        arm_outcome(
            &qoq_mean_sel,
            &train_ds,
            ARM_QOQ_MEAN,
            Some(qoq_mean_success),
            seed,
        )?,
    );

    // Step granularity at the step budget the trajectory winner used, so the
    // two arms retrain on the same amount of data.
    let matched_steps = qoq_max_ds.total_steps();
    let qoq_step_sel =
        select_top_steps(&max_steps, matched_steps, &train_ds).map_err(stage_err("curate", seed))?;
    let qoq_step_ds = materialize(&qoq_step_sel, &train_ds).map_err(stage_err("curate", seed))?;
    let qoq_step_success =
        retrain_and_eval(&qoq_step_ds, &arch, &tcfg, cfg.eval_episodes, eval_seed, seed)?;
    arms.insert(
        ARM_QOQ_STEP.to_string(),
        arm_outcome(
            &qoq_step_sel,
            &train_ds,
            ARM_QOQ_STEP,
            Some(qoq_step_success),
            seed,
        )?,
    );

    let random_sel = random_select(
        &train_ds,
        qoq_max_sel.resolved_budget,
        mix_seed(seed, RANDOM_STREAM),
    )
    .map_err(stage_err("curate", seed))?;
    let random_ds = materialize(&random_sel, &train_ds).map_err(stage_err("curate", seed))?;
    let random_success =
        retrain_and_eval(&random_ds, &arch, &tcfg, cfg.eval_episodes, eval_seed, seed)?;
    arms.insert(
        ARM_RANDOM.to_string(),
        arm_outcome(&random_sel, &train_ds, ARM_RANDOM, Some(random_success), seed)?,
    );

    // Retrieval fits its autoencoder on train plus untrimmed validation and
    // retrieves against the untrimmed validation set.
    let merged = merge_for_autoencoder(&train_ds, &val_raw);
    let (ae, _) = train_autoencoder(&merged, &tcfg).map_err(stage_err("retrieval", seed))?;
    let retrieval_sims =
        retrieval_step_scores(&train_ds, &val_raw, &ae).map_err(stage_err("retrieval", seed))?;
    let retrieval_trajs =
        aggregate_trajectories(&retrieval_sims, &train_ds).map_err(stage_err("retrieval", seed))?;
    let retrieval_sel = select_top_trajectories(&retrieval_trajs, cfg.budget, &train_ds)
        .map_err(stage_err("curate", seed))?;
    let retrieval_ds = materialize(&retrieval_sel, &train_ds).map_err(stage_err("curate", seed))?;
    let retrieval_success =
        retrain_and_eval(&retrieval_ds, &arch, &tcfg, cfg.eval_episodes, eval_seed, seed)?;
    arms.insert(
        ARM_RETRIEVAL.to_string(),
        arm_outcome(
            &retrieval_sel,
            &train_ds,
            ARM_RETRIEVAL,
            Some(retrieval_success),
            seed,
        )?,
    );

    // Rollout-as-validation arms score only; no retraining.
    let mut n_rollout_successes = 0;
    let mut n_rollout_failures = 0;
    if cfg.rollout_episodes > 0 {
        let rollouts = rollout_dataset(
            &policy,
            cfg.rollout_episodes,
            mix_seed(seed, ROLLOUT_STREAM),
            true,
            true,
        )
        .map_err(stage_err("rollout", seed))?;
        let (pos_ds, neg_ds, raw_successes) = split_rollouts(&rollouts, cfg.rollout_success_cap);
        n_rollout_successes = pos_ds.trajectories.len();
        n_rollout_failures = neg_ds.trajectories.len();
        if raw_successes > n_rollout_successes {
            notes.push(format!(
                "seed {seed}: kept {n_rollout_successes} of {raw_successes} successful rollouts"
            ));
        }
        let raw_failures = rollouts
            .trajectories
            .iter()
            .filter(|t| t.label == Label::Failure)
            .count();
        if raw_failures > n_rollout_failures {
            notes.push(format!(
                "seed {seed}: kept {n_rollout_failures} of {raw_failures} failure rollouts"
            ));
        }

        let pos_cache = build_grad_cache(&policy, &pos_ds, cfg.mask, &oporp, cfg.renormalize)
            .map_err(stage_err("rollout", seed))?;
        let neg_cache = build_grad_cache(&policy, &neg_ds, cfg.mask, &oporp, cfg.renormalize)
            .map_err(stage_err("rollout", seed))?;

        let weighted =
            rollout_weighted_scores(&train_cache, &pos_cache, &neg_cache, Weighting::Steps)
                .map_err(stage_err("rollout", seed))?;
        let weighted_sel = select_top_trajectories(&weighted, cfg.budget, &train_ds)
            .map_err(stage_err("curate", seed))?;
        arms.insert(
            ARM_ROLLOUT_WEIGHTED.to_string(),
            arm_outcome(&weighted_sel, &train_ds, ARM_ROLLOUT_WEIGHTED, None, seed)?,
        );

        if n_rollout_successes > 0 {
            let empty = Dataset::new(STATE_DIM, ACTION_DIM);
            let empty_cache = build_grad_cache(&policy, &empty, cfg.mask, &oporp, cfg.renormalize)
                .map_err(stage_err("rollout", seed))?;
            let pos_only =
                rollout_weighted_scores(&train_cache, &pos_cache, &empty_cache, Weighting::Steps)
                    .map_err(stage_err("rollout", seed))?;
            let pos_only_sel = select_top_trajectories(&pos_only, cfg.budget, &train_ds)
                .map_err(stage_err("curate", seed))?;
            arms.insert(
                ARM_ROLLOUT_SUCCESS_ONLY.to_string(),
                arm_outcome(
                    &pos_only_sel,
                    &train_ds,
                    ARM_ROLLOUT_SUCCESS_ONLY,
                    None,
                    seed,
                )?,
            );
        } else {
            notes.push(format!(
                "seed {seed}: no successful rollouts among {}; success-only arm skipped",
                cfg.rollout_episodes
            ));
        }
    }

    Ok(SeedOutcome {
        seed,
        dataset_hash: dataset_hash_hex(&train_ds).map_err(stage_err("generate", seed))?,
        val_dataset_hash: dataset_hash_hex(&val_ds).map_err(stage_err("generate", seed))?,
        checkpoint_hash: hex::encode(policy.params_hash()),
        n_rollout_successes,
        n_rollout_failures,
        notes,
        arms,
    })
}

fn arm_outcome(
    result: &CurationResult,
    ds: &Dataset,
    method: &str,
    success_rate: Option<f64>,
    seed: u64,
) -> Result<ArmOutcome, ExperimentError> {
    let accuracy = curation_accuracy(result, ds, method).map_err(stage_err("metrics", seed))?;
    Ok(ArmOutcome {
        accuracy,
        success_rate,
        selected: result.selection.len(),
        distinct_trajectories: result.selection.distinct_traj_ids().len(),
        complete_trajectories: result.selection.complete_traj_ids(ds).len(),
    })
}

fn retrain_and_eval(
    curated: &Dataset,
    arch: &PolicyArch,
    tcfg: &TrainConfig,
    episodes: usize,
    eval_seed: u64,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let (policy, _) = train_bc(curated, arch, tcfg).map_err(stage_err("retrain", seed))?;
    evaluate_policy(&policy, episodes, eval_seed).map_err(stage_err("evaluate", seed))
}

fn select_all(ds: &Dataset) -> Result<CurationResult, CurateError> {
    let mut ids = ds.ids();
    ids.sort_unstable();
    Ok(CurationResult {
        resolved_budget: ids.len(),
        selection: Selection::Trajectories { ids },
        dataset_hash: dataset_hash_hex(ds)?,
        tie_log: Vec::new(),
    })
}

/// Splits labeled rollouts into success and failure datasets, keeping at
/// most `success_cap` successes. Failures are kept up to the number of
/// successes kept (at least one): failed episodes run to the step limit, so
/// an uncapped failure set outweighs the scarce successes in the step-count
/// weighting by an order of magnitude and the combined score degenerates to
/// pure negation. Returns the uncapped success count too.
fn split_rollouts(rollouts: &Dataset, success_cap: usize) -> (Dataset, Dataset, usize) {
    let mut pos = Vec::new();
    let mut raw_successes = 0;
    for traj in &rollouts.trajectories {
        if traj.label == Label::Success {
            raw_successes += 1;
            if pos.len() < success_cap {
                pos.push(traj.clone());
            }
        }
    }
    let failure_cap = pos.len().max(1);
    let neg: Vec<_> = rollouts
        .trajectories
        .iter()
        .filter(|t| t.label == Label::Failure)
        .take(failure_cap)
        .cloned()
        .collect();
    (
        Dataset::from_trajectories(rollouts.d_s, rollouts.d_a, pos),
        Dataset::from_trajectories(rollouts.d_s, rollouts.d_a, neg),
        raw_successes,
    )
}

fn summarize(seeds: &[SeedOutcome]) -> BTreeMap<String, ArmSummary> {
    let mut by_arm: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for outcome in seeds {
        for (name, arm) in &outcome.arms {
            let entry = by_arm.entry(name.clone()).or_default();
            entry.0.push(arm.accuracy.success_fraction);
            if let Some(rate) = arm.success_rate {
                entry.1.push(rate);
            }
        }
    }
    by_arm
        .into_iter()
        .map(|(name, (accuracies, rates))| {
            let (mean_accuracy, stderr_accuracy) = mean_stderr(&accuracies);
            let (mean_success_rate, stderr_success_rate) = if rates.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_stderr(&rates);
                (Some(m), Some(s))
            };
            (
                name,
                ArmSummary {
                    seeds_counted: accuracies.len(),
                    mean_accuracy,
                    stderr_accuracy,
                    mean_success_rate,
                    stderr_success_rate,
                },
            )
        })
        .collect()
}

/// How stable each method's trajectory ranking is across training seeds on
/// one fixed dataset, measured by Kendall's W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyComparison {
    pub data_seed: u64,
    pub train_seeds: Vec<u64>,
    pub qoq: ConsistencyReport,
    pub retrieval: ConsistencyReport,
    pub qoq_rankings: Vec<Vec<u64>>,
    pub retrieval_rankings: Vec<Vec<u64>>,
}

/// Generates one dataset from `data_seed`, then for each training seed
/// trains a fresh policy and autoencoder and ranks all trajectories by
/// influence and by retrieval similarity. Kendall's W over each method's
/// rankings says how much the ranking depends on training randomness.
pub fn consistency_comparison(
    cfg: &ExperimentConfig,
    data_seed: u64,
    train_seeds: &[u64],
) -> Result<ConsistencyComparison, ExperimentError> {
    cfg.validate()?;
    if train_seeds.len() < 2 {
        return Err(ExperimentError::TooFewTrainSeeds {
            got: train_seeds.len(),
        });
    }
    let arch = cfg.arch();
    let train_ds = generate_dataset(cfg.n_success, cfg.n_fail, &cfg.fail_modes, data_seed)
        .map_err(stage_err("generate", data_seed))?;
    let val_raw = generate_dataset(cfg.n_val, 0, &[], mix_seed(data_seed, VAL_STREAM))
        .map_err(stage_err("generate", data_seed))?;
    let val_ds = if cfg.trim_validation {
        trim_to_contact(&val_raw).map_err(stage_err("trim", data_seed))?
    } else {
        val_raw.clone()
    };

    let per_seed: Vec<(Vec<u64>, Vec<u64>)> = train_seeds
        .par_iter()
        .map(|&train_seed| -> Result<_, ExperimentError> {
            let tcfg = cfg.train_config(train_seed);
            let (policy, _) =
                train_bc(&train_ds, &arch, &tcfg).map_err(stage_err("train", train_seed))?;
            let input_dim = cfg.mask.param_count(&arch).map_err(stage_err("grads", train_seed))?;
            let oporp = OporpConfig {
                input_dim,
                sketch_dim: cfg.sketch_dim,
                seed: cfg.oporp_seed,
            };
            let train_cache =
                build_grad_cache(&policy, &train_ds, cfg.mask, &oporp, cfg.renormalize)
                    .map_err(stage_err("grads", train_seed))?;
            let val_cache = build_grad_cache(&policy, &val_ds, cfg.mask, &oporp, cfg.renormalize)
                .map_err(stage_err("grads", train_seed))?;
            let influence_steps = step_scores(&train_cache, &val_cache, ScoreMode::Max)
                .map_err(stage_err("score", train_seed))?;
            let influence_trajs = aggregate_trajectories(&influence_steps, &train_ds)
                .map_err(stage_err("score", train_seed))?;

            let merged = merge_for_autoencoder(&train_ds, &val_raw);
            let (ae, _) =
                train_autoencoder(&merged, &tcfg).map_err(stage_err("retrieval", train_seed))?;
            let sims = retrieval_step_scores(&train_ds, &val_raw, &ae)
                .map_err(stage_err("retrieval", train_seed))?;
            let sim_trajs = aggregate_trajectories(&sims, &train_ds)
                .map_err(stage_err("retrieval", train_seed))?;

            Ok((
                ranking_from_scores(&influence_trajs),
                ranking_from_scores(&sim_trajs),
            ))
        })
        .collect::<Result<_, _>>()?;

    let qoq_rankings: Vec<Vec<u64>> = per_seed.iter().map(|p| p.0.clone()).collect();
    let retrieval_rankings: Vec<Vec<u64>> = per_seed.iter().map(|p| p.1.clone()).collect();
    let qoq = kendalls_w(&qoq_rankings).map_err(stage_err("consistency", data_seed))?;
    let retrieval =
        kendalls_w(&retrieval_rankings).map_err(stage_err("consistency", data_seed))?;
    Ok(ConsistencyComparison {
        data_seed,
        train_seeds: train_seeds.to_vec(),
        qoq,
        retrieval,
        qoq_rankings,
        retrieval_rankings,
    })
}
