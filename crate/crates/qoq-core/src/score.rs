//! Influence scoring: per-step gradient-similarity scores against a
//! validation cache, trajectory-level aggregation, and rollout-weighted
//! scoring, plus the CSV/JSON score table formats.
//!
//! A training step's score is the dot product of its cached gradient sketch
//! with each validation sketch, reduced by the score mode. `max` is the
//! method of record; `mean` and `sum` are ablations (`sum` matches influence
//! summed over the validation set, the formulation used by prior curation
//! work).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::grad::GradCache;

/// Slack on the [-1, 1] bound check: unit-normalized f32 sketches can
/// overshoot by about twice the allowed norm deviation.
const BOUND_SLACK: f64 = 2.5e-4;

/// Trajectories with no scoreable steps sort below every real score and can
/// never be selected.
pub const UNSCORED_SENTINEL: f64 = f64::NEG_INFINITY;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("gradient caches disagree on {field}")]
    CacheMismatch { field: &'static str },
    #[error("validation cache has no records")]
    EmptyValidation,
    #[error("both rollout validation caches are empty")]
    BothValidationSetsEmpty,
    #[error("step score references trajectory {traj_id} which is not in the dataset")]
    UnknownTrajectory { traj_id: u64 },
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
    #[error("bad score table {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("bad score table {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("bad score sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Reduction over the validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Max,
    Mean,
    Sum,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::Max => "max",
            ScoreMode::Mean => "mean",
            ScoreMode::Sum => "sum",
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(ScoreMode::Max),
            "mean" => Ok(ScoreMode::Mean),
            "sum" => Ok(ScoreMode::Sum),
            other => Err(format!("unknown score mode '{other}', expected max, mean, or sum")),
        }
    }
}

/// What counts as the size of a rollout validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Steps,
    Trajectories,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Weighting::Steps => "steps",
            Weighting::Trajectories => "trajectories",
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "steps" => Ok(Weighting::Steps),
            "trajectories" => Ok(Weighting::Trajectories),
            other => Err(format!(
                "unknown weighting '{other}', expected steps or trajectories"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub traj_id: u64,
    pub step_idx: u32,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajScore {
    pub traj_id: u64,
    pub score: f64,
    #[serde(rename = "n_steps")]
    pub n_steps_scored: u32,
}

/// Provenance sidecar written next to every score table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMeta {
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weighting: Option<String>,
    pub sketch_dim: u32,
    pub oporp_seed: u64,
    pub mask: String,
    pub checkpoint_hash: String,
    pub train_cache_hash: String,
    pub val_cache_hashes: Vec<String>,
}

impl ScoreMeta {
    pub fn for_plain(mode: ScoreMode, train: &GradCache, val: &GradCache) -> Self {
        ScoreMeta {
            mode: mode.name().to_owned(),
            weighting: None,
            sketch_dim: train.k,
            oporp_seed: train.oporp_seed,
            mask: train.mask.name().to_owned(),
            checkpoint_hash: hex::encode(train.checkpoint_hash),
            train_cache_hash: hex::encode(train.content_hash()),
            val_cache_hashes: vec![hex::encode(val.content_hash())],
        }
    }

    pub fn for_rollout(
        weighting: Weighting,
        train: &GradCache,
        pos: &GradCache,
        neg: &GradCache,
    ) -> Self {
        ScoreMeta {
            mode: "rollout-weighted".to_owned(),
            weighting: Some(weighting.name().to_owned()),
            sketch_dim: train.k,
            oporp_seed: train.oporp_seed,
            mask: train.mask.name().to_owned(),
            checkpoint_hash: hex::encode(train.checkpoint_hash),
            train_cache_hash: hex::encode(train.content_hash()),
            val_cache_hashes: vec![
                hex::encode(pos.content_hash()),
                hex::encode(neg.content_hash()),
            ],
        }
    }
}

/// A full score table: step scores, trajectory aggregates, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub meta: ScoreMeta,
    pub steps: Vec<StepScore>,
    pub trajectories: Vec<TrajScore>,
}

fn check_compat(train: &GradCache, val: &GradCache) -> Result<(), ScoreError> {
    if train.k != val.k {
        return Err(ScoreError::CacheMismatch { field: "sketch_dim" });
    }
    if train.oporp_seed != val.oporp_seed {
        return Err(ScoreError::CacheMismatch { field: "oporp_seed" });
    }
    if train.mask != val.mask {
        return Err(ScoreError::CacheMismatch { field: "mask" });
    }
    if train.checkpoint_hash != val.checkpoint_hash {
        return Err(ScoreError::CacheMismatch {
            field: "checkpoint_hash",
        });
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Scores every training record against the validation cache, reduced by
/// `mode`. Validation records are iterated in canonical (traj_id, step_idx)
/// order so mean and sum are reproducible bit for bit.
pub fn step_scores(
    train: &GradCache,
    val: &GradCache,
    mode: ScoreMode,
) -> Result<Vec<StepScore>, ScoreError> {
    check_compat(train, val)?;
    if val.records.is_empty() {
        return Err(ScoreError::EmptyValidation);
    }
    let mut val_order: Vec<usize> = (0..val.records.len()).collect();
    val_order.sort_by_key(|&i| (val.records[i].traj_id, val.records[i].step_idx));
    let val_refs: Vec<&[f32]> = val_order
        .iter()
        .map(|&i| val.records[i].values.as_slice())
        .collect();

    let n_val = val_refs.len() as f64;
    let scores: Vec<StepScore> = train
        .records
        .par_iter()
        .map(|rec| {
            let score = match mode {
                ScoreMode::Max => val_refs
                    .iter()
                    .map(|v| dot(&rec.values, v))
                    .fold(f64::NEG_INFINITY, f64::max),
                ScoreMode::Mean => {
                    val_refs.iter().map(|v| dot(&rec.values, v)).sum::<f64>() / n_val
                }
                ScoreMode::Sum => val_refs.iter().map(|v| dot(&rec.values, v)).sum::<f64>(),
            };
            StepScore {
                traj_id: rec.traj_id,
                step_idx: rec.step_idx,
                score,
            }
        })
        .collect();

    if matches!(mode, ScoreMode::Max | ScoreMode::Mean)
        && train.is_unit_normalized()
        && val.is_unit_normalized()
    {
        for s in &scores {
            assert!(
                s.score.abs() <= 1.0 + BOUND_SLACK,
                "unit-sketch {} score {} for trajectory {} step {} escapes [-1, 1]",
                mode.name(),
                s.score,
                s.traj_id,
                s.step_idx,
            );
        }
    }
    Ok(scores)
}

/// Neumaier-compensated sum, so trajectory means do not drift on long
/// trajectories.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_over_trajectories(
    steps: &[StepScore],
    all_ids: &BTreeSet<u64>,
) -> Result<Vec<TrajScore>, ScoreError> {
    let mut grouped: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in steps {
        if !all_ids.contains(&s.traj_id) {
            return Err(ScoreError::UnknownTrajectory { traj_id: s.traj_id });
        }
        grouped.entry(s.traj_id).or_default().push(s.score);
    }
    let mut out = Vec::with_capacity(all_ids.len());
    let mut unscored = 0usize;
    for &traj_id in all_ids {
        match grouped.get(&traj_id) {
            Some(scores) => out.push(TrajScore {
                traj_id,
                score: compensated_sum(scores.iter().copied()) / scores.len() as f64,
                n_steps_scored: scores.len() as u32,
            }),
            None => {
                unscored += 1;
                out.push(TrajScore {
                    traj_id,
                    score: UNSCORED_SENTINEL,
                    n_steps_scored: 0,
                });
            }
        }
    }
    if unscored > 0 {
        log::warn!("{unscored} trajectories have no scored steps and received the unscorable sentinel");
    }
    Ok(out)
}

/// Per-trajectory arithmetic mean of scored steps, one entry for every
/// trajectory in `ds` in ascending id order. Trajectories with no scored
/// steps get the `UNSCORED_SENTINEL`.
pub fn aggregate_trajectories(
    steps: &[StepScore],
    ds: &Dataset,
) -> Result<Vec<TrajScore>, ScoreError> {
    let ids: BTreeSet<u64> = ds.trajectories.iter().map(|t| t.id).collect();
    mean_over_trajectories(steps, &ids)
}

/// Ids covered by a cache: scored records plus skipped steps.
fn cache_traj_ids(cache: &GradCache) -> BTreeSet<u64> {
    cache
        .records
        .iter()
        .map(|r| r.traj_id)
        .chain(cache.skipped.iter().map(|&(id, _)| id))
        .collect()
}

/// Combines max-mode trajectory scores against success and failure rollout
/// caches: failure similarity counts against a trajectory, each side weighted
/// by its validation set size. One empty side reduces to plain scoring
/// against the other; trajectories with no scoreable steps keep the sentinel.
pub fn rollout_weighted_scores(
    train: &GradCache,
    val_success: &GradCache,
    val_failure: &GradCache,
    weighting: Weighting,
) -> Result<Vec<TrajScore>, ScoreError> {
    check_compat(train, val_success)?;
    check_compat(train, val_failure)?;
    if val_success.records.is_empty() && val_failure.records.is_empty() {
        return Err(ScoreError::BothValidationSetsEmpty);
    }
    let ids = cache_traj_ids(train);
    let side = |val: &GradCache| -> Result<Vec<TrajScore>, ScoreError> {
        let steps = step_scores(train, val, ScoreMode::Max)?;
        mean_over_trajectories(&steps, &ids)
    };
    if val_failure.records.is_empty() {
        return side(val_success);
    }
    if val_success.records.is_empty() {
        let mut scores = side(val_failure)?;
        for s in &mut scores {
            if s.score != UNSCORED_SENTINEL {
                s.score = -s.score;
            }
        }
        return Ok(scores);
    }

    let weight = |cache: &GradCache| -> f64 {
        match weighting {
            Weighting::Steps => cache.records.len() as f64,
            Weighting::Trajectories => {
                let ids: BTreeSet<u64> = cache.records.iter().map(|r| r.traj_id).collect();
                ids.len() as f64
            }
        }
    };
    let n_pos = weight(val_success);
    let n_neg = weight(val_failure);
    let pos = side(val_success)?;
    let neg = side(val_failure)?;
    let combined = pos
        .iter()
        .zip(&neg)
        .map(|(p, n)| {
            debug_assert_eq!(p.traj_id, n.traj_id);
            let score = if p.score == UNSCORED_SENTINEL {
                UNSCORED_SENTINEL
            } else {
                (n_pos * p.score - n_neg * n.score) / (n_pos + n_neg)
            };
            TrajScore {
                traj_id: p.traj_id,
                score,
                n_steps_scored: p.n_steps_scored,
            }
        })
        .collect();
    Ok(combined)
}

/// Which of the two CSV score table shapes a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Steps,
    Trajectories,
}

const STEP_HEADER: [&str; 3] = ["traj_id", "step_idx", "score"];
const TRAJ_HEADER: [&str; 3] = ["traj_id", "score", "n_steps"];

pub fn write_step_csv(steps: &[StepScore], path: impl AsRef<Path>) -> Result<(), ScoreError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|source| ScoreError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    for s in steps {
        w.serialize(s).map_err(|source| ScoreError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    w.flush().map_err(|source| ScoreError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_traj_csv(trajs: &[TrajScore], path: impl AsRef<Path>) -> Result<(), ScoreError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|source| ScoreError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    for t in trajs {
        w.serialize(t).map_err(|source| ScoreError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    w.flush().map_err(|source| ScoreError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn headers_of(path: &Path) -> Result<Vec<String>, ScoreError> {
    let mut r = csv::Reader::from_path(path).map_err(|source| ScoreError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let headers = r.headers().map_err(|source| ScoreError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(headers.iter().map(str::to_owned).collect())
}

/// Distinguishes step tables from trajectory tables by their header row.
pub fn sniff_table(path: impl AsRef<Path>) -> Result<TableKind, ScoreError> {
    let path = path.as_ref();
    let headers = headers_of(path)?;
    if headers == STEP_HEADER {
        Ok(TableKind::Steps)
    } else if headers == TRAJ_HEADER {
        Ok(TableKind::Trajectories)
    } else {
        Err(ScoreError::Format {
            path: path.to_path_buf(),
            message: format!("unrecognized score table header {headers:?}"),
        })
    }
}

pub fn read_step_csv(path: impl AsRef<Path>) -> Result<Vec<StepScore>, ScoreError> {
    let path = path.as_ref();
    if sniff_table(path)? != TableKind::Steps {
        return Err(ScoreError::Format {
            path: path.to_path_buf(),
            message: "expected a step score table (traj_id,step_idx,score)".to_owned(),
        });
    }
    let mut r = csv::Reader::from_path(path).map_err(|source| ScoreError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    r.deserialize()
        .collect::<Result<Vec<StepScore>, csv::Error>>()
        .map_err(|source| ScoreError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_traj_csv(path: impl AsRef<Path>) -> Result<Vec<TrajScore>, ScoreError> {
    let path = path.as_ref();
    if sniff_table(path)? != TableKind::Trajectories {
        return Err(ScoreError::Format {
            path: path.to_path_buf(),
            message: "expected a trajectory score table (traj_id,score,n_steps)".to_owned(),
        });
    }
    let mut r = csv::Reader::from_path(path).map_err(|source| ScoreError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    r.deserialize()
        .collect::<Result<Vec<TrajScore>, csv::Error>>()
        .map_err(|source| ScoreError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

/// Sidecar path for a score table: `scores.csv` -> `scores.meta.json`.
pub fn sidecar_path(csv_path: impl AsRef<Path>) -> PathBuf {
    csv_path.as_ref().with_extension("meta.json")
}

pub fn write_sidecar(meta: &ScoreMeta, csv_path: impl AsRef<Path>) -> Result<(), ScoreError> {
    let path = sidecar_path(csv_path);
    let mut body = serde_json::to_vec_pretty(meta)?;
    body.push(b'\n');
    std::fs::write(&path, body).map_err(|source| ScoreError::Write { path, source })
}

pub fn read_sidecar(csv_path: impl AsRef<Path>) -> Result<ScoreMeta, ScoreError> {
    let path = sidecar_path(csv_path);
    let body = std::fs::read(&path).map_err(|source| ScoreError::Read {
        path: path.clone(),
        source,
    })?;
    Ok(serde_json::from_slice(&body)?)
}
