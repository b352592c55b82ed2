//! Evaluation metrics: curation accuracy against planted labels, Kendall's W
//! rank concordance across seeds, and the seed-level summary statistics used
//! in reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::curate::{CurationResult, Selection};
use crate::data::{Dataset, Label};
use crate::score::TrajScore;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("trajectory {traj_id} has no label; curation accuracy needs a fully labeled dataset")]
    Unlabeled { traj_id: u64 },
    #[error("selection references trajectory {traj_id} which is not in the dataset")]
    UnknownTrajectory { traj_id: u64 },
    #[error("step index {step_idx} is out of range for trajectory {traj_id}")]
    StepOutOfRange { traj_id: u64, step_idx: u32 },
    #[error("selection is empty")]
    EmptySelection,
    #[error("Kendall's W needs at least 2 rankings, got {got}")]
    TooFewRankings { got: usize },
    #[error("Kendall's W needs at least 2 items, got {got}")]
    TooFewItems { got: usize },
    #[error("rankings do not cover the same item set")]
    MismatchedItems,
    #[error("item {item} appears more than once in a ranking")]
    DuplicateItem { item: u64 },
}

/// Selected/unselected counts split by planted label, at one granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub selected_success: usize,
    pub selected_failure: usize,
    pub unselected_success: usize,
    pub unselected_failure: usize,
}

impl Confusion {
    pub fn success_fraction(&self) -> f64 {
        self.selected_success as f64 / (self.selected_success + self.selected_failure) as f64
    }
}

/// How much of a curated selection came from success-labeled demonstrations,
/// counted both by trajectory and by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub method: String,
    pub resolved_budget: usize,
    /// Fraction at the selection's own granularity.
    pub success_fraction: f64,
    pub trajectory: Confusion,
    pub step: Confusion,
}

/// Counts success-labeled content in the selection. Trajectory selections
/// count each selected trajectory once and all of its steps; step selections
/// count selected steps and the distinct trajectories they touch.
pub fn curation_accuracy(
    result: &CurationResult,
    ds: &Dataset,
    method: &str,
) -> Result<AccuracyReport, MetricsError> {
    let mut labels: BTreeMap<u64, (bool, usize)> = BTreeMap::new();
    for traj in &ds.trajectories {
        let success = match traj.label {
            Label::Success => true,
            Label::Failure => false,
            Label::Unlabeled => return Err(MetricsError::Unlabeled { traj_id: traj.id }),
        };
        labels.insert(traj.id, (success, traj.steps.len()));
    }
    if result.selection.is_empty() {
        return Err(MetricsError::EmptySelection);
    }

    let mut traj_conf = Confusion {
        selected_success: 0,
        selected_failure: 0,
        unselected_success: 0,
        unselected_failure: 0,
    };
    let mut step_conf = traj_conf;

    let (selected_ids, selected_steps): (BTreeSet<u64>, BTreeMap<u64, usize>) =
        match &result.selection {
            Selection::Trajectories { ids } => {
                let mut counts = BTreeMap::new();
                for id in ids {
                    let (_, len) = labels
                        .get(id)
                        .ok_or(MetricsError::UnknownTrajectory { traj_id: *id })?;
                    counts.insert(*id, *len);
                }
                (ids.iter().copied().collect(), counts)
            }
            Selection::Steps { pairs } => {
                let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
                for &(traj_id, step_idx) in pairs {
                    let (_, len) = labels
                        .get(&traj_id)
                        .ok_or(MetricsError::UnknownTrajectory { traj_id })?;
                    if step_idx as usize >= *len {
                        return Err(MetricsError::StepOutOfRange { traj_id, step_idx });
                    }
                    *counts.entry(traj_id).or_insert(0) += 1;
                }
                (counts.keys().copied().collect(), counts)
            }
        };

    for (&id, &(success, len)) in &labels {
        let picked_steps = selected_steps.get(&id).copied().unwrap_or(0);
        if selected_ids.contains(&id) {
            if success {
                traj_conf.selected_success += 1;
            } else {
                traj_conf.selected_failure += 1;
            }
        } else if success {
            traj_conf.unselected_success += 1;
        } else {
            traj_conf.unselected_failure += 1;
        }
        if success {
            step_conf.selected_success += picked_steps;
            step_conf.unselected_success += len - picked_steps;
        } else {
            step_conf.selected_failure += picked_steps;
            step_conf.unselected_failure += len - picked_steps;
        }
    }

    let success_fraction = match result.selection {
        Selection::Trajectories { .. } => traj_conf.success_fraction(),
        Selection::Steps { .. } => step_conf.success_fraction(),
    };
    Ok(AccuracyReport {
        method: method.to_owned(),
        resolved_budget: result.resolved_budget,
        success_fraction,
        trajectory: traj_conf,
        step: step_conf,
    })
}

/// Agreement among rankings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n_rankings: usize,
    pub n_items: usize,
    pub kendalls_w: f64,
}

/// Kendall's coefficient of concordance over `m` rankings (each a full
/// ordering of the same items, best first): W = 12 S / (m^2 (n^3 - n)) with
/// S the squared deviation of rank sums from their mean. 1 means identical
/// rankings, 0 means no agreement.
pub fn kendalls_w(rankings: &[Vec<u64>]) -> Result<ConsistencyReport, MetricsError> {
    let m = rankings.len();
    if m < 2 {
        return Err(MetricsError::TooFewRankings { got: m });
    }
    let n = rankings[0].len();
    if n < 2 {
        return Err(MetricsError::TooFewItems { got: n });
    }
    let reference: BTreeSet<u64> = rankings[0].iter().copied().collect();
    if reference.len() != n {
        let mut seen = BTreeSet::new();
        let dup = rankings[0]
            .iter()
            .find(|&&item| !seen.insert(item))
            .expect("duplicate exists");
        return Err(MetricsError::DuplicateItem { item: *dup });
    }

    let mut rank_sums: BTreeMap<u64, f64> = reference.iter().map(|&item| (item, 0.0)).collect();
    for ranking in rankings {
        if ranking.len() != n {
            return Err(MetricsError::MismatchedItems);
        }
        let mut seen = BTreeSet::new();
        for (pos, &item) in ranking.iter().enumerate() {
            if !seen.insert(item) {
                return Err(MetricsError::DuplicateItem { item });
            }
            let sum = rank_sums
                .get_mut(&item)
                .ok_or(MetricsError::MismatchedItems)?;
            *sum += (pos + 1) as f64;
        }
    }

    let mean_rank_sum = m as f64 * (n as f64 + 1.0) / 2.0;
    let s: f64 = rank_sums
        .values()
        .map(|&r| (r - mean_rank_sum) * (r - mean_rank_sum))
        .sum();
    let denom = (m * m) as f64 * ((n * n * n - n) as f64);
    let w = (12.0 * s / denom).clamp(0.0, 1.0);
    Ok(ConsistencyReport {
        n_rankings: m,
        n_items: n,
        kendalls_w: w,
    })
}

/// Trajectory ids best-first; exact score ties break toward the lower id so
/// rankings never carry ties.
pub fn ranking_from_scores(scores: &[TrajScore]) -> Vec<u64> {
    let mut ranked: Vec<&TrajScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.traj_id.cmp(&b.traj_id)));
    ranked.iter().map(|s| s.traj_id).collect()
}

/// Mean and standard error (sample standard deviation over sqrt n); a single
/// value has standard error 0.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "mean of an empty slice");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt() / (n as f64).sqrt())
}
