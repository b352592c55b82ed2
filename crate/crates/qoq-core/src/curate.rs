//! Budget resolution and top-N selection: whole trajectories (the method of
//! record) or individual steps (the coverage ablation), and materializing a
//! selection back into a dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, Label, Trajectory};
use crate::score::{StepScore, TrajScore, UNSCORED_SENTINEL};

#[derive(Debug, thiserror::Error)]
pub enum CurateError {
    #[error("budget resolves to {requested} but must be between 1 and {available}")]
    BadBudget { requested: usize, available: usize },
    #[error("budget {budget} exceeds the {scoreable} scoreable trajectories")]
    BudgetExceedsScoreable { budget: usize, scoreable: usize },
    #[error("step budget {budget} exceeds the {scored} scored steps")]
    BudgetExceedsScored { budget: usize, scored: usize },
    #[error("no score for trajectory {traj_id}")]
    MissingScore { traj_id: u64 },
    #[error("score references trajectory {traj_id} which is not in the dataset")]
    UnknownTrajectory { traj_id: u64 },
    #[error("trajectory {traj_id} is scored more than once")]
    DuplicateScore { traj_id: u64 },
    #[error("step ({traj_id}, {step_idx}) is scored more than once")]
    DuplicateStepScore { traj_id: u64, step_idx: u32 },
    #[error("step index {step_idx} is out of range for trajectory {traj_id}")]
    StepOutOfRange { traj_id: u64, step_idx: u32 },
    #[error("selection was made against dataset {expected} but this dataset hashes to {got}")]
    StaleReference { expected: String, got: String },
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
    #[error("bad curation result: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// How many trajectories (or steps) to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    Fixed(usize),
    /// Budget equals the number of success-labeled trajectories, the rule
    /// used when the true success count is known.
    MatchSuccessCount,
    /// Budget equals half the dataset, the fallback when it is not.
    HalfDataset,
}

impl BudgetPolicy {
    /// Resolves to a trajectory count in [1, |ds|].
    pub fn resolve(self, ds: &Dataset) -> Result<usize, CurateError> {
        let available = ds.trajectories.len();
        let requested = match self {
            BudgetPolicy::Fixed(n) => n,
            BudgetPolicy::MatchSuccessCount => ds
                .trajectories
                .iter()
                .filter(|t| t.label == Label::Success)
                .count(),
            BudgetPolicy::HalfDataset => available / 2,
        };
        if requested == 0 || requested > available {
            return Err(CurateError::BadBudget {
                requested,
                available,
            });
        }
        Ok(requested)
    }

    /// Resolves to a step count in [1, total steps]: fixed counts steps,
    /// match counts steps in success trajectories, half counts half of all
    /// steps.
    pub fn resolve_steps(self, ds: &Dataset) -> Result<usize, CurateError> {
        let available = ds.total_steps();
        let requested = match self {
            BudgetPolicy::Fixed(n) => n,
            BudgetPolicy::MatchSuccessCount => ds
                .trajectories
                .iter()
                .filter(|t| t.label == Label::Success)
                .map(|t| t.steps.len())
                .sum(),
            BudgetPolicy::HalfDataset => available / 2,
        };
        if requested == 0 || requested > available {
            return Err(CurateError::BadBudget {
                requested,
                available,
            });
        }
        Ok(requested)
    }
}

impl std::str::FromStr for BudgetPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(n) = s.strip_prefix("fixed:") {
            let n: usize = n
                .parse()
                .map_err(|_| format!("bad fixed budget '{n}', expected fixed:N"))?;
            return Ok(BudgetPolicy::Fixed(n));
        }
        match s {
            "match-success" => Ok(BudgetPolicy::MatchSuccessCount),
            "half" => Ok(BudgetPolicy::HalfDataset),
            other => Err(format!(
                "unknown budget '{other}', expected fixed:N, match-success, or half"
            )),
        }
    }
}

/// Selection granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionLevel {
    Trajectory,
    Step,
}

impl std::str::FromStr for SelectionLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traj" | "trajectory" => Ok(SelectionLevel::Trajectory),
            "step" => Ok(SelectionLevel::Step),
            other => Err(format!("unknown level '{other}', expected traj or step")),
        }
    }
}

/// What was selected, in rank order (best first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    Trajectories { ids: Vec<u64> },
    Steps { pairs: Vec<(u64, u32)> },
}

impl Selection {
    pub fn len(&self) -> usize {
        match self {
            Selection::Trajectories { ids } => ids.len(),
            Selection::Steps { pairs } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn level(&self) -> SelectionLevel {
        match self {
            Selection::Trajectories { .. } => SelectionLevel::Trajectory,
            Selection::Steps { .. } => SelectionLevel::Step,
        }
    }

    /// Distinct trajectories touched by the selection, ascending.
    pub fn distinct_traj_ids(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = match self {
            Selection::Trajectories { ids } => ids.iter().copied().collect(),
            Selection::Steps { pairs } => pairs.iter().map(|&(id, _)| id).collect(),
        };
        set.into_iter().collect()
    }

    /// Trajectories the selection covers in full, ascending. A step selection
    /// covers a trajectory only when every one of its steps was selected;
    /// trajectory selections cover each selected trajectory by definition.
    pub fn complete_traj_ids(&self, ds: &Dataset) -> Vec<u64> {
        match self {
            Selection::Trajectories { ids } => {
                let set: BTreeSet<u64> = ids.iter().copied().collect();
                set.into_iter().collect()
            }
            Selection::Steps { pairs } => {
                let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
                for &(id, _) in pairs {
                    *counts.entry(id).or_default() += 1;
                }
                counts
                    .into_iter()
                    .filter(|&(id, n)| {
                        ds.trajectories
                            .iter()
                            .find(|t| t.id == id)
                            .is_some_and(|t| t.steps.len() == n)
                    })
                    .map(|(id, _)| id)
                    .collect()
            }
        }
    }
}

/// A curation decision: the selection, the resolved budget, the hash of the
/// dataset it refers to, and any budget-boundary ties that were broken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationResult {
    pub selection: Selection,
    pub resolved_budget: usize,
    pub dataset_hash: String,
    pub tie_log: Vec<String>,
}

impl CurationResult {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut body = serde_json::to_vec_pretty(self).expect("curation result serializes");
        body.push(b'\n');
        body
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CurateError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_bytes()).map_err(|source| CurateError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CurateError> {
        let path = path.as_ref();
        let body = std::fs::read(path).map_err(|source| CurateError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_slice(&body)?)
    }
}

/// Hex content hash of a dataset, as recorded in curation results.
pub fn dataset_hash_hex(ds: &Dataset) -> Result<String, CurateError> {
    Ok(hex::encode(ds.content_hash()?))
}

/// Keeps the `budget` highest-scoring trajectories. Sentinel-scored
/// trajectories are never eligible; ties break toward the lower id.
pub fn select_top_trajectories(
    scores: &[TrajScore],
    budget: BudgetPolicy,
    ds: &Dataset,
) -> Result<CurationResult, CurateError> {
    let ds_ids: BTreeSet<u64> = ds.trajectories.iter().map(|t| t.id).collect();
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    for s in scores {
        if !ds_ids.contains(&s.traj_id) {
            return Err(CurateError::UnknownTrajectory { traj_id: s.traj_id });
        }
        if !seen.insert(s.traj_id) {
            return Err(CurateError::DuplicateScore { traj_id: s.traj_id });
        }
    }
    if let Some(&missing) = ds_ids.difference(&seen).next() {
        return Err(CurateError::MissingScore { traj_id: missing });
    }

    let n = budget.resolve(ds)?;
    let mut scoreable: Vec<&TrajScore> = scores
        .iter()
        .filter(|s| s.score != UNSCORED_SENTINEL)
        .collect();
    if n > scoreable.len() {
        return Err(CurateError::BudgetExceedsScoreable {
            budget: n,
            scoreable: scoreable.len(),
        });
    }
    scoreable.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.traj_id.cmp(&b.traj_id)));

    let mut tie_log = Vec::new();
    if n < scoreable.len() {
        let boundary = scoreable[n - 1].score;
        if scoreable[n].score == boundary {
            let kept: Vec<u64> = scoreable[..n]
                .iter()
                .filter(|s| s.score == boundary)
                .map(|s| s.traj_id)
                .collect();
            let dropped: Vec<u64> = scoreable[n..]
                .iter()
                .filter(|s| s.score == boundary)
                .map(|s| s.traj_id)
                .collect();
            tie_log.push(format!(
                "budget boundary tie at score {boundary}: kept trajectories {kept:?}, excluded {dropped:?} (lower id wins)"
            ));
        }
    }

    Ok(CurationResult {
        selection: Selection::Trajectories {
            ids: scoreable[..n].iter().map(|s| s.traj_id).collect(),
        },
        resolved_budget: n,
        dataset_hash: dataset_hash_hex(ds)?,
        tie_log,
    })
}

/// Keeps the `n_steps` highest-scoring individual steps. Ties break toward
/// the lower (traj_id, step_idx).
pub fn select_top_steps(
    steps: &[StepScore],
    n_steps: usize,
    ds: &Dataset,
) -> Result<CurationResult, CurateError> {
    let lengths: BTreeMap<u64, usize> = ds
        .trajectories
        .iter()
        .map(|t| (t.id, t.steps.len()))
        .collect();
    let mut seen: BTreeSet<(u64, u32)> = BTreeSet::new();
    for s in steps {
        let len = *lengths
            .get(&s.traj_id)
            .ok_or(CurateError::UnknownTrajectory { traj_id: s.traj_id })?;
        if s.step_idx as usize >= len {
            return Err(CurateError::StepOutOfRange {
                traj_id: s.traj_id,
                step_idx: s.step_idx,
            });
        }
        if !seen.insert((s.traj_id, s.step_idx)) {
            return Err(CurateError::DuplicateStepScore {
                traj_id: s.traj_id,
                step_idx: s.step_idx,
            });
        }
    }
    if n_steps == 0 {
        return Err(CurateError::BadBudget {
            requested: 0,
            available: steps.len(),
        });
    }
    if n_steps > steps.len() {
        return Err(CurateError::BudgetExceedsScored {
            budget: n_steps,
            scored: steps.len(),
        });
    }

    let mut ranked: Vec<&StepScore> = steps.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.traj_id.cmp(&b.traj_id))
            .then(a.step_idx.cmp(&b.step_idx))
    });

    let mut tie_log = Vec::new();
    if n_steps < ranked.len() {
        let boundary = ranked[n_steps - 1].score;
        if ranked[n_steps].score == boundary {
            let kept: Vec<(u64, u32)> = ranked[..n_steps]
                .iter()
                .filter(|s| s.score == boundary)
                .map(|s| (s.traj_id, s.step_idx))
                .collect();
            let dropped: Vec<(u64, u32)> = ranked[n_steps..]
                .iter()
                .filter(|s| s.score == boundary)
                .map(|s| (s.traj_id, s.step_idx))
                .collect();
            tie_log.push(format!(
                "budget boundary tie at score {boundary}: kept steps {kept:?}, excluded {dropped:?} (lower id, then lower index, wins)"
            ));
        }
    }

    Ok(CurationResult {
        selection: Selection::Steps {
            pairs: ranked[..n_steps]
                .iter()
                .map(|s| (s.traj_id, s.step_idx))
                .collect(),
        },
        resolved_budget: n_steps,
        dataset_hash: dataset_hash_hex(ds)?,
        tie_log,
    })
}

/// Renders sorted step indices as compact runs, e.g. `0-3,7,9-10`.
fn index_runs(indices: &[u32]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < indices.len() {
        let start = indices[i];
        let mut end = start;
        while i + 1 < indices.len() && indices[i + 1] == end + 1 {
            i += 1;
            end = indices[i];
        }
        if start == end {
            parts.push(start.to_string());
        } else {
            parts.push(format!("{start}-{end}"));
        }
        i += 1;
    }
    parts.join(",")
}

/// Extracts the selected trajectories (or step-grouped fragments) from `ds`
/// as a new dataset, ids and labels preserved, in ascending id order.
/// Step-mode fragments record their source indices under the
/// `fragment_steps` meta key.
pub fn materialize(result: &CurationResult, ds: &Dataset) -> Result<Dataset, CurateError> {
    let got = dataset_hash_hex(ds)?;
    if result.dataset_hash != got {
        return Err(CurateError::StaleReference {
            expected: result.dataset_hash.clone(),
            got,
        });
    }
    let by_id: BTreeMap<u64, &Trajectory> =
        ds.trajectories.iter().map(|t| (t.id, t)).collect();
    let trajectories = match &result.selection {
        Selection::Trajectories { ids } => {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted
                .iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .map(|t| (*t).clone())
                        .ok_or(CurateError::UnknownTrajectory { traj_id: *id })
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        Selection::Steps { pairs } => {
            let mut grouped: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
            for &(traj_id, step_idx) in pairs {
                grouped.entry(traj_id).or_default().push(step_idx);
            }
            let mut out = Vec::with_capacity(grouped.len());
            for (traj_id, mut indices) in grouped {
                indices.sort_unstable();
                let source = by_id
                    .get(&traj_id)
                    .ok_or(CurateError::UnknownTrajectory { traj_id })?;
                let mut steps = Vec::with_capacity(indices.len());
                for &idx in &indices {
                    let step = source.steps.get(idx as usize).ok_or(
                        CurateError::StepOutOfRange {
                            traj_id,
                            step_idx: idx,
                        },
                    )?;
                    steps.push(step.clone());
                }
                let mut meta = source.meta.clone();
                meta.insert("fragment_steps".to_owned(), index_runs(&indices));
                out.push(Trajectory {
                    id: traj_id,
                    label: source.label,
                    meta,
                    steps,
                });
            }
            out
        }
    };
    let curated = Dataset::from_trajectories(ds.d_s, ds.d_a, trajectories);
    curated.validate()?;
    Ok(curated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Step;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labeled_dataset(n_success: usize, n_fail: usize, steps_per: usize) -> Dataset {
        let step = Step {
            state: vec![0.5; 7],
            action: vec![0.01; 3],
        };
        let trajectories = (0..n_success + n_fail)
            .map(|i| Trajectory {
                id: i as u64,
                label: if i < n_success {
                    Label::Success
                } else {
                    Label::Failure
                },
                meta: Default::default(),
                steps: vec![step.clone(); steps_per],
            })
            .collect();
        Dataset::from_trajectories(7, 3, trajectories)
    }

    fn scores_for(pairs: &[(u64, f64)]) -> Vec<TrajScore> {
        pairs
            .iter()
            .map(|&(traj_id, score)| TrajScore {
                traj_id,
                score,
                n_steps_scored: 1,
            })
            .collect()
    }

    #[test]
    fn top_two_of_three() {
        let ds = labeled_dataset(3, 0, 2);
        let scores = scores_for(&[(0, 0.9), (1, 0.5), (2, 0.1)]);
        let result = select_top_trajectories(&scores, BudgetPolicy::Fixed(2), &ds).unwrap();
        assert_eq!(
            result.selection,
            Selection::Trajectories { ids: vec![0, 1] }
        );
        assert_eq!(result.resolved_budget, 2);
        assert!(result.tie_log.is_empty());
    }

    #[test]
    fn boundary_tie_prefers_lower_id_and_is_logged() {
        let ds = labeled_dataset(2, 0, 2);
        let scores = scores_for(&[(1, 0.9), (0, 0.9)]);
        let result = select_top_trajectories(&scores, BudgetPolicy::Fixed(1), &ds).unwrap();
        assert_eq!(result.selection, Selection::Trajectories { ids: vec![0] });
        assert_eq!(result.tie_log.len(), 1);
        assert!(result.tie_log[0].contains("0"));
        assert!(result.tie_log[0].contains("1"));
    }

    #[test]
    fn budget_policies_resolve_against_labels() {
        let ds = labeled_dataset(60, 40, 3);
        assert_eq!(BudgetPolicy::MatchSuccessCount.resolve(&ds).unwrap(), 60);
        assert_eq!(BudgetPolicy::HalfDataset.resolve(&ds).unwrap(), 50);
        assert_eq!(BudgetPolicy::Fixed(7).resolve(&ds).unwrap(), 7);
        assert!(matches!(
            BudgetPolicy::Fixed(101).resolve(&ds),
            Err(CurateError::BadBudget {
                requested: 101,
                available: 100
            })
        ));
        assert!(matches!(
            BudgetPolicy::Fixed(0).resolve(&ds),
            Err(CurateError::BadBudget { .. })
        ));
        let unlucky = labeled_dataset(0, 4, 1);
        assert!(matches!(
            BudgetPolicy::MatchSuccessCount.resolve(&unlucky),
            Err(CurateError::BadBudget { requested: 0, .. })
        ));

        assert_eq!(BudgetPolicy::MatchSuccessCount.resolve_steps(&ds).unwrap(), 180);
        assert_eq!(BudgetPolicy::HalfDataset.resolve_steps(&ds).unwrap(), 150);
        assert!(matches!(
            BudgetPolicy::Fixed(301).resolve_steps(&ds),
            Err(CurateError::BadBudget { .. })
        ));
    }

    #[test]
    fn budget_parses_from_flags() {
        assert_eq!("fixed:12".parse::<BudgetPolicy>(), Ok(BudgetPolicy::Fixed(12)));
        assert_eq!(
            "match-success".parse::<BudgetPolicy>(),
            Ok(BudgetPolicy::MatchSuccessCount)
        );
        assert_eq!("half".parse::<BudgetPolicy>(), Ok(BudgetPolicy::HalfDataset));
        assert!("fixed:x".parse::<BudgetPolicy>().is_err());
        assert!("best".parse::<BudgetPolicy>().is_err());
        assert_eq!("traj".parse::<SelectionLevel>(), Ok(SelectionLevel::Trajectory));
        assert_eq!("step".parse::<SelectionLevel>(), Ok(SelectionLevel::Step));
        assert!("both".parse::<SelectionLevel>().is_err());
    }

    #[test]
    fn sentinel_trajectories_are_never_selected() {
        let ds = labeled_dataset(3, 0, 2);
        let scores = scores_for(&[(0, f64::NEG_INFINITY), (1, -0.9), (2, -0.99)]);
        let result = select_top_trajectories(&scores, BudgetPolicy::Fixed(2), &ds).unwrap();
        assert_eq!(
            result.selection,
            Selection::Trajectories { ids: vec![1, 2] }
        );
        assert!(matches!(
            select_top_trajectories(&scores, BudgetPolicy::Fixed(3), &ds),
            Err(CurateError::BudgetExceedsScoreable {
                budget: 3,
                scoreable: 2
            })
        ));
    }

    #[test]
    fn coverage_preconditions_are_enforced() {
        let ds = labeled_dataset(2, 0, 2);
        let missing = scores_for(&[(0, 0.5)]);
        assert!(matches!(
            select_top_trajectories(&missing, BudgetPolicy::Fixed(1), &ds),
            Err(CurateError::MissingScore { traj_id: 1 })
        ));
        let unknown = scores_for(&[(0, 0.5), (1, 0.4), (9, 0.3)]);
        assert!(matches!(
            select_top_trajectories(&unknown, BudgetPolicy::Fixed(1), &ds),
            Err(CurateError::UnknownTrajectory { traj_id: 9 })
        ));
        let duplicated = scores_for(&[(0, 0.5), (1, 0.4), (0, 0.3)]);
        assert!(matches!(
            select_top_trajectories(&duplicated, BudgetPolicy::Fixed(1), &ds),
            Err(CurateError::DuplicateScore { traj_id: 0 })
        ));
    }

    #[test]
    fn selection_is_deterministic_scale_invariant_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = labeled_dataset(20, 0, 2);
        for _ in 0..30 {
            let mut scores: Vec<TrajScore> = (0..20)
                .map(|id| TrajScore {
                    traj_id: id,
                    score: rng.random_range(-1.0..1.0),
                    n_steps_scored: 2,
                })
                .collect();
            let picked = select_top_trajectories(&scores, BudgetPolicy::Fixed(8), &ds).unwrap();

            scores.shuffle(&mut rng);
            let shuffled = select_top_trajectories(&scores, BudgetPolicy::Fixed(8), &ds).unwrap();
            assert_eq!(shuffled, picked);

            let scaled: Vec<TrajScore> = scores
                .iter()
                .map(|s| TrajScore {
                    score: s.score * 7.5,
                    ..*s
                })
                .collect();
            let scaled_pick =
                select_top_trajectories(&scaled, BudgetPolicy::Fixed(8), &ds).unwrap();
            assert_eq!(scaled_pick.selection, picked.selection);

            let Selection::Trajectories { ids } = &picked.selection else {
                unreachable!()
            };
            let keep = ids[rng.random_range(0..ids.len())];
            let raised: Vec<TrajScore> = scores
                .iter()
                .map(|s| TrajScore {
                    score: if s.traj_id == keep { s.score + 0.5 } else { s.score },
                    ..*s
                })
                .collect();
            let raised_pick =
                select_top_trajectories(&raised, BudgetPolicy::Fixed(8), &ds).unwrap();
            let Selection::Trajectories { ids: raised_ids } = &raised_pick.selection else {
                unreachable!()
            };
            assert!(raised_ids.contains(&keep));
        }
    }

    fn step_scores_for(ds: &Dataset, rng: &mut ChaCha8Rng) -> Vec<StepScore> {
        let mut out = Vec::new();
        for t in &ds.trajectories {
            for i in 0..t.steps.len() {
                out.push(StepScore {
                    traj_id: t.id,
                    step_idx: i as u32,
                    score: rng.random_range(-1.0..1.0),
                });
            }
        }
        out
    }

    #[test]
    fn step_selection_takes_everything_at_full_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = labeled_dataset(3, 1, 4);
        let steps = step_scores_for(&ds, &mut rng);
        let result = select_top_steps(&steps, steps.len(), &ds).unwrap();
        assert_eq!(result.selection.len(), 16);
        let Selection::Steps { pairs } = &result.selection else {
            unreachable!()
        };
        let mut all: Vec<(u64, u32)> = steps.iter().map(|s| (s.traj_id, s.step_idx)).collect();
        let mut got = pairs.clone();
        all.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, all);
    }

    #[test]
    fn complete_coverage_requires_every_step() {
        let ds = labeled_dataset(2, 1, 3);
        // Trajectory 0 in full, trajectory 1 missing one step, none of 2.
        let sel = Selection::Steps {
            pairs: vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 2)],
        };
        assert_eq!(sel.complete_traj_ids(&ds), vec![0]);
        assert_eq!(sel.distinct_traj_ids(), vec![0, 1]);

        let whole = Selection::Trajectories { ids: vec![2, 1] };
        assert_eq!(whole.complete_traj_ids(&ds), vec![1, 2]);
    }

    #[test]
    fn step_selection_is_order_insensitive_and_tie_breaks_by_index() {
        let ds = labeled_dataset(2, 0, 3);
        let mut steps = vec![
            StepScore { traj_id: 1, step_idx: 2, score: 0.7 },
            StepScore { traj_id: 0, step_idx: 1, score: 0.7 },
            StepScore { traj_id: 0, step_idx: 0, score: 0.7 },
            StepScore { traj_id: 1, step_idx: 0, score: 0.2 },
        ];
        let picked = select_top_steps(&steps, 2, &ds).unwrap();
        assert_eq!(
            picked.selection,
            Selection::Steps {
                pairs: vec![(0, 0), (0, 1)]
            }
        );
        assert_eq!(picked.tie_log.len(), 1);
        steps.reverse();
        assert_eq!(select_top_steps(&steps, 2, &ds).unwrap(), picked);
    }

    #[test]
    fn step_selection_validates_references_and_budget() {
        let ds = labeled_dataset(2, 0, 2);
        let steps = vec![StepScore { traj_id: 0, step_idx: 0, score: 0.5 }];
        assert!(matches!(
            select_top_steps(&steps, 2, &ds),
            Err(CurateError::BudgetExceedsScored { budget: 2, scored: 1 })
        ));
        assert!(matches!(
            select_top_steps(&steps, 0, &ds),
            Err(CurateError::BadBudget { requested: 0, .. })
        ));
        let out_of_range = vec![StepScore { traj_id: 0, step_idx: 5, score: 0.5 }];
        assert!(matches!(
            select_top_steps(&out_of_range, 1, &ds),
            Err(CurateError::StepOutOfRange { traj_id: 0, step_idx: 5 })
        ));
        let unknown = vec![StepScore { traj_id: 9, step_idx: 0, score: 0.5 }];
        assert!(matches!(
            select_top_steps(&unknown, 1, &ds),
            Err(CurateError::UnknownTrajectory { traj_id: 9 })
        ));
        let dup = vec![
            StepScore { traj_id: 0, step_idx: 0, score: 0.5 },
            StepScore { traj_id: 0, step_idx: 0, score: 0.4 },
        ];
        assert!(matches!(
            select_top_steps(&dup, 1, &ds),
            Err(CurateError::DuplicateStepScore { traj_id: 0, step_idx: 0 })
        ));
    }

    #[test]
    fn materialize_select_all_preserves_content() {
        let ds = labeled_dataset(4, 2, 3);
        let scores = scores_for(&[(0, 0.6), (1, 0.5), (2, 0.4), (3, 0.3), (4, 0.2), (5, 0.1)]);
        let result = select_top_trajectories(&scores, BudgetPolicy::Fixed(6), &ds).unwrap();
        let curated = materialize(&result, &ds).unwrap();
        assert_eq!(curated, ds);
    }

    #[test]
    fn materialize_preserves_labels_on_random_selections() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ds = labeled_dataset(6, 6, 2);
        for _ in 0..20 {
            let scores: Vec<TrajScore> = (0..12)
                .map(|id| TrajScore {
                    traj_id: id,
                    score: rng.random_range(-1.0..1.0),
                    n_steps_scored: 2,
                })
                .collect();
            let result = select_top_trajectories(&scores, BudgetPolicy::Fixed(5), &ds).unwrap();
            let curated = materialize(&result, &ds).unwrap();
            assert_eq!(curated.trajectories.len(), result.resolved_budget);
            for traj in &curated.trajectories {
                assert_eq!(traj.label, ds.trajectory(traj.id).unwrap().label);
                assert_eq!(traj.steps, ds.trajectory(traj.id).unwrap().steps);
            }
        }
    }

    #[test]
    fn materialize_rejects_stale_references() {
        let ds = labeled_dataset(3, 0, 2);
        let scores = scores_for(&[(0, 0.9), (1, 0.5), (2, 0.1)]);
        let result = select_top_trajectories(&scores, BudgetPolicy::Fixed(2), &ds).unwrap();
        let other = labeled_dataset(3, 1, 2);
        assert!(matches!(
            materialize(&result, &other),
            Err(CurateError::StaleReference { .. })
        ));
    }

    #[test]
    fn materialized_fragments_group_steps_with_meta() {
        let ds = labeled_dataset(1, 1, 6);
        let picks = vec![
            StepScore { traj_id: 0, step_idx: 0, score: 0.9 },
            StepScore { traj_id: 0, step_idx: 1, score: 0.8 },
            StepScore { traj_id: 0, step_idx: 2, score: 0.7 },
            StepScore { traj_id: 0, step_idx: 5, score: 0.6 },
            StepScore { traj_id: 1, step_idx: 3, score: 0.5 },
            StepScore { traj_id: 1, step_idx: 1, score: 0.05 },
        ];
        let result = select_top_steps(&picks, 5, &ds).unwrap();
        let curated = materialize(&result, &ds).unwrap();
        assert_eq!(curated.trajectories.len(), 2);
        assert_eq!(curated.total_steps(), 5);
        let frag0 = &curated.trajectories[0];
        assert_eq!(frag0.id, 0);
        assert_eq!(frag0.label, Label::Success);
        assert_eq!(frag0.meta.get("fragment_steps").unwrap(), "0-2,5");
        assert_eq!(frag0.steps.len(), 4);
        let frag1 = &curated.trajectories[1];
        assert_eq!(frag1.meta.get("fragment_steps").unwrap(), "3");
        assert_eq!(frag1.label, Label::Failure);
    }

    #[test]
    fn index_runs_render_compactly() {
        assert_eq!(index_runs(&[0, 1, 2, 3, 7, 9, 10]), "0-3,7,9-10");
        assert_eq!(index_runs(&[4]), "4");
        assert_eq!(index_runs(&[]), "");
    }

    #[test]
    fn curation_result_json_round_trips() {
        let ds = labeled_dataset(3, 0, 2);
        let scores = scores_for(&[(0, 0.9), (1, 0.9), (2, 0.1)]);
        let result = select_top_trajectories(&scores, BudgetPolicy::Fixed(1), &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curation.json");
        result.save(&path).unwrap();
        assert_eq!(CurationResult::load(&path).unwrap(), result);
        let bytes = std::fs::read(&path).unwrap();
        result.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
}
