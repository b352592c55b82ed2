//! Behavior cloning: minimize the mean negative log-likelihood of dataset
//! actions with Adam.
//!
//! Training is deterministic per (seed, dataset content): parameter init,
//! per-epoch shuffling, batch boundaries, and gradient accumulation order are
//! all fixed, so identical inputs produce bit-identical policies.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::policy::{init_params, MlpPolicy, PolicyArch, PolicyError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset has no steps")]
    EmptyDataset,
    #[error("dataset dims ({ds_s}, {ds_a}) do not match architecture ({arch_s}, {arch_a})")]
    DimMismatch {
        ds_s: usize,
        ds_a: usize,
        arch_s: usize,
        arch_a: usize,
    },
    #[error("loss became non-finite in epoch {epoch}")]
    NanLoss { epoch: usize },
    #[error("training loss did not decrease: first epoch {first}, last epoch {last}")]
    LossIncreased { first: f64, last: f64 },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub optimizer_steps: u64,
    pub wall_clock_seconds: f64,
}

/// Adam with bias-corrected step size, operating on flat parameter vectors.
#[derive(Debug, Clone)]
pub(crate) struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let alpha = self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= alpha * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}

/// All (state, action) pairs in canonical order: trajectory id ascending,
/// step index ascending.
pub(crate) fn canonical_pairs(ds: &Dataset) -> Vec<(&[f64], &[f64])> {
    let mut order: Vec<usize> = (0..ds.trajectories.len()).collect();
    order.sort_by_key(|&i| ds.trajectories[i].id);
    let mut pairs = Vec::with_capacity(ds.total_steps());
    for i in order {
        for step in &ds.trajectories[i].steps {
            pairs.push((step.state.as_slice(), step.action.as_slice()));
        }
    }
    pairs
}

fn check_dims(ds: &Dataset, arch: &PolicyArch) -> Result<(), TrainError> {
    if ds.d_s != arch.d_s || ds.d_a != arch.d_a {
        return Err(TrainError::DimMismatch {
            ds_s: ds.d_s,
            ds_a: ds.d_a,
            arch_s: arch.d_s,
            arch_a: arch.d_a,
        });
    }
    Ok(())
}

/// Trains a fresh policy on the dataset by behavior cloning. Aborts with an
/// error if the loss becomes non-finite, and rejects runs whose final epoch
/// loss is not below the first (multi-epoch runs only).
pub fn train_bc(
    ds: &Dataset,
    arch: &PolicyArch,
    cfg: &TrainConfig,
) -> Result<(MlpPolicy, TrainReport), TrainError> {
    ds.validate()?;
    check_dims(ds, arch)?;
    let pairs = canonical_pairs(ds);
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let n = pairs.len();
    let batch_size = cfg.batch_size.max(1);
    let mut policy = init_params(arch, cfg.seed);
    let mut flat = policy.flatten();
    let mut adam = AdamState::new(flat.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    // Stream 1 keeps the shuffle RNG disjoint from the init RNG, which used
    // the default stream of the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut indices: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; flat.len()];
    let mut sample_grad = vec![0.0; flat.len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let log_std_start = flat.len() - arch.d_a;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            indices.shuffle(&mut rng);
        }
        let mut epoch_loss_sum = 0.0;
        for batch in indices.chunks(batch_size) {
            policy.set_flat(&flat);
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (s, a) = pairs[idx];
                let lp = policy.log_prob_and_grad(s, a, &mut sample_grad)?;
                batch_loss += -lp;
                for (g, sg) in grad.iter_mut().zip(&sample_grad) {
                    *g -= sg;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::NanLoss { epoch });
            }
            for g in grad.iter_mut() {
                *g *= scale;
            }
            adam.step(&mut flat, &grad);
            for v in flat[log_std_start..].iter_mut() {
                *v = v.clamp(crate::policy::LOG_STD_MIN, crate::policy::LOG_STD_MAX);
            }
            epoch_loss_sum += batch_loss;
        }
        epoch_losses.push(epoch_loss_sum / n as f64);
    }
    policy.set_flat(&flat);

    if cfg.epochs >= 2 {
        let (first, last) = (epoch_losses[0], epoch_losses[cfg.epochs - 1]);
        if !(last < first) {
            return Err(TrainError::LossIncreased { first, last });
        }
    }
    Ok((
        policy,
        TrainReport {
            epoch_losses,
            optimizer_steps: adam.steps(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Mean negative log-likelihood over all steps in canonical order.
pub fn bc_loss(policy: &MlpPolicy, ds: &Dataset) -> Result<f64, TrainError> {
    ds.validate()?;
    check_dims(ds, policy.arch())?;
    let pairs = canonical_pairs(ds);
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for (s, a) in &pairs {
        sum += -policy.log_prob(s, a)?;
    }
    Ok(sum / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{LOG_STD_MAX, LOG_STD_MIN};
    use crate::sim::{generate_dataset, DemoMode};
    use approx::assert_relative_eq;

    fn small_setup() -> (Dataset, PolicyArch) {
        let ds = generate_dataset(4, 0, &[DemoMode::GraspMiss], 0).unwrap();
        let arch = PolicyArch::new(7, 3, vec![16]);
        (ds, arch)
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let (ds, arch) = small_setup();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 1,
            ..TrainConfig::default()
        };
        let (policy1, report1) = train_bc(&ds, &arch, &cfg).unwrap();
        assert!(report1.epoch_losses.last().unwrap() < &report1.epoch_losses[0]);
        let init = init_params(&arch, cfg.seed);
        assert!(bc_loss(&policy1, &ds).unwrap() < bc_loss(&init, &ds).unwrap());

        let (policy2, report2) = train_bc(&ds, &arch, &cfg).unwrap();
        let bits1: Vec<u64> = policy1.flatten().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = policy2.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
        assert_eq!(report1.epoch_losses, report2.epoch_losses);

        let (policy3, _) = train_bc(
            &ds,
            &arch,
            &TrainConfig {
                seed: 2,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(policy3.flatten(), policy1.flatten());
    }

    #[test]
    fn one_epoch_full_batch_is_one_step() {
        let (ds, arch) = small_setup();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: ds.total_steps(),
            seed: 0,
            ..TrainConfig::default()
        };
        let (policy, report) = train_bc(&ds, &arch, &cfg).unwrap();
        assert_eq!(report.optimizer_steps, 1);
        assert_eq!(report.epoch_losses.len(), 1);
        assert_ne!(policy.flatten(), init_params(&arch, 0).flatten());
    }

    #[test]
    fn optimizer_step_count_matches_batching() {
        let (ds, arch) = small_setup();
        let n = ds.total_steps();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 10,
            seed: 0,
            ..TrainConfig::default()
        };
        let (_, report) = train_bc(&ds, &arch, &cfg).unwrap();
        assert_eq!(report.optimizer_steps, 3 * n.div_ceil(10) as u64);
    }

    #[test]
    fn log_std_stays_clamped() {
        let (ds, arch) = small_setup();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 0.05,
            seed: 3,
            ..TrainConfig::default()
        };
        let (policy, _) = train_bc(&ds, &arch, &cfg).unwrap();
        assert!(policy
            .log_std()
            .iter()
            .all(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(v)));
    }

    #[test]
    fn exploding_lr_reports_nan_loss() {
        let (ds, arch) = small_setup();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e308,
            seed: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_bc(&ds, &arch, &cfg),
            Err(TrainError::NanLoss { .. })
        ));
    }

    #[test]
    fn bc_loss_of_standard_gaussian_at_mean() {
        let arch = PolicyArch::new(2, 3, vec![4]);
        let mut policy = init_params(&arch, 0);
        let mut flat = policy.flatten();
        let n = flat.len();
        for v in flat[n - 3..].iter_mut() {
            *v = 0.0;
        }
        policy.set_flat(&flat);
        let s = vec![0.25, -0.5];
        let mu = policy.mean(&s).unwrap();
        let ds = Dataset {
            d_s: 2,
            d_a: 3,
            trajectories: vec![crate::data::Trajectory {
                id: 0,
                label: crate::data::Label::Unlabeled,
                meta: Default::default(),
                steps: vec![crate::data::Step {
                    state: s,
                    action: mu,
                }],
            }],
        };
        assert_relative_eq!(
            bc_loss(&policy, &ds).unwrap(),
            2.756815599614018,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (ds, _) = small_setup();
        let arch = PolicyArch::new(5, 3, vec![8]);
        assert!(matches!(
            train_bc(&ds, &arch, &TrainConfig::default()),
            Err(TrainError::DimMismatch { .. })
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = Dataset::new(7, 3);
        let arch = PolicyArch::new(7, 3, vec![8]);
        assert!(matches!(
            train_bc(&ds, &arch, &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn loss_is_insensitive_to_trajectory_file_order() {
        let (ds, arch) = small_setup();
        let policy = init_params(&arch, 9);
        let mut reversed = ds.clone();
        reversed.trajectories.reverse();
        assert_eq!(
            bc_loss(&policy, &ds).unwrap().to_bits(),
            bc_loss(&policy, &reversed).unwrap().to_bits()
        );
    }
}
