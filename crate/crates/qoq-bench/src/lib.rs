//! Shared fixtures for the pipeline benchmarks: an untrained policy at the
//! full architecture and a small planted dataset. Kernel costs (gradients,
//! sketches, dot products, environment stepping) do not depend on whether
//! the weights were trained.

use qoq_core::policy::{init_params, MlpPolicy, PolicyArch};
use qoq_core::sim::{generate_dataset, DemoMode};
use qoq_core::Dataset;

pub fn bench_arch() -> PolicyArch {
    PolicyArch::new(7, 3, vec![64, 64]).with_task_relative_input()
}

pub fn bench_policy() -> MlpPolicy {
    init_params(&bench_arch(), 0)
}

pub fn bench_dataset() -> Dataset {
    generate_dataset(10, 5, &[DemoMode::GraspMiss, DemoMode::WrongGoal], 0)
        .expect("fixture dataset generates")
}

pub fn bench_validation() -> Dataset {
    generate_dataset(3, 0, &[], 1).expect("fixture dataset generates")
}
