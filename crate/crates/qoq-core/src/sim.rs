//! PointBin: a deterministic 2-D pick-and-place environment on the unit
//! square, plus scripted demonstrators and policy evaluation.
//!
//! The 7-dim state is [gripper_x, gripper_y, holding, object_x, object_y,
//! goal_x, goal_y]; the 3-dim action is [dx, dy, grip] with the deltas
//! clamped to ±0.05 and grip in [0, 1] (threshold 0.5). Closing the grip
//! within `EPS_GRASP` of the object picks it up; while held, the object
//! follows the gripper; opening the grip drops it in place. An episode
//! succeeds when the object rests within `EPS_GOAL` of the goal with the
//! grip open.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Step, Trajectory};
use crate::policy::{MlpPolicy, PolicyError};

pub const STATE_DIM: usize = 7;
pub const ACTION_DIM: usize = 3;
pub const EPS_GRASP: f64 = 0.03;
pub const EPS_GOAL: f64 = 0.05;
pub const ACTION_CLAMP: f64 = 0.05;
pub const GRIP_THRESHOLD: f64 = 0.5;
pub const MAX_STEPS: usize = 200;

/// Controllers release (and scripted failures "attempt" actions) once within
/// this distance of their current waypoint.
const ARRIVE_EPS: f64 = 0.01;
const RELEASE_EPS: f64 = 0.03;
/// Approaching controllers start closing the grip inside this distance of
/// their grasp target, well before the grasp can latch. The early close puts
/// a fat shell of closing-grip states into every demonstration instead of a
/// single razor-thin transition step.
const CLOSE_RADIUS: f64 = 0.3;
/// Expert and noisy demos end with an epilogue: the gripper withdraws to the
/// `PARK_POINT` corner with the grip open and parks there. Episodes record at
/// least `RETREAT_MIN_STEPS` of epilogue and keep recording until they reach
/// `MIN_DEMO_STEPS` total, so demonstrations land in the 40-120 step band
/// without the epilogue drowning out the task phases, and without stay-put
/// states next to the object, which would blur the grasp. The withdrawal
/// target is the same fixed corner in every demo, which keeps the epilogue a
/// pure function of the state (a per-demo target would be unpredictable from
/// the state alone) and lets epilogue behavior line up across demos.
const MIN_DEMO_STEPS: usize = 60;
const RETREAT_MIN_STEPS: usize = 6;
const PARK_POINT: [f64; 2] = [0.0, 0.0];
const NOISE_HALF_WIDTH: f64 = 0.04;
const MISS_OFFSET: f64 = 0.08;
const DISTRACTOR_MIN_DIST: f64 = 0.2;
const GRASP_DWELL_STEPS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("action contains a non-finite value")]
    NonFiniteAction,
    #[error("state vector has length {got}, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("state is not a valid PointBin state: {0}")]
    BadState(String),
    #[error("policy has dims ({d_s}, {d_a}), environment needs ({STATE_DIM}, {ACTION_DIM})")]
    PolicyDims { d_s: usize, d_a: usize },
    #[error("dataset has dims ({d_s}, {d_a}), expected ({STATE_DIM}, {ACTION_DIM})")]
    DatasetDims { d_s: usize, d_a: usize },
    #[error("n_fail > 0 requires at least one failure mode")]
    EmptyFailModes,
    #[error("expert is not a failure mode")]
    ExpertAsFailMode,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointBinState {
    pub gripper: [f64; 2],
    pub holding: bool,
    pub object: [f64; 2],
    pub goal: [f64; 2],
}

impl PointBinState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.gripper[0],
            self.gripper[1],
            if self.holding { 1.0 } else { 0.0 },
            self.object[0],
            self.object[1],
            self.goal[0],
            self.goal[1],
        ]
    }

    pub fn from_vec(v: &[f64]) -> Result<Self, SimError> {
        if v.len() != STATE_DIM {
            return Err(SimError::StateLength {
                expected: STATE_DIM,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SimError::BadState("non-finite component".to_string()));
        }
        if v[2] != 0.0 && v[2] != 1.0 {
            return Err(SimError::BadState(format!("holding flag is {}", v[2])));
        }
        for (i, x) in v.iter().enumerate() {
            if i != 2 && !(0.0..=1.0).contains(x) {
                return Err(SimError::BadState(format!(
                    "coordinate {i} = {x} outside [0, 1]"
                )));
            }
        }
        Ok(PointBinState {
            gripper: [v[0], v[1]],
            holding: v[2] == 1.0,
            object: [v[3], v[4]],
            goal: [v[5], v[6]],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointBinAction {
    pub delta: [f64; 2],
    pub grip: f64,
}

impl PointBinAction {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.delta[0], self.delta[1], self.grip]
    }

    pub fn from_vec(v: &[f64]) -> Result<Self, SimError> {
        if v.len() != ACTION_DIM {
            return Err(SimError::StateLength {
                expected: ACTION_DIM,
                got: v.len(),
            });
        }
        Ok(PointBinAction {
            delta: [v[0], v[1]],
            grip: v[2],
        })
    }

    pub const ZERO: PointBinAction = PointBinAction {
        delta: [0.0, 0.0],
        grip: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps_taken: usize,
    pub final_state: PointBinState,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Success predicate: object within `EPS_GOAL` of the goal with the grip
/// open.
pub fn is_success(state: &PointBinState) -> bool {
    !state.holding && dist(state.object, state.goal) <= EPS_GOAL
}

/// One deterministic transition. Deltas are clamped to ±`ACTION_CLAMP` and
/// grip to [0, 1] before the dynamics apply. A held object follows the
/// gripper while the grip stays closed and is dropped in place when it
/// opens; an open gripper closing within `EPS_GRASP` of the object picks it
/// up.
pub fn env_step(state: &PointBinState, action: &PointBinAction) -> Result<PointBinState, SimError> {
    if !action.delta[0].is_finite() || !action.delta[1].is_finite() || !action.grip.is_finite() {
        return Err(SimError::NonFiniteAction);
    }
    let dx = action.delta[0].clamp(-ACTION_CLAMP, ACTION_CLAMP);
    let dy = action.delta[1].clamp(-ACTION_CLAMP, ACTION_CLAMP);
    let grip_closed = action.grip.clamp(0.0, 1.0) >= GRIP_THRESHOLD;
    let gripper = [clamp01(state.gripper[0] + dx), clamp01(state.gripper[1] + dy)];
    let (holding, object) = if state.holding {
        if grip_closed {
            (true, gripper)
        } else {
            (false, state.object)
        }
    } else if grip_closed && dist(gripper, state.object) <= EPS_GRASP {
        (true, gripper)
    } else {
        (false, state.object)
    };
    Ok(PointBinState {
        gripper,
        holding,
        object,
        goal: state.goal,
    })
}

fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.0..1.0)
}

/// Minimum start separation between gripper and object, and between object
/// and goal. Keeps both task legs several steps long, so episodes spend most
/// of their budget on reach/transport rather than the parked epilogue.
const START_SEPARATION: f64 = 0.35;

fn sample_start_from(rng: &mut ChaCha8Rng) -> PointBinState {
    loop {
        let gripper = [uniform01(rng), uniform01(rng)];
        let object = [uniform01(rng), uniform01(rng)];
        let goal = [uniform01(rng), uniform01(rng)];
        if dist(object, goal) >= START_SEPARATION && dist(gripper, object) >= START_SEPARATION {
            return PointBinState {
                gripper,
                holding: false,
                object,
                goal,
            };
        }
    }
}

/// Seeded start state: positions uniform on the unit square, rejecting
/// starts whose gripper-object or object-goal distance is below
/// `START_SEPARATION`.
pub fn sample_start(seed: u64) -> PointBinState {
    sample_start_from(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// SplitMix64 finalizer, for deriving per-episode seeds from a base seed.
pub fn mix_seed(base: u64, k: u64) -> u64 {
    let mut z = base ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    [
        (to[0] - from[0]).clamp(-ACTION_CLAMP, ACTION_CLAMP),
        (to[1] - from[1]).clamp(-ACTION_CLAMP, ACTION_CLAMP),
    ]
}

/// Markov expert: proportional control (gain 1.0, clamped) toward the object
/// with the grip open until `CLOSE_RADIUS`, then toward the goal while
/// holding, releasing within `RELEASE_EPS` of the goal. Emits the zero action
/// once the task is done.
pub fn expert_action(state: &PointBinState) -> PointBinAction {
    if state.holding {
        if dist(state.gripper, state.goal) <= RELEASE_EPS {
            return PointBinAction {
                delta: [0.0, 0.0],
                grip: 0.0,
            };
        }
        PointBinAction {
            delta: toward(state.gripper, state.goal),
            grip: 1.0,
        }
    } else {
        if dist(state.object, state.goal) <= EPS_GOAL {
            return PointBinAction::ZERO;
        }
        let grip = if dist(state.gripper, state.object) <= CLOSE_RADIUS {
            1.0
        } else {
            0.0
        };
        PointBinAction {
            delta: toward(state.gripper, state.object),
            grip,
        }
    }
}

/// Post-placement epilogue: proportional withdrawal to `PARK_POINT` with the
/// grip open, parking once there.
fn retreat_action(state: &PointBinState) -> PointBinAction {
    PointBinAction {
        delta: toward(state.gripper, PARK_POINT),
        grip: 0.0,
    }
}

/// Demonstration generators. All failure modes fail by construction on every
/// start the sampler can produce; `Noisy` is labeled by its actual outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoMode {
    Expert,
    GraspMiss,
    WrongGoal,
    Noisy,
}

impl DemoMode {
    pub fn name(self) -> &'static str {
        match self {
            DemoMode::Expert => "expert",
            DemoMode::GraspMiss => "grasp_miss",
            DemoMode::WrongGoal => "wrong_goal",
            DemoMode::Noisy => "noisy",
        }
    }
}

impl std::str::FromStr for DemoMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expert" => Ok(DemoMode::Expert),
            "grasp_miss" => Ok(DemoMode::GraspMiss),
            "wrong_goal" => Ok(DemoMode::WrongGoal),
            "noisy" => Ok(DemoMode::Noisy),
            other => Err(format!("unknown demo mode {other:?}")),
        }
    }
}

enum FailPhase {
    Approach,
    Attempt(usize),
    Transport,
    Release,
    Done,
}

struct Script {
    mode: DemoMode,
    rng: ChaCha8Rng,
    miss_point: [f64; 2],
    distractor: [f64; 2],
    phase: FailPhase,
    retreated: usize,
}

impl Script {
    fn new(mode: DemoMode, start: &PointBinState, rng: ChaCha8Rng) -> Self {
        let mut rng = rng;
        let mut miss_point = [0.0, 0.0];
        let mut distractor = [0.0, 0.0];
        match mode {
            DemoMode::GraspMiss => {
                // A fixed offset from the object, re-drawn until the target
                // sits inside the square with margin: the approach then
                // keeps the gripper at least MISS_OFFSET - ARRIVE_EPS away
                // from the object, so the grasp attempt always misses.
                loop {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let p = [
                        start.object[0] + MISS_OFFSET * angle.cos(),
                        start.object[1] + MISS_OFFSET * angle.sin(),
                    ];
                    if p.iter().all(|c| (0.02..=0.98).contains(c)) {
                        miss_point = p;
                        break;
                    }
                }
            }
            DemoMode::WrongGoal => loop {
                let p = [uniform01(&mut rng), uniform01(&mut rng)];
                if dist(p, start.goal) >= DISTRACTOR_MIN_DIST {
                    distractor = p;
                    break;
                }
            },
            DemoMode::Expert | DemoMode::Noisy => {}
        }
        Script {
            mode,
            rng,
            miss_point,
            distractor,
            phase: FailPhase::Approach,
            retreated: 0,
        }
    }

    fn task_action(&mut self, state: &PointBinState) -> PointBinAction {
        if is_success(state) {
            self.retreated += 1;
            retreat_action(state)
        } else {
            expert_action(state)
        }
    }

    fn act(&mut self, state: &PointBinState) -> PointBinAction {
        match self.mode {
            DemoMode::Expert => self.task_action(state),
            DemoMode::Noisy => {
                let mut a = self.task_action(state);
                a.delta[0] += self.rng.random_range(-NOISE_HALF_WIDTH..NOISE_HALF_WIDTH);
                a.delta[1] += self.rng.random_range(-NOISE_HALF_WIDTH..NOISE_HALF_WIDTH);
                a.grip += self.rng.random_range(-NOISE_HALF_WIDTH..NOISE_HALF_WIDTH);
                a
            }
            DemoMode::GraspMiss => match self.phase {
                FailPhase::Approach => {
                    if dist(state.gripper, self.miss_point) <= ARRIVE_EPS {
                        self.phase = FailPhase::Attempt(0);
                        return self.act(state);
                    }
                    PointBinAction {
                        delta: toward(state.gripper, self.miss_point),
                        grip: 0.0,
                    }
                }
                FailPhase::Attempt(n) => {
                    // Close the grip next to, but not on, the object.
                    self.phase = if n + 1 < GRASP_DWELL_STEPS {
                        FailPhase::Attempt(n + 1)
                    } else {
                        FailPhase::Transport
                    };
                    PointBinAction {
                        delta: [0.0, 0.0],
                        grip: 1.0,
                    }
                }
                FailPhase::Transport => {
                    if dist(state.gripper, state.goal) <= RELEASE_EPS {
                        self.phase = FailPhase::Release;
                        return self.act(state);
                    }
                    // Carries on to the goal empty-handed, grip open so the
                    // missed object can never be picked up in passing.
                    PointBinAction {
                        delta: toward(state.gripper, state.goal),
                        grip: 0.0,
                    }
                }
                FailPhase::Release => {
                    self.phase = FailPhase::Done;
                    PointBinAction::ZERO
                }
                FailPhase::Done => PointBinAction::ZERO,
            },
            DemoMode::WrongGoal => match self.phase {
                FailPhase::Approach => {
                    if state.holding {
                        self.phase = FailPhase::Transport;
                        return self.act(state);
                    }
                    // Same open-then-close approach the expert uses; the
                    // grasp itself is clean, only the destination is wrong.
                    let grip = if dist(state.gripper, state.object) <= CLOSE_RADIUS {
                        1.0
                    } else {
                        0.0
                    };
                    PointBinAction {
                        delta: toward(state.gripper, state.object),
                        grip,
                    }
                }
                FailPhase::Attempt(_) => unreachable!("wrong_goal has no attempt phase"),
                FailPhase::Transport => {
                    if dist(state.gripper, self.distractor) <= RELEASE_EPS {
                        self.phase = FailPhase::Release;
                        return self.act(state);
                    }
                    PointBinAction {
                        delta: toward(state.gripper, self.distractor),
                        grip: 1.0,
                    }
                }
                FailPhase::Release => {
                    self.phase = FailPhase::Done;
                    PointBinAction {
                        delta: [0.0, 0.0],
                        grip: 0.0,
                    }
                }
                FailPhase::Done => PointBinAction::ZERO,
            },
        }
    }

    fn done(&self, state: &PointBinState, recorded: usize) -> bool {
        match self.mode {
            DemoMode::Expert | DemoMode::Noisy => {
                is_success(state)
                    && self.retreated >= RETREAT_MIN_STEPS
                    && recorded >= MIN_DEMO_STEPS
            }
            DemoMode::GraspMiss | DemoMode::WrongGoal => matches!(self.phase, FailPhase::Done),
        }
    }
}

fn run<A>(
    start: PointBinState,
    max_steps: usize,
    mut act: A,
    mut stop: impl FnMut(&PointBinState) -> bool,
) -> Result<(Vec<Step>, EpisodeOutcome), SimError>
where
    A: FnMut(&PointBinState) -> PointBinAction,
{
    let mut state = start;
    let mut steps = Vec::new();
    for _ in 0..max_steps {
        if stop(&state) {
            break;
        }
        let action = act(&state);
        steps.push(Step {
            state: state.to_vec(),
            action: action.to_vec(),
        });
        state = env_step(&state, &action)?;
    }
    let outcome = EpisodeOutcome {
        success: is_success(&state),
        steps_taken: steps.len(),
        final_state: state,
    };
    Ok((steps, outcome))
}

/// One scripted demonstration. The trajectory id is left at 0 for the caller
/// to assign; the label records the actual outcome, not the requested mode.
pub fn scripted_demo(mode: DemoMode, seed: u64, max_steps: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = sample_start_from(&mut rng);
    let mut script = Script::new(mode, &start, rng);
    let mut state = start;
    let mut steps = Vec::new();
    for _ in 0..max_steps {
        // The stop check runs before each action; scripts emit at least one
        // step so the trajectory is never empty.
        if !steps.is_empty() && script.done(&state, steps.len()) {
            break;
        }
        let action = script.act(&state);
        steps.push(Step {
            state: state.to_vec(),
            action: action.to_vec(),
        });
        state = env_step(&state, &action).expect("scripted actions are finite");
    }
    let outcome = EpisodeOutcome {
        success: is_success(&state),
        steps_taken: steps.len(),
        final_state: state,
    };
    let mut meta = BTreeMap::new();
    meta.insert("mode".to_string(), mode.name().to_string());
    meta.insert("seed".to_string(), seed.to_string());
    Trajectory {
        id: 0,
        label: if outcome.success {
            Label::Success
        } else {
            Label::Failure
        },
        meta,
        steps,
    }
}

/// Builds a labeled dataset of `n_success` expert demos followed by `n_fail`
/// failure demos cycling through `fail_modes`, then shuffles the trajectory
/// order. Ids are 0..n-1 assigned before the shuffle; demo i uses seed
/// `seed + i`.
pub fn generate_dataset(
    n_success: usize,
    n_fail: usize,
    fail_modes: &[DemoMode],
    seed: u64,
) -> Result<Dataset, SimError> {
    if n_fail > 0 && fail_modes.is_empty() {
        return Err(SimError::EmptyFailModes);
    }
    if fail_modes.contains(&DemoMode::Expert) {
        return Err(SimError::ExpertAsFailMode);
    }
    let mut ds = Dataset::new(STATE_DIM, ACTION_DIM);
    for i in 0..n_success {
        let mut traj = scripted_demo(DemoMode::Expert, seed.wrapping_add(i as u64), MAX_STEPS);
        traj.id = i as u64;
        ds.trajectories.push(traj);
    }
    for j in 0..n_fail {
        let id = (n_success + j) as u64;
        let mode = fail_modes[j % fail_modes.len()];
        let mut traj = scripted_demo(mode, seed.wrapping_add(id), MAX_STEPS);
        traj.id = id;
        ds.trajectories.push(traj);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    use rand::seq::SliceRandom;
    ds.trajectories.shuffle(&mut rng);
    Ok(ds)
}

fn check_policy_dims(policy: &MlpPolicy) -> Result<(), SimError> {
    let arch = policy.arch();
    if arch.d_s != STATE_DIM || arch.d_a != ACTION_DIM {
        return Err(SimError::PolicyDims {
            d_s: arch.d_s,
            d_a: arch.d_a,
        });
    }
    Ok(())
}

/// Deterministic evaluation: runs `episodes` rollouts with actions at the
/// policy mean and returns the success fraction. Episode e starts from
/// `sample_start(mix_seed(seed, e))`.
pub fn evaluate_policy(policy: &MlpPolicy, episodes: usize, seed: u64) -> Result<f64, SimError> {
    check_policy_dims(policy)?;
    let mut successes = 0usize;
    for e in 0..episodes {
        let start = sample_start(mix_seed(seed, e as u64));
        let (_, outcome) = run(
            start,
            MAX_STEPS,
            |s| {
                let mean = policy.mean(&s.to_vec()).expect("dims checked");
                PointBinAction::from_vec(&mean).expect("dims checked")
            },
            is_success,
        )?;
        if outcome.success {
            successes += 1;
        }
    }
    Ok(successes as f64 / episodes.max(1) as f64)
}

/// Runs the policy for `episodes` rollouts and packages them as a dataset,
/// one trajectory per episode (id = episode index). With `stochastic`,
/// actions are sampled from the policy's Gaussian (seeded); otherwise the
/// mean is used. With `label_by_outcome`, trajectories are labeled
/// success/failure from the episode outcome, else left unlabeled.
pub fn rollout_dataset(
    policy: &MlpPolicy,
    episodes: usize,
    seed: u64,
    stochastic: bool,
    label_by_outcome: bool,
) -> Result<Dataset, SimError> {
    check_policy_dims(policy)?;
    let mut ds = Dataset::new(STATE_DIM, ACTION_DIM);
    for e in 0..episodes {
        let ep_seed = mix_seed(seed, e as u64);
        let start = sample_start(ep_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
        rng.set_stream(1);
        let (steps, outcome) = run(
            start,
            MAX_STEPS,
            |s| {
                let a = if stochastic {
                    policy.sample_action(&s.to_vec(), &mut rng).expect("dims checked")
                } else {
                    policy.mean(&s.to_vec()).expect("dims checked")
                };
                PointBinAction::from_vec(&a).expect("dims checked")
            },
            is_success,
        )?;
        if steps.is_empty() {
            // Start already satisfied the goal (cannot happen with the
            // rejection sampler, but keep the dataset invariant safe).
            continue;
        }
        let mut meta = BTreeMap::new();
        meta.insert("mode".to_string(), "rollout".to_string());
        meta.insert("episode".to_string(), e.to_string());
        ds.trajectories.push(Trajectory {
            id: e as u64,
            label: if label_by_outcome {
                if outcome.success {
                    Label::Success
                } else {
                    Label::Failure
                }
            } else {
                Label::Unlabeled
            },
            meta,
            steps,
        });
    }
    Ok(ds)
}

/// Drops each trajectory's prefix before the first held step (holding flag
/// set), removing the reaching phase that successful and failed behaviors
/// share. Trajectories that never make contact are dropped entirely.
pub fn trim_to_contact(ds: &Dataset) -> Result<Dataset, SimError> {
    if ds.d_s != STATE_DIM || ds.d_a != ACTION_DIM {
        return Err(SimError::DatasetDims {
            d_s: ds.d_s,
            d_a: ds.d_a,
        });
    }
    let mut out = Dataset::new(ds.d_s, ds.d_a);
    for traj in &ds.trajectories {
        if let Some(first) = traj.steps.iter().position(|s| s.state[2] >= 0.5) {
            let mut trimmed = traj.clone();
            trimmed.steps = traj.steps[first..].to_vec();
            trimmed
                .meta
                .insert("trimmed_prefix".to_string(), first.to_string());
            out.trajectories.push(trimmed);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mid_state() -> PointBinState {
        PointBinState {
            gripper: [0.5, 0.5],
            holding: false,
            object: [0.2, 0.8],
            goal: [0.9, 0.1],
        }
    }

    #[test]
    fn env_step_is_deterministic() {
        let s = mid_state();
        let a = PointBinAction {
            delta: [0.03, -0.02],
            grip: 0.7,
        };
        let s1 = env_step(&s, &a).unwrap();
        let s2 = env_step(&s, &a).unwrap();
        assert_eq!(s1.to_vec(), s2.to_vec());
    }

    #[test]
    fn zero_action_is_identity() {
        let s = mid_state();
        let next = env_step(&s, &PointBinAction::ZERO).unwrap();
        assert_eq!(next.to_vec(), s.to_vec());

        let held = PointBinState {
            gripper: [0.4, 0.4],
            holding: true,
            object: [0.4, 0.4],
            goal: [0.9, 0.1],
        };
        let keep = PointBinAction {
            delta: [0.0, 0.0],
            grip: 1.0,
        };
        assert_eq!(env_step(&held, &keep).unwrap().to_vec(), held.to_vec());
    }

    #[test]
    fn deltas_and_grip_are_clamped() {
        let s = mid_state();
        let a = PointBinAction {
            delta: [0.2, -0.3],
            grip: 2.0,
        };
        let next = env_step(&s, &a).unwrap();
        assert_eq!(next.gripper, [0.55, 0.45]);

        let edge = PointBinState {
            gripper: [0.99, 0.01],
            ..mid_state()
        };
        let push = PointBinAction {
            delta: [0.05, -0.05],
            grip: 0.0,
        };
        let next = env_step(&edge, &push).unwrap();
        assert_eq!(next.gripper, [1.0, 0.0]);
    }

    #[test]
    fn non_finite_action_rejected() {
        let s = mid_state();
        let a = PointBinAction {
            delta: [f64::NAN, 0.0],
            grip: 0.0,
        };
        assert!(matches!(env_step(&s, &a), Err(SimError::NonFiniteAction)));
    }

    #[test]
    fn grasp_requires_closed_grip_within_radius() {
        let near = PointBinState {
            gripper: [0.21, 0.8],
            holding: false,
            object: [0.2, 0.8],
            goal: [0.9, 0.1],
        };
        let close = PointBinAction {
            delta: [0.0, 0.0],
            grip: 1.0,
        };
        let next = env_step(&near, &close).unwrap();
        assert!(next.holding);
        assert_eq!(next.object, next.gripper);

        let open = PointBinAction {
            delta: [0.0, 0.0],
            grip: 0.3,
        };
        assert!(!env_step(&near, &open).unwrap().holding);

        let far = PointBinState {
            gripper: [0.3, 0.8],
            ..near
        };
        assert!(!env_step(&far, &close).unwrap().holding);
    }

    #[test]
    fn release_drops_object_in_place() {
        let held = PointBinState {
            gripper: [0.6, 0.6],
            holding: true,
            object: [0.6, 0.6],
            goal: [0.9, 0.1],
        };
        let a = PointBinAction {
            delta: [0.05, 0.0],
            grip: 0.0,
        };
        let next = env_step(&held, &a).unwrap();
        assert!(!next.holding);
        assert_eq!(next.object, [0.6, 0.6]);
        assert_eq!(next.gripper, [0.65, 0.6]);
    }

    #[test]
    fn held_object_follows_gripper_and_bounds_hold() {
        let mut state = PointBinState {
            gripper: [0.5, 0.5],
            holding: true,
            object: [0.5, 0.5],
            goal: [0.9, 0.1],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a = PointBinAction {
                delta: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
                grip: rng.random_range(0.0..1.0),
            };
            state = env_step(&state, &a).unwrap();
            for v in state.to_vec() {
                assert!((0.0..=1.0).contains(&v));
            }
            if state.holding {
                assert_eq!(state.object, state.gripper);
            }
        }
    }

    #[test]
    fn expert_demos_always_succeed_within_step_band() {
        let mut lengths = Vec::new();
        for seed in 0..1000 {
            let traj = scripted_demo(DemoMode::Expert, seed, MAX_STEPS);
            assert_eq!(traj.label, Label::Success, "seed {seed}");
            lengths.push(traj.steps.len());
        }
        let min = *lengths.iter().min().unwrap();
        let max = *lengths.iter().max().unwrap();
        assert!(min >= 40, "shortest expert demo has {min} steps");
        assert!(max <= 120, "longest expert demo has {max} steps");
    }

    #[test]
    fn grasp_miss_demos_always_fail() {
        for seed in 0..1000 {
            let traj = scripted_demo(DemoMode::GraspMiss, seed, MAX_STEPS);
            assert_eq!(traj.label, Label::Failure, "seed {seed}");
        }
    }

    #[test]
    fn wrong_goal_demos_always_fail() {
        for seed in 0..1000 {
            let traj = scripted_demo(DemoMode::WrongGoal, seed, MAX_STEPS);
            assert_eq!(traj.label, Label::Failure, "seed {seed}");
        }
    }

    #[test]
    fn noisy_demos_mostly_succeed_with_some_failures_possible() {
        let mut successes = 0;
        for seed in 0..500 {
            let traj = scripted_demo(DemoMode::Noisy, seed, MAX_STEPS);
            if traj.label == Label::Success {
                successes += 1;
            }
        }
        let fraction = successes as f64 / 500.0;
        assert!(
            fraction >= 0.5,
            "noisy demos should usually succeed, got {fraction}"
        );
    }

    #[test]
    fn replaying_demo_actions_reproduces_states_and_label() {
        for (mode, seed) in [
            (DemoMode::Expert, 11),
            (DemoMode::GraspMiss, 12),
            (DemoMode::WrongGoal, 13),
            (DemoMode::Noisy, 14),
        ] {
            let traj = scripted_demo(mode, seed, MAX_STEPS);
            let mut state = PointBinState::from_vec(&traj.steps[0].state).unwrap();
            for (i, step) in traj.steps.iter().enumerate() {
                assert_eq!(state.to_vec(), step.state, "{mode:?} step {i}");
                let action = PointBinAction::from_vec(&step.action).unwrap();
                state = env_step(&state, &action).unwrap();
            }
            let replayed_label = if is_success(&state) {
                Label::Success
            } else {
                Label::Failure
            };
            assert_eq!(traj.label, replayed_label, "{mode:?}");
        }
    }

    #[test]
    fn generate_dataset_counts_and_determinism() {
        let modes = [DemoMode::GraspMiss, DemoMode::WrongGoal];
        let ds = generate_dataset(12, 8, &modes, 0).unwrap();
        assert_eq!(ds.trajectories.len(), 20);
        ds.validate().unwrap();
        let successes = ds
            .trajectories
            .iter()
            .filter(|t| t.label == Label::Success)
            .count();
        assert_eq!(successes, 12);
        let mut ids = ds.ids();
        ids.sort_unstable();
        assert_eq!(ids, (0..20).collect::<Vec<u64>>());

        let ds2 = generate_dataset(12, 8, &modes, 0).unwrap();
        assert_eq!(ds2, ds);
        let ds3 = generate_dataset(12, 8, &modes, 1).unwrap();
        assert_ne!(ds3, ds);
    }

    #[test]
    fn generate_dataset_cycles_failure_modes() {
        let modes = [DemoMode::GraspMiss, DemoMode::WrongGoal];
        let ds = generate_dataset(2, 4, &modes, 5).unwrap();
        for traj in &ds.trajectories {
            let id = traj.id;
            let mode = traj.meta.get("mode").unwrap();
            if id < 2 {
                assert_eq!(mode, "expert");
            } else {
                let expected = modes[(id as usize - 2) % 2].name();
                assert_eq!(mode, expected, "id {id}");
            }
        }
    }

    #[test]
    fn generate_dataset_rejects_bad_mode_lists() {
        assert!(matches!(
            generate_dataset(1, 1, &[], 0),
            Err(SimError::EmptyFailModes)
        ));
        assert!(matches!(
            generate_dataset(1, 1, &[DemoMode::Expert], 0),
            Err(SimError::ExpertAsFailMode)
        ));
    }

    #[test]
    fn start_sampler_respects_separation() {
        for seed in 0..500 {
            let s = sample_start(seed);
            assert!(dist(s.object, s.goal) >= 2.0 * EPS_GOAL);
            assert!(!s.holding);
            for v in s.to_vec() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn zero_policy_never_succeeds() {
        let arch = crate::policy::PolicyArch::new(STATE_DIM, ACTION_DIM, vec![8]);
        let zero = MlpPolicy::from_flat(&arch, &vec![0.0; arch.param_count()]).unwrap();
        let rate = evaluate_policy(&zero, 100, 7).unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn evaluate_rejects_wrong_dims() {
        let arch = crate::policy::PolicyArch::new(4, 2, vec![8]);
        let policy = crate::policy::init_params(&arch, 0);
        assert!(matches!(
            evaluate_policy(&policy, 5, 0),
            Err(SimError::PolicyDims { .. })
        ));
    }

    #[test]
    fn rollout_dataset_is_labeled_and_deterministic() {
        let arch = crate::policy::PolicyArch::new(STATE_DIM, ACTION_DIM, vec![16]);
        let policy = crate::policy::init_params(&arch, 2);
        let ds1 = rollout_dataset(&policy, 5, 9, true, true).unwrap();
        let ds2 = rollout_dataset(&policy, 5, 9, true, true).unwrap();
        assert_eq!(ds1, ds2);
        ds1.validate().unwrap();
        assert_eq!(ds1.trajectories.len(), 5);
        for traj in &ds1.trajectories {
            assert_ne!(traj.label, Label::Unlabeled);
        }
        let unlabeled = rollout_dataset(&policy, 2, 9, true, false).unwrap();
        assert!(unlabeled
            .trajectories
            .iter()
            .all(|t| t.label == Label::Unlabeled));
    }

    #[test]
    fn trim_to_contact_drops_reaching_prefix() {
        let expert = scripted_demo(DemoMode::Expert, 3, MAX_STEPS);
        let miss = scripted_demo(DemoMode::GraspMiss, 4, MAX_STEPS);
        let ds = Dataset {
            d_s: STATE_DIM,
            d_a: ACTION_DIM,
            trajectories: vec![
                Trajectory {
                    id: 0,
                    ..expert.clone()
                },
                Trajectory { id: 1, ..miss },
            ],
        };
        let trimmed = trim_to_contact(&ds).unwrap();
        // The grasp-miss demo never holds the object, so only the expert
        // trajectory survives, starting at its first held step.
        assert_eq!(trimmed.trajectories.len(), 1);
        let t = &trimmed.trajectories[0];
        assert_eq!(t.id, 0);
        assert!(t.steps[0].state[2] >= 0.5);
        assert!(t.steps.len() < expert.steps.len());
        assert!(expert.steps.iter().any(|s| s.state[2] < 0.5));
    }

    #[test]
    fn mix_seed_separates_indices() {
        assert_ne!(mix_seed(0, 0), mix_seed(0, 1));
        assert_ne!(mix_seed(0, 0), mix_seed(1, 0));
        assert_eq!(mix_seed(42, 7), mix_seed(42, 7));
    }
}
