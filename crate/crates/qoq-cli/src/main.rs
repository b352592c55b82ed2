//! `qoq`: one subcommand per pipeline stage, plus the end-to-end experiment
//! runner. Every subcommand is a thin wrapper over the library: parse flags,
//! call in, read and write files. Failures print a single line
//! `ERROR(<stage>): <message>` to stderr and exit 1; usage errors exit 2.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qoq_core::baselines::{
    merge_for_autoencoder, random_select, retrieval_select, train_autoencoder,
};
use qoq_core::curate::{
    materialize, select_top_steps, select_top_trajectories, BudgetPolicy, CurationResult,
    SelectionLevel,
};
use qoq_core::data::{load_dataset, write_dataset, Label};
use qoq_core::experiment::{run_experiment, ExperimentConfig, ExperimentError};
use qoq_core::grad::{build_grad_cache, GradCache, OporpConfig};
use qoq_core::metrics::{curation_accuracy, kendalls_w, ranking_from_scores};
use qoq_core::policy::{LayerMask, MlpPolicy, PolicyArch};
use qoq_core::score::{
    aggregate_trajectories, read_traj_csv, rollout_weighted_scores, sniff_table, step_scores,
    write_sidecar, write_step_csv, write_traj_csv, ScoreMeta, ScoreMode, TableKind, Weighting,
};
use qoq_core::sim::{evaluate_policy, generate_dataset, rollout_dataset, DemoMode};
use qoq_core::train::{train_bc, TrainConfig};

#[derive(Parser)]
#[command(
    name = "qoq",
    version,
    about = "Influence-based trajectory curation for imitation learning",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for gradient caching, scoring, and experiment seeds.
    /// Defaults to 1 (0 = all cores); `experiment` defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted dataset of expert and failure demonstrations.
    GenData(GenDataArgs),
    /// Train a behavior-cloning policy and save a checkpoint.
    Train(TrainArgs),
    /// Extract per-step policy gradients into a sketched cache.
    Grads(GradsArgs),
    /// Score training steps against a validation gradient cache.
    Score(ScoreArgs),
    /// Select the top trajectories or steps under a budget.
    Curate(CurateArgs),
    /// Roll a policy out into a dataset.
    Rollout(RolloutArgs),
    /// Run a selection baseline.
    Baseline(BaselineArgs),
    /// Evaluate curation accuracy, policy success, or ranking consistency.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run the multi-seed end-to-end experiment from a config file.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n_success: usize,
    #[arg(long)]
    n_fail: usize,
    /// Comma-separated: expert, grasp_miss, wrong_goal, noisy.
    #[arg(long, value_delimiter = ',', default_value = "grasp_miss,wrong_goal")]
    fail_modes: Vec<DemoMode>,
    #[arg(long, env = "QOQ_SEED")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, env = "QOQ_SEED")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradsArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Parameter block to differentiate: trunk, head, or all.
    #[arg(long, default_value = "all")]
    layers: LayerMask,
    #[arg(long, default_value_t = 1024)]
    sketch_dim: usize,
    #[arg(long, default_value_t = 7)]
    oporp_seed: u64,
    /// Keep raw sketches instead of renormalizing them to unit length.
    #[arg(long)]
    no_renormalize: bool,
    /// Keep only trajectories with this label (for splitting labeled
    /// rollouts into success and failure caches).
    #[arg(long, value_enum)]
    only: Option<LabelFilter>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelFilter {
    Success,
    Failure,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct ScoreArgs {
    #[command(subcommand)]
    rollout: Option<ScoreSub>,

    #[arg(long, required = true)]
    train_grads: Option<PathBuf>,
    #[arg(long, required = true)]
    val_grads: Option<PathBuf>,
    /// Aggregation over validation steps: max, mean, or sum.
    #[arg(long, default_value = "max")]
    mode: ScoreMode,
    #[arg(long, required = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ScoreSub {
    /// Combine success and failure rollout caches into weighted trajectory
    /// scores.
    Rollout(ScoreRolloutArgs),
}

#[derive(Args)]
struct ScoreRolloutArgs {
    #[arg(long)]
    train_grads: PathBuf,
    /// Gradient cache of successful rollouts.
    #[arg(long)]
    pos: PathBuf,
    /// Gradient cache of failed rollouts.
    #[arg(long)]
    neg: PathBuf,
    /// Weight sides by steps or by trajectories.
    #[arg(long, default_value = "steps")]
    weighting: Weighting,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurateArgs {
    /// Score table (step or trajectory CSV).
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// fixed:N, match-success, or half.
    #[arg(long)]
    budget: BudgetPolicy,
    /// Selection granularity: traj or step.
    #[arg(long, default_value = "traj")]
    level: SelectionLevel,
    #[arg(long)]
    out: PathBuf,
    /// Also write the curated dataset to this path.
    #[arg(long)]
    materialize: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    episodes: usize,
    #[arg(long, env = "QOQ_SEED")]
    seed: u64,
    /// Label each episode success/failure by its outcome.
    #[arg(long)]
    label_by_outcome: bool,
    /// Use the deterministic mean action instead of sampling.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Random,
    Retrieval,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: BaselineMethod,
    #[arg(long)]
    data: PathBuf,
    /// fixed:N, match-success, or half.
    #[arg(long)]
    budget: BudgetPolicy,
    /// Selection granularity for retrieval: traj or step.
    #[arg(long, default_value = "traj")]
    level: SelectionLevel,
    #[arg(long, env = "QOQ_SEED")]
    seed: u64,
    /// Validation dataset (retrieval only).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Autoencoder training epochs (retrieval only).
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Curation accuracy of a selection against the dataset's planted labels.
    Accuracy(EvalAccuracyArgs),
    /// Task success rate of a policy checkpoint.
    Success(EvalSuccessArgs),
    /// Kendall's W agreement among trajectory score tables.
    Consistency(EvalConsistencyArgs),
}

#[derive(Args)]
struct EvalAccuracyArgs {
    /// Curation result JSON.
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Method name recorded in the report.
    #[arg(long, default_value = "curated")]
    method: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSuccessArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, env = "QOQ_SEED")]
    seed: u64,
}

#[derive(Args)]
struct EvalConsistencyArgs {
    /// Trajectory score CSVs, one per ranking; repeat the flag (at least 2).
    #[arg(long = "scores", required = true, num_args = 1..)]
    scores: Vec<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json.
    #[arg(long)]
    out: PathBuf,
    /// Seed-level parallelism; defaults to all cores.
    #[arg(long)]
    parallelism: Option<usize>,
}

/// A pipeline failure: which stage, and a one-line message.
struct CliError {
    stage: String,
    message: String,
}

fn err(stage: &str, e: impl Display) -> CliError {
    CliError {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        let stage = match &e {
            ExperimentError::Stage { stage, .. } => stage,
            _ => "experiment",
        };
        err(stage, &e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    // Single-threaded unless opted in; the experiment fan-out defaults to
    // all cores. num_threads(0) is rayon's own default.
    let threads = match (&cli.command, cli.workers) {
        (_, Some(n)) => n,
        (Command::Experiment(args), None) => args.parallelism.unwrap_or(0),
        (_, None) => 1,
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        eprintln!("ERROR(setup): {e}");
        return ExitCode::from(1);
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let one_line = e.message.replace('\n', " ");
            eprintln!("ERROR({}): {}", e.stage, one_line);
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Grads(args) => grads(args),
        Command::Score(args) => score(args),
        Command::Curate(args) => curate(args),
        Command::Rollout(args) => rollout(args),
        Command::Baseline(args) => baseline(args),
        Command::Eval(cmd) => eval(cmd),
        Command::Experiment(args) => experiment(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let stage = "gen-data";
    let ds = generate_dataset(args.n_success, args.n_fail, &args.fail_modes, args.seed)
        .map_err(|e| err(stage, e))?;
    write_dataset(&ds, &args.out).map_err(|e| err(stage, e))?;
    println!(
        "wrote {} trajectories ({} steps) to {}",
        ds.trajectories.len(),
        ds.total_steps(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let stage = "train";
    let ds = load_dataset(&args.data).map_err(|e| err(stage, e))?;
    let mut arch = PolicyArch::new(ds.d_s, ds.d_a, args.hidden.clone());
    if ds.d_s == qoq_core::sim::STATE_DIM && ds.d_a == qoq_core::sim::ACTION_DIM {
        // Datasets with the pick-and-place state layout get the policy's
        // task-relative input features.
        arch = arch.with_task_relative_input();
    }
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let (policy, report) = train_bc(&ds, &arch, &cfg).map_err(|e| err(stage, e))?;

    let mut meta = BTreeMap::new();
    meta.insert(
        "dataset_hash".to_string(),
        hex::encode(ds.content_hash().map_err(|e| err(stage, e))?),
    );
    meta.insert("epochs".to_string(), args.epochs.to_string());
    meta.insert(
        "final_loss".to_string(),
        report
            .epoch_losses
            .last()
            .map(|l| l.to_string())
            .unwrap_or_default(),
    );
    policy
        .save(&args.out, args.seed, &meta)
        .map_err(|e| err(stage, e))?;
    println!(
        "trained {} params in {:.1}s, final loss {:.6}, checkpoint {} -> {}",
        policy.param_count(),
        report.wall_clock_seconds,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        &hex::encode(policy.params_hash())[..12],
        args.out.display()
    );
    Ok(())
}

fn grads(args: GradsArgs) -> Result<(), CliError> {
    let stage = "grads";
    let (policy, _) = MlpPolicy::load(&args.policy).map_err(|e| err(stage, e))?;
    let mut ds = load_dataset(&args.data).map_err(|e| err(stage, e))?;
    if let Some(filter) = args.only {
        let wanted = match filter {
            LabelFilter::Success => Label::Success,
            LabelFilter::Failure => Label::Failure,
        };
        ds.trajectories.retain(|t| t.label == wanted);
    }
    let input_dim = args
        .layers
        .param_count(policy.arch())
        .map_err(|e| err(stage, e))?;
    let oporp = OporpConfig {
        input_dim,
        sketch_dim: args.sketch_dim,
        seed: args.oporp_seed,
    };
    let cache = build_grad_cache(&policy, &ds, args.layers, &oporp, !args.no_renormalize)
        .map_err(|e| err(stage, e))?;
    cache.write(&args.out).map_err(|e| err(stage, e))?;
    println!(
        "cached {} step gradients (K={}, mask={}, {} skipped) to {}",
        cache.step_count(),
        cache.k,
        cache.mask.name(),
        cache.skipped.len(),
        args.out.display()
    );
    Ok(())
}

fn score(args: ScoreArgs) -> Result<(), CliError> {
    let stage = "score";
    if let Some(ScoreSub::Rollout(sub)) = args.rollout {
        let train = GradCache::read(&sub.train_grads).map_err(|e| err(stage, e))?;
        let pos = GradCache::read(&sub.pos).map_err(|e| err(stage, e))?;
        let neg = GradCache::read(&sub.neg).map_err(|e| err(stage, e))?;
        let trajs = rollout_weighted_scores(&train, &pos, &neg, sub.weighting)
            .map_err(|e| err(stage, e))?;
        write_traj_csv(&trajs, &sub.out).map_err(|e| err(stage, e))?;
        let meta = ScoreMeta::for_rollout(sub.weighting, &train, &pos, &neg);
        write_sidecar(&meta, &sub.out).map_err(|e| err(stage, e))?;
        println!(
            "scored {} trajectories ({} success / {} failure rollout steps) to {}",
            trajs.len(),
            pos.step_count(),
            neg.step_count(),
            sub.out.display()
        );
        return Ok(());
    }

    // Flags are required by clap whenever the subcommand is absent.
    let (train_grads, val_grads, out) = (
        args.train_grads.expect("required"),
        args.val_grads.expect("required"),
        args.out.expect("required"),
    );
    let train = GradCache::read(&train_grads).map_err(|e| err(stage, e))?;
    let val = GradCache::read(&val_grads).map_err(|e| err(stage, e))?;
    let steps = step_scores(&train, &val, args.mode).map_err(|e| err(stage, e))?;
    write_step_csv(&steps, &out).map_err(|e| err(stage, e))?;
    let meta = ScoreMeta::for_plain(args.mode, &train, &val);
    write_sidecar(&meta, &out).map_err(|e| err(stage, e))?;
    println!(
        "scored {} steps against {} validation steps ({}) to {}",
        steps.len(),
        val.step_count(),
        args.mode.name(),
        out.display()
    );
    Ok(())
}

fn curate(args: CurateArgs) -> Result<(), CliError> {
    let stage = "curate";
    let ds = load_dataset(&args.data).map_err(|e| err(stage, e))?;
    let kind = sniff_table(&args.scores).map_err(|e| err(stage, e))?;

    let result = match (args.level, kind) {
        (SelectionLevel::Trajectory, TableKind::Trajectories) => {
            let trajs = read_traj_csv(&args.scores).map_err(|e| err(stage, e))?;
            select_top_trajectories(&trajs, args.budget, &ds).map_err(|e| err(stage, e))?
        }
        (SelectionLevel::Trajectory, TableKind::Steps) => {
            let steps = qoq_core::score::read_step_csv(&args.scores).map_err(|e| err(stage, e))?;
            let trajs = aggregate_trajectories(&steps, &ds).map_err(|e| err(stage, e))?;
            select_top_trajectories(&trajs, args.budget, &ds).map_err(|e| err(stage, e))?
        }
        (SelectionLevel::Step, TableKind::Steps) => {
            let steps = qoq_core::score::read_step_csv(&args.scores).map_err(|e| err(stage, e))?;
            let n = args.budget.resolve_steps(&ds).map_err(|e| err(stage, e))?;
            select_top_steps(&steps, n, &ds).map_err(|e| err(stage, e))?
        }
        (SelectionLevel::Step, TableKind::Trajectories) => {
            return Err(err(
                stage,
                "step-level curation needs a step score table, got a trajectory table",
            ));
        }
    };

    result.save(&args.out).map_err(|e| err(stage, e))?;
    for line in &result.tie_log {
        eprintln!("note: {line}");
    }
    println!(
        "selected {} of {} at budget {} -> {}",
        result.selection.len(),
        match result.selection.level() {
            SelectionLevel::Trajectory => ds.trajectories.len(),
            SelectionLevel::Step => ds.total_steps(),
        },
        result.resolved_budget,
        args.out.display()
    );

    if let Some(path) = args.materialize {
        let curated = materialize(&result, &ds).map_err(|e| err(stage, e))?;
        write_dataset(&curated, &path).map_err(|e| err(stage, e))?;
        println!(
            "materialized {} trajectories ({} steps) -> {}",
            curated.trajectories.len(),
            curated.total_steps(),
            path.display()
        );
    }
    Ok(())
}

fn rollout(args: RolloutArgs) -> Result<(), CliError> {
    let stage = "rollout";
    let (policy, _) = MlpPolicy::load(&args.policy).map_err(|e| err(stage, e))?;
    let ds = rollout_dataset(
        &policy,
        args.episodes,
        args.seed,
        !args.deterministic,
        args.label_by_outcome,
    )
    .map_err(|e| err(stage, e))?;
    write_dataset(&ds, &args.out).map_err(|e| err(stage, e))?;
    let successes = ds
        .trajectories
        .iter()
        .filter(|t| t.label == Label::Success)
        .count();
    println!(
        "rolled out {} episodes ({} successes) to {}",
        ds.trajectories.len(),
        successes,
        args.out.display()
    );
    Ok(())
}

fn baseline(args: BaselineArgs) -> Result<(), CliError> {
    let stage = "baseline";
    let ds = load_dataset(&args.data).map_err(|e| err(stage, e))?;
    let result = match args.method {
        BaselineMethod::Random => {
            if args.level != SelectionLevel::Trajectory {
                return Err(err(stage, "the random baseline selects whole trajectories"));
            }
            let n = args.budget.resolve(&ds).map_err(|e| err(stage, e))?;
            random_select(&ds, n, args.seed).map_err(|e| err(stage, e))?
        }
        BaselineMethod::Retrieval => {
            let val_path = args
                .val
                .ok_or_else(|| err(stage, "retrieval needs --val <dataset>"))?;
            let val = load_dataset(&val_path).map_err(|e| err(stage, e))?;
            let merged = merge_for_autoencoder(&ds, &val);
            let cfg = TrainConfig {
                epochs: args.epochs,
                batch_size: args.batch,
                lr: args.lr,
                seed: args.seed,
                ..TrainConfig::default()
            };
            let (ae, _) = train_autoencoder(&merged, &cfg).map_err(|e| err(stage, e))?;
            retrieval_select(&ds, &val, &ae, args.budget, args.level)
                .map_err(|e| err(stage, e))?
        }
    };
    result.save(&args.out).map_err(|e| err(stage, e))?;
    println!(
        "selected {} at budget {} -> {}",
        result.selection.len(),
        result.resolved_budget,
        args.out.display()
    );
    Ok(())
}

fn eval(cmd: EvalCmd) -> Result<(), CliError> {
    let stage = "eval";
    match cmd {
        EvalCmd::Accuracy(args) => {
            let result = CurationResult::load(&args.selection).map_err(|e| err(stage, e))?;
            let ds = load_dataset(&args.data).map_err(|e| err(stage, e))?;
            let report =
                curation_accuracy(&result, &ds, &args.method).map_err(|e| err(stage, e))?;
            let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
            json.push(b'\n');
            match args.out {
                Some(path) => {
                    std::fs::write(&path, json).map_err(|e| err(stage, e))?;
                    println!(
                        "accuracy {:.4} -> {}",
                        report.success_fraction,
                        path.display()
                    );
                }
                None => print!("{}", String::from_utf8(json).expect("valid utf-8")),
            }
        }
        EvalCmd::Success(args) => {
            let (policy, _) = MlpPolicy::load(&args.policy).map_err(|e| err(stage, e))?;
            let rate =
                evaluate_policy(&policy, args.episodes, args.seed).map_err(|e| err(stage, e))?;
            println!(
                "{{\"success_rate\":{rate},\"episodes\":{},\"seed\":{}}}",
                args.episodes, args.seed
            );
        }
        EvalCmd::Consistency(args) => {
            if args.scores.len() < 2 {
                return Err(err(stage, "consistency needs at least 2 score tables"));
            }
            let mut rankings = Vec::with_capacity(args.scores.len());
            for path in &args.scores {
                if sniff_table(path).map_err(|e| err(stage, e))? != TableKind::Trajectories {
                    return Err(err(
                        stage,
                        format!(
                            "{} is not a trajectory score table; aggregate steps first",
                            path.display()
                        ),
                    ));
                }
                let trajs = read_traj_csv(path).map_err(|e| err(stage, e))?;
                rankings.push(ranking_from_scores(&trajs));
            }
            let report = kendalls_w(&rankings).map_err(|e| err(stage, e))?;
            let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
            json.push(b'\n');
            print!("{}", String::from_utf8(json).expect("valid utf-8"));
        }
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<(), CliError> {
    let stage = "experiment";
    let cfg = ExperimentConfig::load(&args.config)?;
    std::fs::create_dir_all(&args.out).map_err(|e| err(stage, e))?;
    let report = run_experiment(&cfg)?;
    let path = args.out.join("report.json");
    report.save(&path)?;

    println!("{} seeds -> {}", report.seeds.len(), path.display());
    for (arm, summary) in &report.summary {
        let success = match summary.mean_success_rate {
            Some(rate) => format!("{rate:.3}"),
            None => "-".to_string(),
        };
        println!(
            "  {arm:22} accuracy {:.4} +- {:.4}  success {success}",
            summary.mean_accuracy, summary.stderr_accuracy
        );
    }
    for outcome in &report.seeds {
        for note in &outcome.notes {
            eprintln!("note: {note}");
        }
    }
    Ok(())
}
