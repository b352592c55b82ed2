//! Comparison methods: seeded random selection and a latent-similarity
//! retrieval baseline built on a deterministic autoencoder over concatenated
//! (state, action) vectors. Both emit the same `CurationResult` as the main
//! pipeline so evaluation is method-agnostic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::curate::{
    select_top_steps, select_top_trajectories, BudgetPolicy, CurateError, CurationResult,
    Selection, SelectionLevel,
};
use crate::data::{DataError, Dataset};
use crate::policy::Mlp;
use crate::score::{aggregate_trajectories, ScoreError, StepScore};
use crate::train::{canonical_pairs, AdamState, TrainConfig, TrainError, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("autoencoder expects {expected}-dim inputs but dataset steps are {got}-dim")]
    DimMismatch { expected: usize, got: usize },
    #[error("training and validation datasets disagree on dimensions")]
    DatasetDims,
    #[error("validation dataset has no steps")]
    EmptyValidation,
    #[error(transparent)]
    Curate(#[from] CurateError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Uniform trajectory sample without replacement; the control every method
/// must beat.
pub fn random_select(ds: &Dataset, n: usize, seed: u64) -> Result<CurationResult, CurateError> {
    let available = ds.trajectories.len();
    if n == 0 || n > available {
        return Err(CurateError::BadBudget {
            requested: n,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, available, n);
    let mut ids: Vec<u64> = picked.iter().map(|i| ds.trajectories[i].id).collect();
    ids.sort_unstable();
    Ok(CurationResult {
        selection: Selection::Trajectories { ids },
        resolved_budget: n,
        dataset_hash: hex::encode(ds.content_hash()?),
        tie_log: vec![],
    })
}

/// Bottleneck autoencoder over concatenated (state, action) vectors: encoder
/// widths, a narrow latent, mirrored decoder, tanh hidden activations, linear
/// reconstruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoencoderArch {
    pub input_dim: usize,
    pub encoder: Vec<usize>,
    pub latent_dim: usize,
}

impl AutoencoderArch {
    /// The default bottleneck used by the retrieval baseline.
    pub fn new(input_dim: usize) -> Self {
        AutoencoderArch {
            input_dim,
            encoder: vec![32],
            latent_dim: 8,
        }
    }

    /// Layer widths input -> encoder -> latent -> mirrored decoder -> input.
    pub fn widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(2 * self.encoder.len() + 3);
        widths.push(self.input_dim);
        widths.extend(&self.encoder);
        widths.push(self.latent_dim);
        widths.extend(self.encoder.iter().rev());
        widths.push(self.input_dim);
        widths
    }

    /// Number of layers from input to the latent, inclusive.
    fn encoder_layers(&self) -> usize {
        self.encoder.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.widths()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    arch: AutoencoderArch,
    mlp: Mlp,
}

impl Autoencoder {
    pub fn init(arch: AutoencoderArch, seed: u64) -> Self {
        assert!(
            arch.latent_dim < arch.input_dim,
            "latent dim {} must be narrower than input dim {}",
            arch.latent_dim,
            arch.input_dim
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::init(&arch.widths(), &mut rng);
        Autoencoder { arch, mlp }
    }

    pub fn arch(&self) -> &AutoencoderArch {
        &self.arch
    }

    /// Latent embedding: the activations at the bottleneck layer.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let acts = self.mlp.forward_cached(x);
        acts[self.arch.encoder_layers()].clone()
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        self.mlp.forward_cached(x).pop().expect("forward output")
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        self.mlp.flatten_into(&mut out);
        out
    }
}

fn concat_pairs(ds: &Dataset) -> Vec<Vec<f64>> {
    canonical_pairs(ds)
        .into_iter()
        .map(|(s, a)| {
            let mut x = Vec::with_capacity(s.len() + a.len());
            x.extend_from_slice(s);
            x.extend_from_slice(a);
            x
        })
        .collect()
}

/// Trains the bottleneck autoencoder with Adam on mean squared
/// reconstruction error, mirroring the behavior-cloning loop: seeded
/// shuffling, NaN abort, and a loss-decrease check.
pub fn train_autoencoder(
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Autoencoder, TrainReport), TrainError> {
    ds.validate()?;
    if ds.total_steps() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let start = std::time::Instant::now();
    let inputs = concat_pairs(ds);
    let dim = ds.d_s + ds.d_a;
    let n = inputs.len();

    let arch = AutoencoderArch::new(dim);
    let ae = Autoencoder::init(arch.clone(), cfg.seed);
    let mut flat = ae.flatten();
    let mut mlp = ae.mlp.clone();
    let mut adam = AdamState::new(flat.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; flat.len()];
    let mut dout = vec![0.0; dim];
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            mlp.set_flat(&flat);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let x = &inputs[i];
                let acts = mlp.forward_cached(x);
                let recon = acts.last().expect("forward output");
                let mut sample_loss = 0.0;
                for j in 0..dim {
                    let diff = recon[j] - x[j];
                    sample_loss += diff * diff;
                    dout[j] = 2.0 * diff / (dim as f64 * batch.len() as f64);
                }
                batch_loss += sample_loss / dim as f64;
                mlp.backward(&acts, &dout, &mut grad);
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::NanLoss { epoch });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            adam.step(&mut flat, &grad);
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    if cfg.epochs >= 2 {
        let first = epoch_losses[0];
        let last = *epoch_losses.last().expect("nonempty losses");
        if last >= first {
            return Err(TrainError::LossIncreased { first, last });
        }
    }
    let mut trained = Autoencoder {
        arch,
        mlp: ae.mlp,
    };
    trained.mlp.set_flat(&flat);
    let report = TrainReport {
        epoch_losses,
        optimizer_steps: adam.steps(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((trained, report))
}

fn latent_of_steps(ae: &Autoencoder, ds: &Dataset) -> Vec<(u64, u32, Vec<f64>)> {
    let mut order: Vec<usize> = (0..ds.trajectories.len()).collect();
    order.sort_by_key(|&i| ds.trajectories[i].id);
    let mut out = Vec::with_capacity(ds.total_steps());
    for i in order {
        let traj = &ds.trajectories[i];
        for (idx, step) in traj.steps.iter().enumerate() {
            let mut x = Vec::with_capacity(ds.d_s + ds.d_a);
            x.extend_from_slice(&step.state);
            x.extend_from_slice(&step.action);
            out.push((traj.id, idx as u32, ae.encode(&x)));
        }
    }
    out
}

/// Concatenates two datasets for autoencoder fitting, shifting the second
/// one's trajectory ids past the first so ids stay unique.
pub fn merge_for_autoencoder(a: &Dataset, b: &Dataset) -> Dataset {
    let offset = a.trajectories.iter().map(|t| t.id + 1).max().unwrap_or(0);
    let mut trajectories = a.trajectories.clone();
    trajectories.extend(b.trajectories.iter().map(|t| {
        let mut t = t.clone();
        t.id += offset;
        t
    }));
    Dataset::from_trajectories(a.d_s, a.d_a, trajectories)
}

/// Per-step retrieval similarity: the negated distance to the nearest
/// validation step in latent space (0 is maximal, attained by an exact
/// match).
pub fn retrieval_step_scores(
    ds_tr: &Dataset,
    ds_val: &Dataset,
    ae: &Autoencoder,
) -> Result<Vec<StepScore>, BaselineError> {
    ds_tr.validate()?;
    ds_val.validate()?;
    if ds_tr.d_s != ds_val.d_s || ds_tr.d_a != ds_val.d_a {
        return Err(BaselineError::DatasetDims);
    }
    let dim = ds_tr.d_s + ds_tr.d_a;
    if ae.arch.input_dim != dim {
        return Err(BaselineError::DimMismatch {
            expected: ae.arch.input_dim,
            got: dim,
        });
    }
    if ds_val.total_steps() == 0 {
        return Err(BaselineError::EmptyValidation);
    }

    let val_latents = latent_of_steps(ae, ds_val);
    let train_latents = latent_of_steps(ae, ds_tr);
    Ok(train_latents
        .par_iter()
        .map(|(traj_id, step_idx, z)| {
            let min_dist = val_latents
                .iter()
                .map(|(_, _, v)| {
                    z.iter()
                        .zip(v)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            StepScore {
                traj_id: *traj_id,
                step_idx: *step_idx,
                score: -min_dist,
            }
        })
        .collect())
}

/// Latent-similarity retrieval: each training step scores the negated
/// distance to its nearest validation step in latent space; selection then
/// proceeds exactly like the main pipeline at the requested granularity.
pub fn retrieval_select(
    ds_tr: &Dataset,
    ds_val: &Dataset,
    ae: &Autoencoder,
    budget: BudgetPolicy,
    level: SelectionLevel,
) -> Result<CurationResult, BaselineError> {
    let sims = retrieval_step_scores(ds_tr, ds_val, ae)?;
    match level {
        SelectionLevel::Trajectory => {
            let trajs = aggregate_trajectories(&sims, ds_tr)?;
            Ok(select_top_trajectories(&trajs, budget, ds_tr)?)
        }
        SelectionLevel::Step => {
            let n = budget.resolve_steps(ds_tr)?;
            Ok(select_top_steps(&sims, n, ds_tr)?)
        }
    }
}
