//! Gaussian MLP policy: forward pass, log-likelihood, analytic gradients,
//! canonical parameter flattening, and the binary checkpoint format.
//!
//! The policy maps a state through tanh hidden layers to an action mean; the
//! per-dimension log standard deviation is a state-independent parameter
//! vector clamped to [-5, 2]. The canonical flat parameter order is: layers in
//! ascending order, each as row-major weights then biases, with log_std last.
//! Gradients, flattening, checkpoints, and gradient caches all share this
//! order.
//!
//! Checkpoint layout: magic `QOQPOL1`, u32 LE header length, a JSON header
//! (architecture, seed, metadata), then all parameters as f64 little-endian.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LOG_STD_INIT: f64 = -0.5;
pub const CHECKPOINT_MAGIC: &[u8; 7] = b"QOQPOL1";
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("{field} has dimension {got}, expected {expected}")]
    DimMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("flat parameter vector has length {got}, expected {expected}")]
    FlatLength { expected: usize, got: usize },
    #[error("layer mask selects no parameters")]
    EmptyMask,
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
    #[error("not a policy checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("checkpoint header invalid: {0}")]
    Header(String),
    #[error("unsupported activation {0:?}, only \"tanh\" is supported")]
    UnsupportedActivation(String),
}

/// How raw states are mapped to network inputs. The map is affine and
/// invertible, so it only re-bases the first layer: any function the network
/// can express on encoded inputs it can express on raw inputs with first
/// layer weights W·A and bias b + W·c (encoded = A·s + c). It changes
/// conditioning, not capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// Feed the raw state vector through unchanged.
    #[default]
    Identity,
    /// Re-express the 7-dim pick-and-place state
    /// [gx, gy, hold, ox, oy, goalx, goaly] as task-relative offsets:
    /// [ox-gx, oy-gy, goalx-ox, goaly-oy, 2*hold-1, 2*ox-1, 2*oy-1].
    /// Near-zero action-relevant offsets stay visible instead of being
    /// swamped by absolute positions, and unit-interval coordinates are
    /// centered. Requires d_s == 7.
    TaskRelative,
}

/// Network shape. The activation is fixed to tanh on every hidden layer; the
/// mean head and log_std are linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArch {
    pub d_s: usize,
    pub d_a: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub input_encoding: InputEncoding,
}

impl PolicyArch {
    pub fn new(d_s: usize, d_a: usize, hidden: Vec<usize>) -> Self {
        PolicyArch {
            d_s,
            d_a,
            hidden,
            input_encoding: InputEncoding::Identity,
        }
    }

    /// Switch the network input to task-relative pick-and-place features.
    /// Panics if the state dimension is not 7.
    pub fn with_task_relative_input(mut self) -> Self {
        assert_eq!(
            self.d_s, 7,
            "task-relative input encoding needs the 7-dim pick-and-place state"
        );
        self.input_encoding = InputEncoding::TaskRelative;
        self
    }

    /// Layer widths from input to mean output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.d_s);
        w.extend_from_slice(&self.hidden);
        w.push(self.d_a);
        w
    }

    /// Parameters in the tanh trunk: every layer except the mean head.
    pub fn trunk_param_count(&self) -> usize {
        let w = self.widths();
        (0..w.len().saturating_sub(2))
            .map(|i| w[i] * w[i + 1] + w[i + 1])
            .sum()
    }

    /// Parameters in the head: mean-head weights and biases plus log_std.
    pub fn head_param_count(&self) -> usize {
        let w = self.widths();
        let n = w.len();
        w[n - 2] * w[n - 1] + w[n - 1] + self.d_a
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.head_param_count()
    }
}

/// Which parameter group a gradient is taken over. Each mask corresponds to a
/// contiguous range of the canonical flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMask {
    Trunk,
    Head,
    All,
}

impl LayerMask {
    pub fn code(self) -> u8 {
        match self {
            LayerMask::Trunk => 0,
            LayerMask::Head => 1,
            LayerMask::All => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerMask::Trunk),
            1 => Some(LayerMask::Head),
            2 => Some(LayerMask::All),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerMask::Trunk => "trunk",
            LayerMask::Head => "head",
            LayerMask::All => "all",
        }
    }

    /// Range of the canonical flat vector this mask selects.
    pub fn flat_range(self, arch: &PolicyArch) -> Result<std::ops::Range<usize>, PolicyError> {
        let trunk = arch.trunk_param_count();
        let total = arch.param_count();
        let range = match self {
            LayerMask::Trunk => 0..trunk,
            LayerMask::Head => trunk..total,
            LayerMask::All => 0..total,
        };
        if range.is_empty() {
            return Err(PolicyError::EmptyMask);
        }
        Ok(range)
    }

    pub fn param_count(self, arch: &PolicyArch) -> Result<usize, PolicyError> {
        Ok(self.flat_range(arch)?.len())
    }
}

impl std::str::FromStr for LayerMask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trunk" => Ok(LayerMask::Trunk),
            "head" => Ok(LayerMask::Head),
            "all" => Ok(LayerMask::All),
            other => Err(format!("unknown layer mask {other:?}")),
        }
    }
}

/// One dense layer, weights row-major with shape (rows = out, cols = in).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn zeros(rows: usize, cols: usize) -> Self {
        Linear {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            out.push(acc);
        }
    }

    /// x += Wᵀ d, accumulating the gradient with respect to this layer input.
    fn accumulate_transpose(&self, d: &[f64], x: &mut [f64]) {
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let dv = d[r];
            for (xv, wv) in x.iter_mut().zip(row) {
                *xv += wv * dv;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// A plain MLP: tanh after every layer except the last, which is linear.
/// Shared by the policy trunk+head and the retrieval autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, layer by layer from the given RNG.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for i in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let mut layer = Linear::zeros(fan_out, fan_in);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = rng.random_range(-limit..limit);
            }
            layers.push(layer);
        }
        Mlp { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Forward pass keeping every activation; acts[0] is the input, the last
    /// entry is the linear output.
    pub fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.layers.len();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.apply(acts.last().expect("non-empty activations"), &mut out);
            if i + 1 < n {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).pop().expect("non-empty activations")
    }

    /// Backpropagates d(scalar)/d(output) through the network, writing
    /// parameter gradients into `grad` (canonical flat layout, which must be
    /// zeroed by the caller).
    pub fn backward(&self, acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) {
        let n = self.layers.len();
        debug_assert_eq!(grad.len(), self.param_count());
        let mut offsets = Vec::with_capacity(n);
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_count();
        }
        let mut delta = dout.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input = &acts[i];
            let base = offsets[i];
            let (gw, gb) = grad[base..base + layer.param_count()].split_at_mut(layer.w.len());
            for r in 0..layer.rows {
                let dv = delta[r];
                gb[r] += dv;
                let grow = &mut gw[r * layer.cols..(r + 1) * layer.cols];
                for (g, xv) in grow.iter_mut().zip(input) {
                    *g += dv * xv;
                }
            }
            if i > 0 {
                let mut dprev = vec![0.0; layer.cols];
                layer.accumulate_transpose(&delta, &mut dprev);
                // The layer below ends in tanh; its stored activation is the
                // tanh output, so the derivative is 1 - act².
                for (d, act) in dprev.iter_mut().zip(&acts[i]) {
                    *d *= 1.0 - act * act;
                }
                delta = dprev;
            }
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for layer in self.layers.iter_mut() {
            let nw = layer.w.len();
            layer.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }
}

/// Checkpoint header serialized as JSON after the magic bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: PolicyArch,
    pub activation: String,
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
}

/// Gaussian MLP policy: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    arch: PolicyArch,
    pub(crate) mlp: Mlp,
    log_std: Vec<f64>,
}

/// Fresh policy with Xavier-uniform weights, zero biases, and log_std at
/// -0.5, deterministic per seed.
pub fn init_params(arch: &PolicyArch, seed: u64) -> MlpPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = Mlp::init(&arch.widths(), &mut rng);
    MlpPolicy {
        arch: arch.clone(),
        mlp,
        log_std: vec![LOG_STD_INIT; arch.d_a],
    }
}

impl MlpPolicy {
    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    fn check_state(&self, s: &[f64]) -> Result<(), PolicyError> {
        if s.len() != self.arch.d_s {
            return Err(PolicyError::DimMismatch {
                field: "state",
                expected: self.arch.d_s,
                got: s.len(),
            });
        }
        Ok(())
    }

    fn check_action(&self, a: &[f64]) -> Result<(), PolicyError> {
        if a.len() != self.arch.d_a {
            return Err(PolicyError::DimMismatch {
                field: "action",
                expected: self.arch.d_a,
                got: a.len(),
            });
        }
        Ok(())
    }

    fn encode_input(&self, s: &[f64]) -> Vec<f64> {
        match self.arch.input_encoding {
            InputEncoding::Identity => s.to_vec(),
            InputEncoding::TaskRelative => vec![
                s[3] - s[0],
                s[4] - s[1],
                s[5] - s[3],
                s[6] - s[4],
                2.0 * s[2] - 1.0,
                2.0 * s[3] - 1.0,
                2.0 * s[4] - 1.0,
            ],
        }
    }

    /// Action mean μ(s).
    pub fn mean(&self, s: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.check_state(s)?;
        Ok(self.mlp.forward(&self.encode_input(s)))
    }

    /// Per-dimension standard deviations exp(log_std).
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    /// Draws an action from N(μ(s), diag(σ²)) via Box-Muller, deterministic
    /// per RNG state.
    pub fn sample_action(&self, s: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PolicyError> {
        let mut mu = self.mean(s)?;
        for (m, ls) in mu.iter_mut().zip(&self.log_std) {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *m += ls.exp() * z;
        }
        Ok(mu)
    }

    /// Diagonal-Gaussian log-likelihood of `a` under the policy at `s`.
    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> Result<f64, PolicyError> {
        self.check_state(s)?;
        self.check_action(a)?;
        let mu = self.mlp.forward(&self.encode_input(s));
        let mut lp = 0.0;
        for j in 0..self.arch.d_a {
            let z = (a[j] - mu[j]) * (-self.log_std[j]).exp();
            lp += -0.5 * z * z - self.log_std[j] - 0.5 * LN_2PI;
        }
        Ok(lp)
    }

    /// Analytic gradient of `log_prob(s, a)` with respect to the parameters
    /// selected by `mask`, in canonical flat order.
    pub fn grad_log_prob(
        &self,
        s: &[f64],
        a: &[f64],
        mask: LayerMask,
    ) -> Result<Vec<f64>, PolicyError> {
        let range = mask.flat_range(&self.arch)?;
        let full = self.grad_log_prob_full(s, a)?;
        Ok(full[range].to_vec())
    }

    /// Gradient over all parameters; `grad_log_prob` slices this.
    pub fn grad_log_prob_full(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let mut grad = vec![0.0; self.arch.param_count()];
        self.log_prob_and_grad(s, a, &mut grad)?;
        Ok(grad)
    }

    /// Computes log_prob and its full parameter gradient in one pass,
    /// overwriting `grad` (which must have `param_count()` elements).
    pub fn log_prob_and_grad(
        &self,
        s: &[f64],
        a: &[f64],
        grad: &mut [f64],
    ) -> Result<f64, PolicyError> {
        self.check_state(s)?;
        self.check_action(a)?;
        if grad.len() != self.arch.param_count() {
            return Err(PolicyError::FlatLength {
                expected: self.arch.param_count(),
                got: grad.len(),
            });
        }
        let acts = self.mlp.forward_cached(&self.encode_input(s));
        let mu = acts.last().expect("non-empty activations");
        let d_a = self.arch.d_a;
        let mut dmu = vec![0.0; d_a];
        let mut lp = 0.0;
        grad.fill(0.0);
        let mlp_len = self.mlp.param_count();
        for j in 0..d_a {
            let inv_sigma = (-self.log_std[j]).exp();
            let z = (a[j] - mu[j]) * inv_sigma;
            lp += -0.5 * z * z - self.log_std[j] - 0.5 * LN_2PI;
            dmu[j] = z * inv_sigma;
            grad[mlp_len + j] = z * z - 1.0;
        }
        self.mlp.backward(&acts, &dmu, &mut grad[..mlp_len]);
        Ok(lp)
    }

    /// Canonical flat parameter vector: layers ascending (row-major weights,
    /// then biases), log_std last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.mlp.flatten_into(&mut out);
        out.extend_from_slice(&self.log_std);
        out
    }

    /// Inverse of [`MlpPolicy::flatten`]; exact, no clamping.
    pub fn from_flat(arch: &PolicyArch, flat: &[f64]) -> Result<MlpPolicy, PolicyError> {
        if flat.len() != arch.param_count() {
            return Err(PolicyError::FlatLength {
                expected: arch.param_count(),
                got: flat.len(),
            });
        }
        let mut policy = init_params(arch, 0);
        policy.set_flat(flat);
        Ok(policy)
    }

    /// Overwrites parameters from a canonical flat vector of exactly the
    /// right length.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat length mismatch");
        let mlp_len = self.mlp.param_count();
        self.mlp.set_flat(&flat[..mlp_len]);
        self.log_std.copy_from_slice(&flat[mlp_len..]);
    }

    /// Projects log_std back into [LOG_STD_MIN, LOG_STD_MAX]; applied by the
    /// trainer after every optimizer step.
    pub fn clamp_log_std(&mut self) {
        for v in self.log_std.iter_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Identifies the parameter values (architecture plus all weights),
    /// independent of checkpoint metadata. Gradient caches store this hash so
    /// scoring can detect a cache built against a different policy.
    pub fn params_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let arch_json = serde_json::to_string(&self.arch).expect("arch serializes");
        hasher.update(arch_json.as_bytes());
        for v in self.flatten() {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Serializes to the checkpoint byte format.
    pub fn checkpoint_bytes(
        &self,
        seed: u64,
        meta: &BTreeMap<String, String>,
    ) -> Result<Vec<u8>, PolicyError> {
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            activation: "tanh".to_string(),
            seed,
            meta: meta.clone(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| PolicyError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(7 + 4 + header_json.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(MlpPolicy, CheckpointHeader), PolicyError> {
        if bytes.len() < 11 || &bytes[..7] != CHECKPOINT_MAGIC {
            return Err(PolicyError::BadMagic);
        }
        let header_len = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
        let header_end = 11 + header_len;
        if bytes.len() < header_end {
            return Err(PolicyError::Truncated("header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[11..header_end])
            .map_err(|e| PolicyError::Header(e.to_string()))?;
        if header.activation != "tanh" {
            return Err(PolicyError::UnsupportedActivation(header.activation));
        }
        let body = &bytes[header_end..];
        let expected = header.arch.param_count() * 8;
        if body.len() != expected {
            return Err(PolicyError::Truncated("parameters"));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let policy = MlpPolicy::from_flat(&header.arch, &flat)?;
        Ok((policy, header))
    }

    pub fn save(
        &self,
        path: impl AsRef<Path>,
        seed: u64,
        meta: &BTreeMap<String, String>,
    ) -> Result<(), PolicyError> {
        let path = path.as_ref();
        let bytes = self.checkpoint_bytes(seed, meta)?;
        let mut file = std::fs::File::create(path).map_err(|source| PolicyError::Write {
            path: path.to_path_buf(),
            source,
        })?;
        file.write_all(&bytes).map_err(|source| PolicyError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(MlpPolicy, CheckpointHeader), PolicyError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| PolicyError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        MlpPolicy::from_checkpoint_bytes(&bytes)
    }
}
