//! Trajectory containers and the JSONL dataset format.
//!
//! A dataset file is UTF-8 with LF line endings. The first line is a header
//! object `{"format":"qoq-traj","version":1,"d_s":D,"d_a":A}`; every further
//! line is one trajectory `{"id":…,"label":…,"meta":{…},"steps":[…]}` with a
//! step encoded as `{"s":[…],"a":[…]}`. Serialization is canonical: fixed key
//! order, sorted meta keys, and shortest round-trip decimal floats, so equal
//! datasets always produce byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

pub const FORMAT_NAME: &str = "qoq-traj";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
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
    #[error("line {line}: not valid trajectory JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("unsupported dataset format {format:?} version {version}")]
    UnsupportedFormat { format: String, version: u32 },
    #[error("trajectory {traj_id}: step {step_idx} has {got}-dim {field}, expected {expected}")]
    DimMismatch {
        traj_id: u64,
        step_idx: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("trajectory {traj_id}: step {step_idx} contains a non-finite value")]
    NonFinite { traj_id: u64, step_idx: usize },
    #[error("trajectory {traj_id} has no steps")]
    EmptySteps { traj_id: u64 },
    #[error("duplicate trajectory id {id}")]
    DuplicateId { id: u64 },
    #[error("ids not present in dataset: {ids:?}")]
    UnknownIds { ids: Vec<u64> },
    #[error("JSON encoding failed: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Outcome label of a demonstration. Serializes as `"success"`, `"failure"`,
/// or JSON `null` for unlabeled rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Success,
    Failure,
    Unlabeled,
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Label::Success => s.serialize_str("success"),
            Label::Failure => s.serialize_str("failure"),
            Label::Unlabeled => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Option::<String>::deserialize(d)?.as_deref() {
            None => Ok(Label::Unlabeled),
            Some("success") => Ok(Label::Success),
            Some("failure") => Ok(Label::Failure),
            Some(other) => Err(serde::de::Error::custom(format!(
                "unknown label {other:?}, expected \"success\", \"failure\", or null"
            ))),
        }
    }
}

/// One state-action pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub action: Vec<f64>,
}

/// An ordered sequence of steps with an id, an outcome label, and free-form
/// string metadata (generator name, seed, failure mode, fragment info).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub id: u64,
    pub label: Label,
    pub meta: BTreeMap<String, String>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    d_s: usize,
    d_a: usize,
}

/// A collection of trajectories sharing state and action dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_s: usize,
    pub d_a: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(d_s: usize, d_a: usize) -> Self {
        Dataset {
            d_s,
            d_a,
            trajectories: Vec::new(),
        }
    }

    pub fn from_trajectories(d_s: usize, d_a: usize, trajectories: Vec<Trajectory>) -> Self {
        Dataset {
            d_s,
            d_a,
            trajectories,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn trajectory(&self, id: u64) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.trajectories.iter().map(|t| t.id).collect()
    }

    /// Checks every container invariant: unique ids, non-empty step lists,
    /// matching dimensions, finite values.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for traj in &self.trajectories {
            if !seen.insert(traj.id) {
                return Err(DataError::DuplicateId { id: traj.id });
            }
            if traj.steps.is_empty() {
                return Err(DataError::EmptySteps { traj_id: traj.id });
            }
            for (step_idx, step) in traj.steps.iter().enumerate() {
                if step.state.len() != self.d_s {
                    return Err(DataError::DimMismatch {
                        traj_id: traj.id,
                        step_idx,
                        field: "state",
                        expected: self.d_s,
                        got: step.state.len(),
                    });
                }
                if step.action.len() != self.d_a {
                    return Err(DataError::DimMismatch {
                        traj_id: traj.id,
                        step_idx,
                        field: "action",
                        expected: self.d_a,
                        got: step.action.len(),
                    });
                }
                if step
                    .state
                    .iter()
                    .chain(step.action.iter())
                    .any(|v| !v.is_finite())
                {
                    return Err(DataError::NonFinite {
                        traj_id: traj.id,
                        step_idx,
                    });
                }
            }
        }
        Ok(())
    }

    /// Canonical JSONL serialization: header line, one trajectory per line,
    /// trailing newline on every line.
    pub fn to_jsonl(&self) -> Result<String, DataError> {
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            d_s: self.d_s,
            d_a: self.d_a,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for traj in &self.trajectories {
            out.push_str(&serde_json::to_string(traj)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let (_, header_line) = lines.next().ok_or(DataError::MissingHeader)?;
        let header: Header =
            serde_json::from_str(header_line).map_err(|e| DataError::Parse {
                line: 1,
                message: e.to_string(),
            })?;
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(DataError::UnsupportedFormat {
                format: header.format,
                version: header.version,
            });
        }
        let mut ds = Dataset::new(header.d_s, header.d_a);
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let traj: Trajectory = serde_json::from_str(line).map_err(|e| DataError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            ds.trajectories.push(traj);
        }
        ds.validate()?;
        Ok(ds)
    }

    /// SHA-256 of the canonical serialization; identifies dataset content.
    pub fn content_hash(&self) -> Result<[u8; 32], DataError> {
        Ok(Sha256::digest(self.to_jsonl()?.as_bytes()).into())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::from_jsonl(&text)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    ds.validate()?;
    let text = ds.to_jsonl()?;
    let mut file = std::fs::File::create(path).map_err(|source| DataError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(text.as_bytes())
        .map_err(|source| DataError::Write {
            path: path.to_path_buf(),
            source,
        })
}

/// Splits into (listed ids in original dataset order, complement). Ids absent
/// from the dataset are an error.
pub fn split_by_ids(ds: &Dataset, ids: &BTreeSet<u64>) -> Result<(Dataset, Dataset), DataError> {
    let present: BTreeSet<u64> = ds.trajectories.iter().map(|t| t.id).collect();
    let missing: Vec<u64> = ids.difference(&present).copied().collect();
    if !missing.is_empty() {
        return Err(DataError::UnknownIds { ids: missing });
    }
    let mut first = Dataset::new(ds.d_s, ds.d_a);
    let mut second = Dataset::new(ds.d_s, ds.d_a);
    for traj in &ds.trajectories {
        if ids.contains(&traj.id) {
            first.trajectories.push(traj.clone());
        } else {
            second.trajectories.push(traj.clone());
        }
    }
    Ok((first, second))
}
