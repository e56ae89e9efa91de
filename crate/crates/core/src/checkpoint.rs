//! Two-file checkpoints: `checkpoint.json` describes every tensor (name,
//! shape, byte offset, length, CRC-32) and `checkpoint.bin` holds the
//! little-endian `f32` data in the same order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::ArchConfig;
use crate::train::{AdamSettings, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "checkpoint.json";
pub const BLOB_NAME: &str = "checkpoint.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("checkpoint blob truncated: need {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },
    #[error("checksum mismatch in tensor {name}")]
    Checksum { name: String },
    #[error("checkpoint does not match the model structure: {0}")]
    Structure(String),
    #[error("malformed checkpoint manifest: {0}")]
    Malformed(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CheckpointError {
    /// Stable identifier of the failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Version { .. } => "version_mismatch",
            CheckpointError::Truncated { .. } => "truncated",
            CheckpointError::Checksum { .. } => "checksum",
            CheckpointError::Structure(_) => "structure_mismatch",
            CheckpointError::Malformed(_) => "malformed",
            CheckpointError::Io { .. } => "io",
        }
    }
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub len: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub k: usize,
    pub arch: ArchConfig,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub adam: AdamSettings,
    pub adam_steps_d: u64,
    pub adam_steps_g: Vec<u64>,
    pub tensors: Vec<TensorRecord>,
}

/// `(name, values)` for every tensor of the state, in blob order.
fn tensors_of(state: &TrainState) -> Vec<(String, Vec<usize>, &[f32])> {
    let p = &state.model.params;
    let mut out: Vec<(String, Vec<usize>, &[f32])> = p
        .iter()
        .map(|(_, name, t)| (format!("param/{name}"), t.shape().to_vec(), t.data()))
        .collect();
    let mut groups = vec![("d".to_string(), state.model.disc_ids(), &state.adam_d)];
    for (c, pair) in state.model.pairs.iter().enumerate() {
        groups.push((format!("g{c}"), pair.ids(), &state.adam_g[c]));
    }
    for (tag, ids, st) in groups {
        for (i, id) in ids.iter().enumerate() {
            let shape = p.get(*id).shape().to_vec();
            out.push((
                format!("adam/{tag}/m/{}", p.name(*id)),
                shape.clone(),
                &st.first_moment[i],
            ));
            out.push((format!("adam/{tag}/v/{}", p.name(*id)), shape, &st.second_moment[i]));
        }
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CkResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> CkResult<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::new();
    let mut records = Vec::new();
    for (name, shape, data) in tensors_of(state) {
        let offset = blob.len() as u64;
        let start = blob.len();
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        records.push(TensorRecord {
            name,
            shape,
            offset,
            len: (blob.len() - start) as u64,
            crc32: crc32fast::hash(&blob[start..]),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        k: state.model.num_classes(),
        arch: state.model.arch.clone(),
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        adam: AdamSettings {
            beta1: state.adam_d.config.beta1,
            beta2: state.adam_d.config.beta2,
            epsilon: state.adam_d.config.epsilon,
        },
        adam_steps_d: state.adam_d.step_count,
        adam_steps_g: state.adam_g.iter().map(|a| a.step_count).collect(),
        tensors: records,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    write_atomic(&dir.join(BLOB_NAME), &blob)?;
    write_atomic(&dir.join(MANIFEST_NAME), &json)
}

pub fn read_checkpoint_manifest(dir: &Path) -> CkResult<CheckpointManifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Malformed("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Loads and fully verifies a checkpoint; nothing is returned unless every
/// tensor is present, well-placed and passes its checksum.
pub fn load_checkpoint(dir: &Path) -> CkResult<TrainState> {
    let m = read_checkpoint_manifest(dir)?;
    if m.k != m.arch.num_classes || m.config.arch != m.arch {
        return Err(CheckpointError::Structure(format!(
            "k = {} but the architecture has {} classes",
            m.k, m.arch.num_classes
        )));
    }
    if m.adam_steps_g.len() != m.k {
        return Err(CheckpointError::Structure(format!(
            "{} generator optimizer states for k = {}",
            m.adam_steps_g.len(),
            m.k
        )));
    }
    let mut config = m.config.clone();
    config.adam = m.adam;
    let mut state = TrainState::new(config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = tensors_of(&state).into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != m.tensors.len() {
        return Err(CheckpointError::Structure(format!(
            "{} tensor records, the model needs {}",
            m.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), r) in expected.iter().zip(&m.tensors) {
        if *name != r.name || *shape != r.shape {
            return Err(CheckpointError::Structure(format!(
                "expected {name} {shape:?}, found {} {:?}",
                r.name, r.shape
            )));
        }
        let numel: usize = shape.iter().product();
        if r.len != 4 * numel as u64 {
            return Err(CheckpointError::Structure(format!(
                "{name}: {} bytes for {numel} values",
                r.len
            )));
        }
    }

    let path = dir.join(BLOB_NAME);
    let blob = std::fs::read(&path).map_err(io_err(&path))?;
    let needed = m.tensors.iter().map(|r| r.offset + r.len).max().unwrap_or(0);
    if (blob.len() as u64) < needed {
        return Err(CheckpointError::Truncated {
            needed,
            found: blob.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(m.tensors.len());
    for r in &m.tensors {
        let bytes = &blob[r.offset as usize..(r.offset + r.len) as usize];
        if crc32fast::hash(bytes) != r.crc32 {
            return Err(CheckpointError::Checksum { name: r.name.clone() });
        }
        values.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<f32>>(),
        );
    }

    let mut values = values.into_iter();
    let p = &mut state.model.params;
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        p.get_mut(id)
            .data_mut()
            .copy_from_slice(&values.next().expect("counted"));
    }
    let mut fill = |ids: Vec<layergan_autograd::ParamId>, st: &mut layergan_autograd::AdamState<f32>| {
        for i in 0..ids.len() {
            st.first_moment[i] = values.next().expect("counted");
            st.second_moment[i] = values.next().expect("counted");
        }
    };
    fill(state.model.disc_ids(), &mut state.adam_d);
    for c in 0..m.k {
        let ids = state.model.pairs[c].ids();
        fill(ids, &mut state.adam_g[c]);
    }
    state.adam_d.step_count = m.adam_steps_d;
    for (a, &s) in state.adam_g.iter_mut().zip(&m.adam_steps_g) {
        a.step_count = s;
    }
    state.epoch = m.epoch;
    state.step = m.step;
    Ok(state)
}
