//! Training checkpoints: a JSON manifest plus one little-endian f32 blob.
//!
//! `params.bin` stores, in order, the student parameters, the teacher
//! parameters, the first and second AdamW moments and the center. Every block
//! is listed in the manifest with its byte offset, so the file can be read
//! without knowing the model layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::distill::StudentTeacherPair;
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::vit::ParamSet;

pub const CHECKPOINT_FORMAT: &str = "attmask-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Schedule values in force at the checkpointed step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleValues {
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_temp: f64,
    pub ema_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub schedule: ScheduleValues,
    pub tensors: Vec<TensorEntry>,
    pub total_bytes: u64,
}

/// Everything needed to continue a run bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub config: RunConfig,
    pub step: u64,
    pub schedule: ScheduleValues,
    pub pair: StudentTeacherPair<f32>,
    pub optimizer: OptimizerState<f32>,
}

const GROUPS: [&str; 5] = ["student", "teacher", "adam_m", "adam_v", "center"];

pub fn checkpoint_dir(output_dir: &Path, step: u64) -> PathBuf {
    output_dir
        .join("checkpoints")
        .join(format!("step-{step:06}"))
}

/// Most recent checkpoint directory under `output_dir`, if any.
pub fn latest_checkpoint(output_dir: &Path) -> Result<Option<PathBuf>> {
    let root = output_dir.join("checkpoints");
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let entry = entry.map_err(|e| Error::io(&root, e))?;
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|s| s.strip_prefix("step-"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if entry.path().join(MANIFEST_FILE).is_file()
            && best.as_ref().is_none_or(|(b, _)| step > *b)
        {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn push_block(
    bytes: &mut Vec<u8>,
    tensors: &mut Vec<TensorEntry>,
    group: &str,
    name: &str,
    shape: &[usize],
    data: &[f32],
) {
    tensors.push(TensorEntry {
        group: group.to_string(),
        name: name.to_string(),
        shape: shape.to_vec(),
        offset: bytes.len() as u64,
    });
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a state into manifest text and blob bytes.
pub fn encode(state: &TrainingState) -> Result<(String, Vec<u8>)> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let pair = &state.pair;
    for (group, set) in [("student", &pair.student), ("teacher", &pair.teacher)] {
        for (name, t) in set {
            push_block(&mut bytes, &mut tensors, group, name, t.shape(), t.data());
        }
    }
    for (group, moments) in [
        ("adam_m", &state.optimizer.first),
        ("adam_v", &state.optimizer.second),
    ] {
        for (name, v) in moments {
            let shape = pair
                .student
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| {
                    Error::State(format!("optimizer moment `{name}` has no parameter"))
                })?;
            push_block(&mut bytes, &mut tensors, group, name, &shape, v);
        }
    }
    push_block(
        &mut bytes,
        &mut tensors,
        "center",
        "center",
        &[pair.center.len()],
        &pair.center,
    );
    push_block(
        &mut bytes,
        &mut tensors,
        "center",
        "patch_center",
        &[pair.patch_center.len()],
        &pair.patch_center,
    );
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: state.config.hash(),
        config: state.config.clone(),
        step: state.step,
        seed: state.config.seed,
        schedule: state.schedule,
        tensors,
        total_bytes: bytes.len() as u64,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    Ok((text, bytes))
}

/// Rebuilds a state from manifest text and blob bytes.
pub fn decode(manifest_text: &str, bytes: &[u8]) -> Result<TrainingState> {
    let m: Manifest = serde_json::from_str(manifest_text).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("manifest: {e}"),
    })?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unsupported checkpoint {} v{}", m.format, m.version),
        });
    }
    if m.total_bytes != bytes.len() as u64 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!(
                "params blob has {} bytes, manifest says {}",
                bytes.len(),
                m.total_bytes
            ),
        });
    }
    if m.config.hash() != m.config_hash {
        return Err(Error::State(
            "manifest config does not match its recorded hash".into(),
        ));
    }
    let mut groups: BTreeMap<&str, Vec<(String, Tensor<f32>)>> = BTreeMap::new();
    for e in &m.tensors {
        if !GROUPS.contains(&e.group.as_str()) {
            return Err(Error::Format {
                offset: e.offset,
                msg: format!("unknown group `{}`", e.group),
            });
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(Error::Format {
                offset: e.offset,
                msg: format!("`{}/{}` runs past the end of the blob", e.group, e.name),
            });
        }
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(&e.shape, data)?;
        groups
            .entry(group_key(&e.group))
            .or_default()
            .push((e.name.clone(), t));
    }
    let mut take = |g: &str| groups.remove(g).unwrap_or_default();
    let student: ParamSet<f32> = take("student")
        .into_iter()
        .map(|(k, t)| (k, t.with_grad()))
        .collect();
    let teacher: ParamSet<f32> = take("teacher").into_iter().collect();
    let first = take("adam_m")
        .into_iter()
        .map(|(k, t)| (k, t.into_data()))
        .collect();
    let second = take("adam_v")
        .into_iter()
        .map(|(k, t)| (k, t.into_data()))
        .collect();
    let mut centers: BTreeMap<String, Vec<f32>> = take("center")
        .into_iter()
        .map(|(k, t)| (k, t.into_data()))
        .collect();
    let center = centers.remove("center").unwrap_or_default();
    let patch_center = centers.remove("patch_center").unwrap_or_default();

    let expected = crate::vit::param_shapes(&m.config.model);
    for (group, set) in [("student", &student), ("teacher", &teacher)] {
        if set.len() != expected.len()
            || expected
                .iter()
                .any(|(name, shape)| set.get(name).map(|t| t.shape()) != Some(shape.as_slice()))
        {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{group} parameters do not match the configured model"),
            });
        }
    }
    if center.len() != m.config.model.out_dim || patch_center.len() != m.config.model.out_dim {
        return Err(Error::Format {
            offset: 0,
            msg: "center length does not match out_dim".into(),
        });
    }
    let optimizer = OptimizerState {
        config: m.config.adamw(),
        step: m.step,
        first,
        second,
    };
    let pair = StudentTeacherPair {
        student,
        teacher,
        center,
        patch_center,
        center_momentum: m.config.teacher.center_momentum,
        student_temp: m.config.model.student_temp,
    };
    Ok(TrainingState {
        config: m.config,
        step: m.step,
        schedule: m.schedule,
        pair,
        optimizer,
    })
}

fn group_key(g: &str) -> &'static str {
    GROUPS.iter().find(|&&k| k == g).copied().unwrap_or("")
}

pub fn save_checkpoint(state: &TrainingState, dir: &Path) -> Result<()> {
    let (text, bytes) = encode(state)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(PARAMS_FILE);
    fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, text).map_err(|e| Error::io(&m, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainingState> {
    let m = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let p = dir.join(PARAMS_FILE);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    decode(&text, &bytes)
}

/// Loads a checkpoint for resuming `config`, refusing one written under a
/// different configuration.
pub fn load_for_resume(dir: &Path, config: &RunConfig) -> Result<TrainingState> {
    let state = load_checkpoint(dir)?;
    let (want, have) = (config.hash(), state.config.hash());
    if want != have {
        return Err(Error::State(format!(
            "checkpoint {} was written with config hash {have}, current config hashes to {want}",
            dir.display()
        )));
    }
    Ok(state)
}
