//! Binary checkpoints: `base.loco` holds the frozen base, and each continual
//! task lives in its own `task_<id>.loco` shard.
//!
//! Layout (little endian): `"LOCO"`, u32 version, u64 base checksum, then the
//! shard table entry (u8 kind, u32 task id, u32 tensor count), then each
//! tensor as u32 name length, UTF-8 name, u8 dtype, u32 rank, u64 extents and
//! raw f64 data. A u64 checksum of everything before it closes the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Adaptation, ModelState, TaskSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::params::{digest_u64, ParamGroup, TaskId};
use crate::pvt::PvtConfig;
use crate::synth::{write_all, Reader};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LOCO";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const KIND_BASE: u8 = 0;
const KIND_TASK: u8 = 1;

pub fn base_path(dir: &Path) -> PathBuf {
    dir.join("base.loco")
}

pub fn task_path(dir: &Path, task: TaskId) -> PathBuf {
    dir.join(format!("task_{task}.loco"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub base_checksum: u64,
    /// `None` for the base shard.
    pub task: Option<TaskId>,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn encode_shard(shard: &Shard) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&shard.base_checksum.to_le_bytes());
    let (kind, id) = match shard.task {
        None => (KIND_BASE, 0),
        Some(t) => (KIND_TASK, t.0),
    };
    out.push(kind);
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&(shard.tensors.len() as u32).to_le_bytes());
    for (name, t) in &shard.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = file_checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

fn file_checksum(bytes: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(bytes);
    digest_u64(h)
}

pub fn decode_shard(bytes: &[u8]) -> Result<Shard, CheckpointError> {
    let mut r = Reader { b: bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { expected: VERSION, found: version });
    }
    if bytes.len() < 8 + 4 + 4 {
        return Err(CheckpointError::Truncated("header"));
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("eight bytes"));
    let computed = file_checksum(&bytes[..body_len]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { b: &bytes[8..body_len] };
    let base_checksum = r.u64("base checksum")?;
    let kind = r.u8("shard kind")?;
    let id = r.u32("task id")?;
    let task = match kind {
        KIND_BASE => None,
        KIND_TASK => Some(TaskId(id)),
        k => return Err(CheckpointError::Malformed(format!("unknown shard kind {k}"))),
    };
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&n| n <= r.b.len() / 8)
            .ok_or(CheckpointError::Truncated("tensor data"))?;
        let data = r
            .take(n * 8, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` appears twice")));
        }
    }
    if !r.b.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} bytes after the last tensor", r.b.len())));
    }
    Ok(Shard { base_checksum, task, tensors })
}

fn collect(state: &ModelState, pred: impl Fn(ParamGroup) -> bool) -> BTreeMap<String, Tensor> {
    state
        .store
        .iter()
        .filter(|(_, p)| pred(p.group))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Writes the base shard and one shard per continual task into `dir`.
pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<Vec<PathBuf>> {
    let base_checksum = state
        .base_checksum()
        .ok_or_else(|| Error::Contract("only a frozen model can be checkpointed".into()))?;
    state.verify_base()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let base = Shard {
        base_checksum,
        task: None,
        tensors: collect(state, |g| g == ParamGroup::Base),
    };
    let p = base_path(dir);
    write_all(&p, &encode_shard(&base))?;
    written.push(p);
    for t in state.tasks().filter(|&t| t != TaskId(0)) {
        written.push(save_task_shard(state, dir, t)?);
    }
    Ok(written)
}

/// Writes the shard of a single continual task.
pub fn save_task_shard(state: &ModelState, dir: &Path, task: TaskId) -> Result<PathBuf> {
    let base_checksum = state
        .base_checksum()
        .ok_or_else(|| Error::Contract("only a frozen model can be checkpointed".into()))?;
    state.model.task(task)?;
    let shard = Shard {
        base_checksum,
        task: Some(task),
        tensors: collect(state, |g| matches!(g, ParamGroup::Adapter(t) | ParamGroup::Head(t) if t == task)),
    };
    let p = task_path(dir, task);
    write_all(&p, &encode_shard(&shard))?;
    Ok(p)
}

fn read_shard(path: &Path) -> Result<Shard> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_shard(&bytes)?)
}

/// Rebuilds a model from `dir` answering task 0 plus exactly `tasks`. Class
/// lists come from `specs`; the first spec describes task 0. All files are
/// read and verified before any state is built.
pub fn load_checkpoint(dir: &Path, config: &PvtConfig, specs: &[TaskSpec], tasks: &[TaskId]) -> Result<ModelState> {
    let base = read_shard(&base_path(dir))?;
    if base.task.is_some() {
        return Err(CheckpointError::Malformed("base.loco holds a task shard".into()).into());
    }
    let mut shards = Vec::new();
    for &t in tasks {
        let s = read_shard(&task_path(dir, t))?;
        if s.task != Some(t) {
            return Err(CheckpointError::Malformed(format!("task_{t}.loco holds shard {:?}", s.task)).into());
        }
        if s.base_checksum != base.base_checksum {
            return Err(CheckpointError::BaseMismatch {
                shard: s.base_checksum,
                base: base.base_checksum,
            }
            .into());
        }
        shards.push(s);
    }
    let spec_of = |t: TaskId| {
        specs
            .iter()
            .find(|s| s.id == t)
            .ok_or_else(|| Error::Config(format!("no task spec describes task {t}")))
    };
    let mut state = ModelState::new(config, 0)?;
    let base_spec = spec_of(TaskId(0))?;
    let seed = state.task_seed(TaskId(0));
    state
        .model
        .add_task(&mut state.store, TaskId(0), &base_spec.name, &base_spec.classes, false, seed)?;
    assign(&mut state, &base.tensors, |g| g == ParamGroup::Base)?;
    state.freeze_base();
    if state.base_checksum() != Some(base.base_checksum) {
        return Err(Error::Checkpoint(CheckpointError::ChecksumMismatch {
            stored: base.base_checksum,
            computed: state.base_checksum().unwrap_or_default(),
        }));
    }
    for s in &shards {
        let t = s.task.expect("checked above");
        let adaptation = if s.tensors.keys().any(|k| k.contains(".lora_")) {
            Adaptation::Lora
        } else {
            Adaptation::HeadOnly
        };
        state.register_task(spec_of(t)?, adaptation)?;
        assign(&mut state, &s.tensors, |g| matches!(g, ParamGroup::Adapter(x) | ParamGroup::Head(x) if x == t))?;
        for id in state.task_params(t) {
            state.store.set_trainable(id, false);
        }
    }
    Ok(state)
}

/// Copies every selected parameter from `tensors`, requiring an exact match
/// of names and shapes.
fn assign(state: &mut ModelState, tensors: &BTreeMap<String, Tensor>, pred: impl Fn(ParamGroup) -> bool) -> Result<()> {
    let ids = state.store.ids_in(pred);
    if ids.len() != tensors.len() {
        return Err(CheckpointError::Malformed(format!(
            "shard holds {} tensors, model expects {}",
            tensors.len(),
            ids.len()
        ))
        .into());
    }
    for id in ids {
        let name = state.store.get(id).name.clone();
        let t = tensors
            .get(&name)
            .ok_or_else(|| CheckpointError::Malformed(format!("shard lacks tensor `{name}`")))?;
        state.store.load_value(id, t.clone())?;
    }
    Ok(())
}
