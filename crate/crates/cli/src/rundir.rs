//! Run directory layout and the manifest that describes it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use loco_core::engine::checkpoint::{base_path, task_path};
use loco_core::fusion::{BodyAxisRegressor, BodyPartProfile};
use loco_core::{Error, TaskId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest";
pub const MANIFEST_FORMAT: u32 = 1;
const AXIS_HEADER: &str = "loco-axis 1";

pub fn profiles_dir(dir: &Path) -> PathBuf {
    dir.join("profiles")
}

pub fn reports_dir(dir: &Path) -> PathBuf {
    dir.join("reports")
}

pub fn profile_path(dir: &Path, task: TaskId) -> PathBuf {
    profiles_dir(dir).join(format!("task_{task}.profile"))
}

pub fn axis_path(dir: &Path) -> PathBuf {
    profiles_dir(dir).join("axis")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    /// The last command that wrote into the directory.
    pub command: String,
    pub created_unix: u64,
    /// Tasks answered by the checkpoint, task 0 included.
    pub tasks: Vec<TaskId>,
    /// Checkpoint directory the outputs were computed from, when it is not
    /// this directory.
    pub checkpoint: Option<PathBuf>,
    /// Base parameter checksum recorded at freezing.
    pub base_checksum: String,
    /// SHA-256 of each checkpoint and profile file, keyed by relative path.
    pub files: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, tasks: Vec<TaskId>, base_checksum: u64) -> Self {
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self {
            format: MANIFEST_FORMAT,
            command: command.into(),
            created_unix,
            tasks,
            checkpoint: None,
            base_checksum: format!("{base_checksum:#018x}"),
            files: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            what: "manifest",
            msg: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Parse {
                what: "manifest",
                msg: format!("format {} is not supported", m.format),
            }
            .into());
        }
        m.config.validate()?;
        Ok(m)
    }

    /// Hashes the checkpoint and profile files of `dir` and writes the
    /// manifest there.
    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.files.clear();
        let mut paths = vec![base_path(dir), axis_path(dir)];
        for &t in &self.tasks {
            if t != TaskId(0) {
                paths.push(task_path(dir, t));
            }
            paths.push(profile_path(dir, t));
        }
        for p in paths {
            if p.exists() {
                let rel = p.strip_prefix(dir).expect("under dir").to_string_lossy().replace('\\', "/");
                self.files.insert(rel, sha256_file(&p)?);
            }
        }
        let text = toml::to_string(&self)?;
        write_file(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn continual_tasks(&self) -> Vec<TaskId> {
        self.tasks.iter().copied().filter(|&t| t != TaskId(0)).collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_axis(dir: &Path, reg: &BodyAxisRegressor) -> Result<()> {
    let [a, b, c] = reg.coef;
    write_file(&axis_path(dir), format!("{AXIS_HEADER}\ncoef {a} {b} {c}\n").as_bytes())
}

pub fn read_axis(dir: &Path) -> Result<BodyAxisRegressor> {
    let path = axis_path(dir);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let bad = |msg: &str| Error::Parse { what: "body-axis regressor", msg: msg.into() };
    let mut lines = text.lines();
    if lines.next() != Some(AXIS_HEADER) {
        return Err(bad("missing header").into());
    }
    let coef: Vec<f64> = lines
        .next()
        .and_then(|l| l.strip_prefix("coef "))
        .ok_or_else(|| bad("missing coefficients"))?
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| bad("coefficient is not a number"))?;
    let coef: [f64; 3] = coef.try_into().map_err(|_| bad("expected three coefficients"))?;
    Ok(BodyAxisRegressor { coef })
}

pub fn read_profiles(dir: &Path, tasks: &[TaskId]) -> Result<Vec<BodyPartProfile>> {
    tasks.iter().map(|&t| Ok(BodyPartProfile::read(&profile_path(dir, t))?)).collect()
}

/// Copies the profile files of `tasks` between run directories.
pub fn copy_profiles(from: &Path, to: &Path, tasks: &[TaskId]) -> Result<()> {
    let mut paths = vec![axis_path(from)];
    paths.extend(tasks.iter().map(|&t| profile_path(from, t)));
    for p in paths {
        let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        write_file(&to.join(p.strip_prefix(from).expect("under dir")), &bytes)?;
    }
    Ok(())
}
