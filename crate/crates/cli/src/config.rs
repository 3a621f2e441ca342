//! Run configuration: model, task sequence, adapter sites and seeds.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use loco_core::pvt::LoraSites;
use loco_core::synth::{self, OrganSpec, Recipe, VolumeSample};
use loco_core::{seed, PvtConfig, TaskId, TaskSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Weight initialization and sample order.
    pub model: u64,
    /// Synthetic data generation.
    pub data: u64,
    /// Train/held-out split.
    pub split: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { model: 1, data: 7, split: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub band: (f64, f64),
    pub samples: usize,
    pub noise: f64,
    pub organs: Vec<OrganSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub epochs: usize,
    pub lr: f64,
    pub data: DataSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seeds: Seeds,
    /// Adapter sites; overrides `model.lora.sites` when present.
    #[serde(default)]
    pub ablation: Option<LoraSites>,
    #[serde(default)]
    pub model: PvtConfig,
    /// Task 0 first; later entries are continual tasks in id order.
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

fn default_test_fraction() -> f64 {
    0.2
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| loco_core::Error::Parse {
            what: "run config",
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(loco_core::Error::Config(m).into());
        if self.tasks.is_empty() {
            return fail("at least one task is required".into());
        }
        if let Some(a) = self.ablation {
            if (a.attn_qv || a.ffn || a.pe_conv) && !(a.encoder || a.decoder) {
                return fail("ablation enables adapter sites but neither encoder nor decoder".into());
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        let model = self.model();
        model.validate()?;
        for (i, t) in self.tasks.iter().enumerate() {
            if t.data.shape != model.patch_size {
                return fail(format!(
                    "task {i} volumes are {:?} but the model expects {:?}",
                    t.data.shape, model.patch_size
                ));
            }
            self.spec(TaskId(i as u32))?.validate()?;
            let (lo, hi) = t.data.band;
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return fail(format!("task {i} band ({lo}, {hi}) is not a sub-interval of [0, 1]"));
            }
            if t.data.samples < 2 {
                return fail(format!("task {i} needs at least two samples"));
            }
        }
        Ok(())
    }

    /// The model configuration with the ablation applied.
    pub fn model(&self) -> PvtConfig {
        let mut m = self.model.clone();
        if let Some(a) = self.ablation {
            m.lora.sites = a;
        }
        m
    }

    pub fn task_entry(&self, task: TaskId) -> Result<&TaskEntry> {
        match self.tasks.get(task.0 as usize) {
            Some(t) => Ok(t),
            None => bail!(loco_core::Error::Config(format!(
                "task {task} is not defined (the config lists {} tasks)",
                self.tasks.len()
            ))),
        }
    }

    pub fn spec(&self, task: TaskId) -> Result<TaskSpec> {
        let t = self.task_entry(task)?;
        Ok(TaskSpec {
            id: task,
            name: t.name.clone(),
            classes: t.data.organs.iter().map(|o| o.class.clone()).collect(),
            epochs: t.epochs,
            lr: t.lr,
            body_part_range: Some(t.data.band),
        })
    }

    pub fn specs(&self) -> Result<Vec<TaskSpec>> {
        (0..self.tasks.len()).map(|i| self.spec(TaskId(i as u32))).collect()
    }

    pub fn recipe(&self, task: TaskId) -> Result<Recipe> {
        let d = &self.task_entry(task)?.data;
        Ok(Recipe {
            task,
            shape: d.shape,
            spacing: d.spacing,
            band: d.band,
            organs: d.organs.clone(),
            samples: d.samples,
            noise: d.noise,
            seed: seed::derive(self.seeds.data, &format!("recipe{task}")),
        })
    }

    /// Training and held-out volumes of one task.
    pub fn data(&self, task: TaskId) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
        let all = synth::generate_dataset(&self.recipe(task)?)?;
        Ok(synth::split(&all, self.test_fraction, self.seeds.split))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = include_str!("../../../configs/desk.toml");

    #[test]
    fn desk_config_reproduces_the_library_sequence() {
        let cfg = RunConfig::parse(DESK).unwrap();
        assert_eq!(cfg.model(), PvtConfig::desk_shallow());
        let lib = loco_core::scenario::desk_tasks(cfg.seeds.data);
        for t in &lib {
            assert_eq!(cfg.recipe(t.spec.id).unwrap(), t.recipe);
            assert_eq!(cfg.spec(t.spec.id).unwrap(), t.spec);
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::parse(DESK).unwrap();
        assert_eq!(RunConfig::parse(&toml::to_string(&cfg).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let cfg = RunConfig::parse(DESK).unwrap();
        let mut no_tasks = cfg.clone();
        no_tasks.tasks.clear();
        assert!(no_tasks.validate().is_err());
        let mut no_scope = cfg.clone();
        no_scope.ablation = Some(LoraSites { encoder: false, decoder: false, ..LoraSites::full() });
        assert!(no_scope.validate().is_err());
        let mut shape = cfg;
        shape.tasks[1].data.shape = [16, 16, 16];
        assert!(shape.validate().is_err());
        assert!(RunConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn ablation_overrides_sites() {
        let mut cfg = RunConfig::parse(DESK).unwrap();
        cfg.ablation = Some(LoraSites::qv_ffn());
        assert_eq!(cfg.model().lora.sites, LoraSites::qv_ffn());
    }
}
