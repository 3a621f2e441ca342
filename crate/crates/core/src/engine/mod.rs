//! The continual protocol: train and freeze a base on task 0, then give each
//! later task its own adapters and head and train only those.

pub mod checkpoint;
pub mod pir;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore, TaskId};
use crate::pvt::{PvtConfig, PvtModel};
use crate::seed;
use crate::synth::VolumeSample;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use pir::{compute_pir, layout_pir, PirReport};

/// Smoothing constant of the soft-Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub name: String,
    pub classes: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    /// Normalized body-axis interval the task's anatomy occupies, if known.
    #[serde(default)]
    pub body_part_range: Option<(f64, f64)>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(format!("task {} declares no classes", self.id)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("task {} needs a positive learning rate", self.id)));
        }
        Ok(())
    }
}

/// How a continual task is adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adaptation {
    /// Adapters on every enabled site plus a new head.
    Lora,
    /// A new head on the frozen backbone, nothing else.
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub task: TaskId,
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Loss `0.5·(soft-Dice + BCE)` between head logits and a binary target.
pub fn loss(g: &mut Graph, logits: crate::autodiff::Var, target: &Tensor) -> Result<crate::autodiff::Var> {
    g.tape.seg_loss(logits, target, DICE_SMOOTH)
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: PvtModel,
    pub store: ParamStore,
    pub adamw: AdamWConfig,
    pub log: Vec<EpochLog>,
    seed: u64,
    base_checksum: Option<u64>,
}

impl ModelState {
    pub fn new(config: &PvtConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = PvtModel::build(config, &mut store, seed)?;
        Ok(Self {
            model,
            store,
            adamw: AdamWConfig::default(),
            log: Vec::new(),
            seed,
            base_checksum: None,
        })
    }

    pub fn config(&self) -> &PvtConfig {
        &self.model.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces the seed later task registrations derive from. Loading a
    /// checkpoint does not restore it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
    }

    /// Seed owned by one task, independent of the order tasks are trained in.
    pub fn task_seed(&self, task: TaskId) -> u64 {
        seed::derive(self.seed, &format!("task{task}"))
    }

    pub fn is_frozen(&self) -> bool {
        self.base_checksum.is_some()
    }

    pub fn base_checksum(&self) -> Option<u64> {
        self.base_checksum
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.model.tasks.keys().copied()
    }

    /// Recomputes the base checksum and compares it with the recorded one.
    pub fn verify_base(&self) -> Result<()> {
        let recorded = self
            .base_checksum
            .ok_or_else(|| Error::Contract("base has not been frozen".into()))?;
        let now = self.store.checksum(|g| g == ParamGroup::Base);
        if now != recorded {
            return Err(Error::Contract(format!(
                "base parameters changed after freezing ({recorded:#018x} -> {now:#018x})"
            )));
        }
        Ok(())
    }

    /// Trains every parameter on task 0, then freezes them.
    pub fn train_base(&mut self, spec: &TaskSpec, data: &[VolumeSample]) -> Result<()> {
        spec.validate()?;
        if self.is_frozen() {
            return Err(Error::Contract("train_base called on a frozen model".into()));
        }
        if spec.id != TaskId(0) {
            return Err(Error::Contract(format!("the base task must have id 0, got {}", spec.id)));
        }
        let seed = self.task_seed(spec.id);
        self.model.add_task(&mut self.store, spec.id, &spec.name, &spec.classes, false, seed)?;
        let ids = self.store.ids_in(|_| true);
        self.train(spec, data, &ids)?;
        self.freeze_base();
        Ok(())
    }

    /// Marks every current parameter frozen and records the base checksum.
    pub fn freeze_base(&mut self) {
        for id in self.store.ids_in(|_| true) {
            self.store.set_trainable(id, false);
        }
        self.base_checksum = Some(self.store.checksum(|g| g == ParamGroup::Base));
    }

    /// Registers a task without training it (for loading checkpoints and
    /// building fresh adapters for inspection).
    pub fn register_task(&mut self, spec: &TaskSpec, adaptation: Adaptation) -> Result<()> {
        spec.validate()?;
        if !self.is_frozen() {
            return Err(Error::Contract(format!("task {} added before the base was frozen", spec.id)));
        }
        if spec.id == TaskId(0) || self.model.tasks.contains_key(&spec.id) {
            return Err(Error::Conflict(format!("task {} is already part of the model", spec.id)));
        }
        let seed = self.task_seed(spec.id);
        let with_adapters = adaptation == Adaptation::Lora;
        self.model.add_task(&mut self.store, spec.id, &spec.name, &spec.classes, with_adapters, seed)
    }

    /// Adds and trains the parameters of one new task. Everything else stays
    /// bitwise unchanged; the optimizer is dropped at the end.
    pub fn continual_step(&mut self, spec: &TaskSpec, data: &[VolumeSample], adaptation: Adaptation) -> Result<()> {
        self.verify_base()?;
        self.register_task(spec, adaptation)?;
        let ids = self.task_params(spec.id);
        for &id in &ids {
            self.store.set_trainable(id, true);
        }
        let result = self.train(spec, data, &ids);
        for &id in &ids {
            self.store.set_trainable(id, false);
        }
        result?;
        self.verify_base()
    }

    /// Adapter and head parameters owned by `task`.
    pub fn task_params(&self, task: TaskId) -> Vec<ParamId> {
        self.store
            .ids_in(|g| matches!(g, ParamGroup::Adapter(t) | ParamGroup::Head(t) if t == task))
    }

    fn train(&mut self, spec: &TaskSpec, data: &[VolumeSample], ids: &[ParamId]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Contract(format!("task {} has no training samples", spec.id)));
        }
        let classes = spec.classes.len();
        for s in data {
            if s.labels.shape()[0] != classes {
                return Err(Error::dim(format!(
                    "task {} expects {classes} label channels, sample has {:?}",
                    spec.id,
                    s.labels.shape()
                )));
            }
        }
        let cfg = AdamWConfig { lr: spec.lr, ..self.adamw };
        let mut opt = AdamW::new(&self.store, ids, cfg)?;
        let mut rng = seed::rng(self.task_seed(spec.id), "order");
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..spec.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let (l, grads) = self.loss_and_grads(&data[i], spec.id)?;
                total += l;
                opt.step(&mut self.store, &grads)?;
            }
            self.log.push(EpochLog {
                task: spec.id,
                epoch,
                mean_loss: total / data.len() as f64,
            });
        }
        Ok(())
    }

    /// Loss on one sample and the gradients of every trainable parameter.
    pub fn loss_and_grads(&self, sample: &VolumeSample, task: TaskId) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let mut g = Graph::new(&self.store);
        let x = g.input(sample.image.clone());
        let logits = self.model.logits(&mut g, x, task)?;
        let l = loss(&mut g, logits, &sample.labels)?;
        g.tape.backward(l)?;
        let value = g.tape.value(l).item()?;
        Ok((value, g.param_grads()))
    }

    pub fn logits(&self, image: &Tensor, task: TaskId) -> Result<Tensor> {
        self.model.predict_logits(&self.store, image, task)
    }

    pub fn predict(&self, image: &Tensor, task: TaskId) -> Result<Tensor> {
        self.model.predict(&self.store, image, task)
    }

    /// Probabilities with the task's adapters bypassed.
    pub fn predict_without_adapters(&self, image: &Tensor, task: TaskId) -> Result<Tensor> {
        let mut g = Graph::frozen(&self.store);
        let x = g.input(image.clone());
        let t = self.model.trace(&mut g, x, task, false)?;
        Ok(g.tape.value(t.logits).map(crate::autodiff::sigmoid_scalar))
    }
}
