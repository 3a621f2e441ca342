//! The desk-scale three-task sequence: recipes, task specs and budgets.

use crate::engine::TaskSpec;
use crate::error::Result;
use crate::synth::{self, Recipe, VolumeSample};

pub const SAMPLES_PER_TASK: usize = 50;
pub const TEST_FRACTION: f64 = 0.2;
pub const BASE_EPOCHS: usize = 10;
pub const CONTINUAL_EPOCHS: usize = 15;
pub const BASE_LR: f64 = 1e-3;
pub const CONTINUAL_LR: f64 = 3e-3;
pub const TASK_NAMES: [&str; 3] = ["abdomen", "thorax", "eso-tumor"];

#[derive(Clone, Debug, PartialEq)]
pub struct DeskTask {
    pub spec: TaskSpec,
    pub recipe: Recipe,
}

impl DeskTask {
    /// Generates the volumes and splits them into train and held-out sets.
    pub fn data(&self, split_seed: u64) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
        let all = synth::generate_dataset(&self.recipe)?;
        Ok(synth::split(&all, TEST_FRACTION, split_seed))
    }
}

pub fn desk_tasks(data_seed: u64) -> Vec<DeskTask> {
    synth::desk_sequence([32, 32, 16], SAMPLES_PER_TASK, data_seed)
        .into_iter()
        .zip(TASK_NAMES)
        .map(|(recipe, name)| {
            let base = recipe.task.0 == 0;
            DeskTask {
                spec: TaskSpec {
                    id: recipe.task,
                    name: name.into(),
                    classes: recipe.classes(),
                    epochs: if base { BASE_EPOCHS } else { CONTINUAL_EPOCHS },
                    lr: if base { BASE_LR } else { CONTINUAL_LR },
                    body_part_range: Some(recipe.band),
                },
                recipe,
            }
        })
        .collect()
}
