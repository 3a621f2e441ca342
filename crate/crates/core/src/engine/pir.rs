//! Parameter increasing rate: parameters added by continual tasks relative to
//! the frozen base.

use super::ModelState;
use crate::params::{ParamGroup, TaskId};
use crate::pvt::{layout, PvtConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBudget {
    pub task: TaskId,
    pub adapter_params: usize,
    pub head_params: usize,
    /// `(adapter + head) / base`, in percent.
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PirReport {
    /// Backbone plus the task-0 head.
    pub base_params: usize,
    pub tasks: Vec<TaskBudget>,
    /// Sum of the per-task percentages.
    pub cumulative_percent: f64,
}

impl PirReport {
    fn from_counts(base: usize, counts: Vec<(TaskId, usize, usize)>) -> Self {
        let tasks: Vec<TaskBudget> = counts
            .into_iter()
            .map(|(task, adapter_params, head_params)| TaskBudget {
                task,
                adapter_params,
                head_params,
                percent: 100.0 * (adapter_params + head_params) as f64 / base as f64,
            })
            .collect();
        let cumulative_percent = tasks.iter().map(|t| t.percent).sum();
        Self {
            base_params: base,
            tasks,
            cumulative_percent,
        }
    }

    pub fn added_params(&self) -> usize {
        self.tasks.iter().map(|t| t.adapter_params + t.head_params).sum()
    }
}

/// Budget of the parameters actually present in a model.
pub fn compute_pir(state: &ModelState) -> PirReport {
    let s = &state.store;
    let base = s.count(|g| g == ParamGroup::Base);
    let counts = state
        .tasks()
        .filter(|&t| t != TaskId(0))
        .map(|t| (t, s.count(|g| g == ParamGroup::Adapter(t)), s.count(|g| g == ParamGroup::Head(t))))
        .collect();
    PirReport::from_counts(base, counts)
}

/// Budget derived from a config and task class counts without building the
/// model. `tasks[0]` is the base task.
pub fn layout_pir(cfg: &PvtConfig, tasks: &[(TaskId, usize)]) -> PirReport {
    let mut base = layout::count(&layout::backbone(cfg));
    let mut counts = Vec::new();
    for &(t, classes) in tasks {
        let head = layout::count(&layout::head(cfg, t, classes));
        if t == TaskId(0) {
            base += head;
        } else {
            counts.push((t, layout::count(&layout::adapters(cfg, t)), head));
        }
    }
    PirReport::from_counts(base, counts)
}
