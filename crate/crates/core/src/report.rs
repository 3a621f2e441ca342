//! Held-out evaluation and the results table: per-dataset and all-class mean
//! DSC and HD95 plus the parameter increasing rate.

use std::fmt::Write as _;

use crate::engine::ModelState;
use crate::error::{Error, Result};
use crate::fusion::{entropy_ensemble, mask_out_of_range, BodyAxisRegressor, BodyPartProfile, FusedSegmentation, PredictionMap};
use crate::metrics::{dsc, hd95, Mask};
use crate::params::TaskId;
use crate::synth::VolumeSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class: String,
    /// Mean over volumes.
    pub dsc: f64,
    /// Mean over the volumes where HD95 is defined.
    pub hd95: Option<f64>,
    /// Volumes where HD95 was undefined because a mask was empty.
    pub hd95_missing: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetScore {
    pub task: TaskId,
    pub name: String,
    pub classes: Vec<ClassScore>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl DatasetScore {
    pub fn mean_dsc(&self) -> f64 {
        mean(self.classes.iter().map(|c| c.dsc)).unwrap_or(0.0)
    }

    pub fn mean_hd95(&self) -> Option<f64> {
        mean(self.classes.iter().filter_map(|c| c.hd95))
    }
}

/// Scores predicted masks against labels. `preds[k][c]` is the mask of class
/// `c` on volume `k`.
pub fn score_masks(task: TaskId, name: &str, classes: &[String], preds: &[Vec<Mask>], data: &[VolumeSample]) -> Result<DatasetScore> {
    if preds.len() != data.len() {
        return Err(Error::dim(format!("{} predictions for {} volumes", preds.len(), data.len())));
    }
    let mut out = Vec::with_capacity(classes.len());
    for (c, class) in classes.iter().enumerate() {
        let mut d = Vec::new();
        let mut h = Vec::new();
        let mut missing = 0;
        for (p, s) in preds.iter().zip(data) {
            let truth = Mask::from_channel(&s.labels, c, 0.5)?;
            let pred = p.get(c).ok_or_else(|| Error::dim(format!("no prediction for class `{class}`")))?;
            d.push(dsc(pred, &truth)?);
            match hd95(pred, &truth, s.spacing) {
                Ok(v) => h.push(v),
                Err(Error::UndefinedMetric(_)) => missing += 1,
                Err(e) => return Err(e),
            }
        }
        out.push(ClassScore {
            class: class.clone(),
            dsc: mean(d.into_iter()).unwrap_or(0.0),
            hd95: mean(h.into_iter()),
            hd95_missing: missing,
        });
    }
    Ok(DatasetScore {
        task,
        name: name.into(),
        classes: out,
    })
}

fn threshold(probs: &Tensor) -> Result<Vec<Mask>> {
    (0..probs.shape()[0]).map(|c| Mask::from_channel(probs, c, 0.5)).collect()
}

/// Scores one task's own head on its held-out volumes.
pub fn evaluate_task(state: &ModelState, task: TaskId, data: &[VolumeSample]) -> Result<DatasetScore> {
    let head = state.model.task(task)?;
    let preds = data
        .iter()
        .map(|s| threshold(&state.predict(&s.image, task)?))
        .collect::<Result<Vec<_>>>()?;
    score_masks(task, &head.name, &head.classes.clone(), &preds, data)
}

/// Runs every task on one volume, masks each prediction to its body-part
/// range when profiles are given, and fuses the result.
pub fn infer_fused(
    state: &ModelState,
    image: &Tensor,
    spacing: [f64; 3],
    profiles: Option<(&[BodyPartProfile], &BodyAxisRegressor)>,
) -> Result<FusedSegmentation> {
    let scores = match profiles {
        Some((_, reg)) => Some(reg.estimate(image)?),
        None => None,
    };
    let mut preds = Vec::new();
    for t in state.tasks() {
        let head = state.model.task(t)?;
        let mut p = PredictionMap::new(t, head.classes.clone(), state.predict(image, t)?, spacing)?;
        if let (Some((profiles, _)), Some(scores)) = (profiles, &scores) {
            if let Some(profile) = profiles.iter().find(|p| p.task == t) {
                p = mask_out_of_range(&p, profile, scores)?;
            }
        }
        preds.push(p);
    }
    entropy_ensemble(&preds)
}

/// Scores the fused whole-body output on one task's held-out volumes, looking
/// classes up by name.
pub fn evaluate_fused(
    state: &ModelState,
    task: TaskId,
    data: &[VolumeSample],
    profiles: Option<(&[BodyPartProfile], &BodyAxisRegressor)>,
) -> Result<DatasetScore> {
    let head = state.model.task(task)?;
    let classes = head.classes.clone();
    let mut preds = Vec::with_capacity(data.len());
    for s in data {
        let fused = infer_fused(state, &s.image, s.spacing, profiles)?;
        let masks = classes
            .iter()
            .map(|c| {
                fused
                    .class_index(c)
                    .map(|i| fused.masks[i].clone())
                    .ok_or_else(|| Error::Contract(format!("fused output lacks class `{c}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        preds.push(masks);
    }
    score_masks(task, &head.name, &classes, &preds, data)
}

/// One method or run in the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub datasets: Vec<DatasetScore>,
    /// Cumulative parameter increasing rate in percent.
    pub pir: Option<f64>,
}

impl ReportRow {
    /// Mean DSC over every class of every dataset, so larger datasets weigh
    /// by their class count.
    pub fn all_dsc(&self) -> f64 {
        mean(self.datasets.iter().flat_map(|d| d.classes.iter().map(|c| c.dsc))).unwrap_or(0.0)
    }

    pub fn all_hd95(&self) -> Option<f64> {
        mean(self.datasets.iter().flat_map(|d| d.classes.iter().filter_map(|c| c.hd95)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

impl Report {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["Method".to_string()];
        if let Some(r) = self.rows.first() {
            for d in &r.datasets {
                h.push(format!("{} DSC", d.name));
                h.push(format!("{} HD95", d.name));
            }
        }
        h.extend(["All DSC".into(), "All HD95".into(), "PIR".into()]);
        h
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut c = vec![r.method.clone()];
                for d in &r.datasets {
                    c.push(format!("{:.2}", 100.0 * d.mean_dsc()));
                    c.push(fmt_opt(d.mean_hd95()));
                }
                c.push(format!("{:.2}", 100.0 * r.all_dsc()));
                c.push(fmt_opt(r.all_hd95()));
                c.push(fmt_opt(r.pir));
                c
            })
            .collect()
    }

    /// DSC in percent, HD95 in millimetres, PIR in percent.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let cells = self.cells();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| cells.iter().map(|r| r.get(i).map_or(0, String::len)).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in std::iter::once(&header).chain(&cells) {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { format!("{v:<w$}", w = widths[i]) } else { format!("{v:>w$}", w = widths[i]) })
                .collect();
            writeln!(s, "{}", line.join("  ").trim_end()).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", self.header().join(",")).unwrap();
        for row in self.cells() {
            let row: Vec<String> = row.into_iter().map(|v| if v == "-" { String::new() } else { v }).collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        s
    }
}
