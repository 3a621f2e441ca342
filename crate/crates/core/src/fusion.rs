//! Inference-time merging of per-task predictions: body-axis estimation,
//! body-part masking and entropy-based ensembling of shared classes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{percentile, Mask};
use crate::params::TaskId;
use crate::synth::VolumeSample;
use crate::tensor::Tensor;

pub const PROFILE_BINS: usize = 64;
/// Lower and upper percentiles of the active range.
pub const PROFILE_PERCENTILES: (f64, f64) = (2.5, 97.5);
/// Active ranges narrower than this are widened around their centre.
pub const MIN_RANGE_WIDTH: f64 = 0.02;

/// Per-task probabilities for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub task: TaskId,
    pub class_names: Vec<String>,
    /// `[O, H, W, D]` with values in `[0, 1]`.
    pub probs: Tensor,
    pub spacing: [f64; 3],
    /// Axial slices removed by body-part masking; they take no part in the
    /// ensemble.
    pub masked_slices: BTreeSet<usize>,
}

impl PredictionMap {
    pub fn new(task: TaskId, class_names: Vec<String>, probs: Tensor, spacing: [f64; 3]) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 4 || s[0] != class_names.len() {
            return Err(Error::dim(format!(
                "task {task} names {} classes but the probabilities have shape {s:?}",
                class_names.len()
            )));
        }
        Ok(Self {
            task,
            class_names,
            probs,
            spacing,
            masked_slices: BTreeSet::new(),
        })
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }
}

/// Linear map from slice statistics `(mean, std, 1)` to a body-axis score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyAxisRegressor {
    pub coef: [f64; 3],
}

impl Default for BodyAxisRegressor {
    fn default() -> Self {
        Self { coef: [1.0, 0.0, 0.0] }
    }
}

fn slice_features(volume: &Tensor) -> Result<Vec<[f64; 3]>> {
    let s = volume.shape();
    if s.len() != 4 || s[3] == 0 || s[1] * s[2] == 0 {
        return Err(Error::dim(format!("body-axis estimation needs a non-empty [C, H, W, D] volume, got {s:?}")));
    }
    let d = s[3];
    let plane = s[1] * s[2];
    let x = &volume.data()[..plane * d];
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (z, &v) in row.iter().enumerate() {
            sum[z] += v;
            sq[z] += v * v;
        }
    }
    Ok((0..d)
        .map(|z| {
            let m = sum[z] / plane as f64;
            let var = (sq[z] / plane as f64 - m * m).max(0.0);
            [m, var.sqrt(), 1.0]
        })
        .collect())
}

impl BodyAxisRegressor {
    /// Least-squares fit against the normalized slice coordinate
    /// `(z + 0.5) / D` of volumes stored in canonical orientation.
    pub fn fit(volumes: &[&Tensor]) -> Result<Self> {
        let mut ata = [[0.0; 3]; 3];
        let mut atb = [0.0; 3];
        for v in volumes {
            let f = slice_features(v)?;
            let d = f.len() as f64;
            for (z, row) in f.iter().enumerate() {
                let y = (z as f64 + 0.5) / d;
                for i in 0..3 {
                    atb[i] += row[i] * y;
                    for j in 0..3 {
                        ata[i][j] += row[i] * row[j];
                    }
                }
            }
        }
        let coef = solve3(ata, atb).ok_or_else(|| {
            Error::Contract("body-axis features are collinear; cannot fit a regressor".into())
        })?;
        Ok(Self { coef })
    }

    /// Per-slice score in `[0, 1]`, monotone along the detected body
    /// direction. Flipping the volume flips the scores.
    pub fn estimate(&self, volume: &Tensor) -> Result<Vec<f64>> {
        let raw: Vec<f64> = slice_features(volume)?
            .iter()
            .map(|f| f.iter().zip(&self.coef).map(|(a, b)| a * b).sum())
            .collect();
        let n = raw.len() as f64;
        let mean_z = (n - 1.0) / 2.0;
        let mean_r = raw.iter().sum::<f64>() / n;
        let cov: f64 = raw.iter().enumerate().map(|(z, r)| (z as f64 - mean_z) * (r - mean_r)).sum();
        let mut out = if cov >= 0.0 {
            isotonic(&raw)
        } else {
            let rev: Vec<f64> = raw.iter().rev().copied().collect();
            let mut fit = isotonic(&rev);
            fit.reverse();
            fit
        };
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(out)
    }
}

pub fn estimate_body_axis(volume: &Tensor) -> Result<Vec<f64>> {
    BodyAxisRegressor::default().estimate(volume)
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() <= 1e-12 * scale.max(1e-300) {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for c in (0..3).rev() {
        let s: f64 = (c + 1..3).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Some(x)
}

/// Pool-adjacent-violators fit: the non-decreasing sequence closest to `y` in
/// least squares.
pub fn isotonic(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().expect("two blocks") = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(m, n)).collect()
}

/// Where along the body axis one task's anatomy appears.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyPartProfile {
    pub task: TaskId,
    /// Normalized histogram of foreground scores over `[0, 1]`.
    pub histogram: Vec<f64>,
    pub range: (f64, f64),
}

impl BodyPartProfile {
    /// A profile accepting every slice.
    pub fn full(task: TaskId) -> Self {
        Self {
            task,
            histogram: vec![1.0 / PROFILE_BINS as f64; PROFILE_BINS],
            range: (0.0, 1.0),
        }
    }

    pub fn contains(&self, score: f64) -> bool {
        self.range.0 <= score && score <= self.range.1
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "loco-profile 1").unwrap();
        writeln!(s, "task {}", self.task).unwrap();
        writeln!(s, "range {} {}", self.range.0, self.range.1).unwrap();
        writeln!(s, "bins {}", self.histogram.len()).unwrap();
        for v in &self.histogram {
            writeln!(s, "{v}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Parse { what: "body-part profile", msg };
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(format!("expected `{key}`, found `{line}`")));
            }
            Ok(parts.map(String::from).collect())
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        if field("loco-profile")? != ["1"] {
            return Err(bad("unsupported profile version".into()));
        }
        let task = field("task")?;
        let task = TaskId(
            task.first()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("task id is not an integer".into()))?,
        );
        let range = field("range")?;
        if range.len() != 2 {
            return Err(bad("range needs two numbers".into()));
        }
        let range = (num(&range[0])?, num(&range[1])?);
        let bins: usize = field("bins")?
            .first()
            .and_then(|b| b.parse().ok())
            .ok_or_else(|| bad("bin count is not an integer".into()))?;
        let histogram = lines.map(num).collect::<Result<Vec<f64>>>()?;
        if histogram.len() != bins {
            return Err(bad(format!("declared {bins} bins, found {}", histogram.len())));
        }
        if !(0.0 <= range.0 && range.0 < range.1 && range.1 <= 1.0) {
            return Err(bad(format!("range {range:?} is not inside [0, 1]")));
        }
        Ok(Self { task, histogram, range })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Averages per-volume histograms of the body-axis scores of foreground
/// voxels and cuts the active range at the 2.5th and 97.5th percentiles.
pub fn build_profile(task: TaskId, data: &[VolumeSample], regressor: &BodyAxisRegressor) -> Result<BodyPartProfile> {
    let mut histogram = vec![0.0; PROFILE_BINS];
    let mut pooled = Vec::new();
    let mut used = 0usize;
    for s in data {
        let scores = regressor.estimate(&s.image)?;
        let l = s.labels.shape();
        let d = l[3];
        if scores.len() != d {
            return Err(Error::dim(format!("labels {l:?} do not match image {:?}", s.image.shape())));
        }
        let mut per_slice = vec![0usize; d];
        for (i, &v) in s.labels.data().iter().enumerate() {
            if v > 0.5 {
                per_slice[i % d] += 1;
            }
        }
        let total: usize = per_slice.iter().sum();
        if total == 0 {
            continue;
        }
        used += 1;
        for (z, &c) in per_slice.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let bin = ((scores[z] * PROFILE_BINS as f64) as usize).min(PROFILE_BINS - 1);
            histogram[bin] += c as f64 / total as f64;
            pooled.extend(std::iter::repeat_n(scores[z], c));
        }
    }
    if used == 0 {
        return Err(Error::DegenerateProfile(format!(
            "task {task} has no foreground voxels in {} volumes",
            data.len()
        )));
    }
    histogram.iter_mut().for_each(|h| *h /= used as f64);
    let lo = percentile(&mut pooled, PROFILE_PERCENTILES.0);
    let hi = percentile(&mut pooled, PROFILE_PERCENTILES.1);
    Ok(BodyPartProfile {
        task,
        histogram,
        range: widen(lo, hi),
    })
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo >= MIN_RANGE_WIDTH {
        return (lo, hi);
    }
    let half = MIN_RANGE_WIDTH / 2.0;
    let c = (0.5 * (lo + hi)).clamp(half, 1.0 - half);
    (c - half, c + half)
}

/// Zeroes every slice whose score falls outside the profile's range and
/// records it as masked.
pub fn mask_out_of_range(pred: &PredictionMap, profile: &BodyPartProfile, scores: &[f64]) -> Result<PredictionMap> {
    let [_, _, d] = pred.spatial();
    if scores.len() != d {
        return Err(Error::dim(format!("{} axis scores for {d} slices", scores.len())));
    }
    let out_of_range: Vec<bool> = scores.iter().map(|&s| !profile.contains(s)).collect();
    let mut probs = pred.probs.clone();
    for row in probs.data_mut().chunks_exact_mut(d) {
        for (v, &off) in row.iter_mut().zip(&out_of_range) {
            if off {
                *v = 0.0;
            }
        }
    }
    let mut masked_slices = pred.masked_slices.clone();
    masked_slices.extend(out_of_range.iter().enumerate().filter(|(_, &o)| o).map(|(z, _)| z));
    Ok(PredictionMap {
        probs,
        masked_slices,
        ..pred.clone()
    })
}

/// Binary entropy in nats; 0 at `p ∈ {0, 1}`.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    h(p) + h(1.0 - p)
}

/// Whole-body segmentation assembled from every task's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSegmentation {
    pub classes: Vec<String>,
    pub masks: Vec<Mask>,
    /// Per class and voxel, the task whose value decided the voxel, or `None`
    /// where every claimant was masked.
    pub winners: Vec<Vec<Option<TaskId>>>,
}

impl FusedSegmentation {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// Unions the classes of all tasks. A class owned by one task is thresholded
/// at 0.5; for a shared class each voxel follows the claimant with the lowest
/// binary entropy, ties going to the lower task id.
pub fn entropy_ensemble(preds: &[PredictionMap]) -> Result<FusedSegmentation> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("entropy ensemble needs at least one prediction".into()))?;
    let shape = first.spatial();
    for p in preds {
        if p.spatial() != shape {
            return Err(Error::dim(format!(
                "task {} predicts {:?}, task {} predicts {shape:?}",
                p.task,
                p.spatial(),
                first.task
            )));
        }
    }
    let mut order: Vec<&PredictionMap> = preds.iter().collect();
    order.sort_by_key(|p| p.task);
    for w in order.windows(2) {
        if w[0].task == w[1].task {
            return Err(Error::Conflict(format!("task {} predicted twice", w[0].task)));
        }
    }
    let mut classes: Vec<String> = Vec::new();
    for p in &order {
        for c in &p.class_names {
            if !classes.contains(c) {
                classes.push(c.clone());
            }
        }
    }
    let [_, _, d] = shape;
    let n: usize = shape.iter().product();
    let mut masks = Vec::with_capacity(classes.len());
    let mut winners = Vec::with_capacity(classes.len());
    for class in &classes {
        let claimants: Vec<(&PredictionMap, &[f64])> = order
            .iter()
            .filter_map(|p| {
                let c = p.class_names.iter().position(|x| x == class)?;
                Some((*p, &p.probs.data()[c * n..(c + 1) * n]))
            })
            .collect();
        let mut data = vec![false; n];
        let mut win = vec![None; n];
        for v in 0..n {
            let z = v % d;
            let mut best: Option<(f64, TaskId, f64)> = None;
            for (p, probs) in &claimants {
                if claimants.len() > 1 && p.masked_slices.contains(&z) {
                    continue;
                }
                let pv = probs[v];
                let h = binary_entropy(pv);
                if best.is_none_or(|(bh, _, _)| h < bh) {
                    best = Some((h, p.task, pv));
                }
            }
            if let Some((_, t, pv)) = best {
                data[v] = pv > 0.5;
                win[v] = Some(t);
            }
        }
        masks.push(Mask::new(shape, data)?);
        winners.push(win);
    }
    Ok(FusedSegmentation { classes, masks, winners })
}
