//! Overlap and surface-distance metrics on binary masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub shape: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(format!("mask of shape {shape:?} given {} voxels", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Channel `c` of a `[C, H, W, D]` tensor, thresholded at `> threshold`.
    pub fn from_channel(t: &Tensor, c: usize, threshold: f64) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || c >= s[0] {
            return Err(Error::dim(format!("channel {c} of tensor {s:?}")));
        }
        let n = s[1] * s[2] * s[3];
        let data = t.data()[c * n..(c + 1) * n].iter().map(|&v| v > threshold).collect();
        Ok(Self { shape: [s[1], s[2], s[3]], data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground voxels with at least one 6-neighbour outside the mask or
    /// outside the volume.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let [h, w, d] = self.shape;
        let at = |i: usize, j: usize, k: usize| self.data[(i * w + j) * d + k];
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    if !at(i, j, k) {
                        continue;
                    }
                    let edge = i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == d;
                    if edge
                        || !at(i - 1, j, k)
                        || !at(i + 1, j, k)
                        || !at(i, j - 1, k)
                        || !at(i, j + 1, k)
                        || !at(i, j, k - 1)
                        || !at(i, j, k + 1)
                    {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!("mask shapes differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Dice similarity `2|A∩B| / (|A| + |B|)`, defined as 1 when both are empty.
pub fn dsc(pred: &Mask, truth: &Mask) -> Result<f64> {
    same_shape(pred, truth)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        inter += usize::from(p && t);
        total += usize::from(p) + usize::from(t);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// 95th percentile (linear interpolation) of the pooled nearest distances
/// from each boundary to the other, in the units of `spacing`.
pub fn hd95(pred: &Mask, truth: &Mask, spacing: [f64; 3]) -> Result<f64> {
    same_shape(pred, truth)?;
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "HD95 needs two non-empty masks ({} and {} voxels)",
            pred.count(),
            truth.count()
        )));
    }
    let (bp, bt) = (pred.boundary(), truth.boundary());
    let to_t = squared_edt(truth.shape, &bt, spacing);
    let to_p = squared_edt(pred.shape, &bp, spacing);
    let [_, w, d] = pred.shape;
    let idx = |v: &[usize; 3]| (v[0] * w + v[1]) * d + v[2];
    let mut dists: Vec<f64> = bp
        .iter()
        .map(|v| to_t[idx(v)].sqrt())
        .chain(bt.iter().map(|v| to_p[idx(v)].sqrt()))
        .collect();
    Ok(percentile(&mut dists, 95.0))
}

/// Linear-interpolation percentile; sorts `v` in place.
pub fn percentile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Exact squared Euclidean distance from every voxel to the nearest seed,
/// with per-axis spacing, by three separable lower-envelope passes.
fn squared_edt(shape: [usize; 3], seeds: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = shape;
    let mut f = vec![f64::INFINITY; h * w * d];
    for s in seeds {
        f[(s[0] * w + s[1]) * d + s[2]] = 0.0;
    }
    let strides = [w * d, d, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in [2, 1, 0] {
        let len = shape[axis];
        let stride = strides[axis];
        let starts: Vec<usize> = (0..h * w * d).filter(|&i| (i / stride) % len == 0).collect();
        for s0 in starts {
            line.clear();
            line.extend((0..len).map(|t| f[s0 + t * stride]));
            envelope_1d(&line, spacing[axis], &mut out);
            for (t, &v) in out.iter().enumerate() {
                f[s0 + t * stride] = v;
            }
        }
    }
    f
}

/// `out[p] = min_q ((p - q)·s)² + f[q]`.
fn envelope_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let s2 = s * s;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let x = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if x <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let dq = (pf - v[k] as f64) * s;
        *o = dq * dq + f[v[k]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: [usize; 3], on: &[[usize; 3]]) -> Mask {
        let mut data = vec![false; shape.iter().product()];
        for v in on {
            data[(v[0] * shape[1] + v[1]) * shape[2] + v[2]] = true;
        }
        Mask::new(shape, data).unwrap()
    }

    #[test]
    fn dice_hand_cases() {
        let s = [4, 1, 1];
        let a = mask(s, &[[0, 0, 0], [1, 0, 0]]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(s, &[[2, 0, 0], [3, 0, 0]])).unwrap(), 0.0);
        let s = [8, 1, 1];
        let a = mask(s, &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let b = mask(s, &[[2, 0, 0], [3, 0, 0], [4, 0, 0], [5, 0, 0]]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&mask(s, &[]), &mask(s, &[])).unwrap(), 1.0);
    }

    #[test]
    fn offset_voxels_and_spacing() {
        let s = [8, 8, 8];
        let a = mask(s, &[[1, 1, 1]]);
        let b = mask(s, &[[4, 1, 1]]);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b, [2.0; 3]).unwrap(), 6.0);
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), 0.0);
        assert!(matches!(hd95(&a, &mask(s, &[]), [1.0; 3]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![0.0, 10.0];
        assert_eq!(percentile(&mut v, 95.0), 9.5);
    }
}
