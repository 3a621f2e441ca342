//! Slow, direct implementations used as test oracles: loop convolutions,
//! per-head attention, all-pairs HD95 and central finite differences.

use crate::autodiff::Conv3dGeom;
use crate::error::{Error, Result};
use crate::metrics::{percentile, Mask};
use crate::tensor::Tensor;

fn vol(t: &Tensor) -> (usize, [usize; 3]) {
    let s = t.shape();
    (s[0], [s[1], s[2], s[3]])
}

fn ker(t: &Tensor) -> (usize, usize, [usize; 3]) {
    let s = t.shape();
    (s[0], s[1], [s[2], s[3], s[4]])
}

fn at3(e: [usize; 3], c: usize, i: [usize; 3]) -> usize {
    ((c * e[0] + i[0]) * e[1] + i[1]) * e[2] + i[2]
}

/// Direct convolution, `x[C_in, S…]`, `w[C_out, C_in, K…]`.
pub fn conv3d(x: &Tensor, w: &Tensor, geom: Conv3dGeom) -> Result<Tensor> {
    let (ci, ie) = vol(x);
    let (co, wci, ke) = ker(w);
    if wci != ci {
        return Err(Error::dim("reference conv3d channel mismatch"));
    }
    let oe = geom.conv_output(ie, ke)?;
    let mut out = vec![0.0; co * oe.iter().product::<usize>()];
    for o in 0..co {
        for a in 0..oe[0] {
            for b in 0..oe[1] {
                for c in 0..oe[2] {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for p in 0..ke[0] {
                            for q in 0..ke[1] {
                                for r in 0..ke[2] {
                                    let src = [
                                        (a * geom.stride[0] + p) as isize - geom.padding[0] as isize,
                                        (b * geom.stride[1] + q) as isize - geom.padding[1] as isize,
                                        (c * geom.stride[2] + r) as isize - geom.padding[2] as isize,
                                    ];
                                    if (0..3).any(|ax| src[ax] < 0 || src[ax] >= ie[ax] as isize) {
                                        continue;
                                    }
                                    let s = [src[0] as usize, src[1] as usize, src[2] as usize];
                                    acc += x.data()[at3(ie, i, s)]
                                        * w.data()[((o * ci + i) * ke[0] + p) * ke[1] * ke[2] + q * ke[2] + r];
                                }
                            }
                        }
                    }
                    out[at3(oe, o, [a, b, c])] = acc;
                }
            }
        }
    }
    Tensor::new([co, oe[0], oe[1], oe[2]], out)
}

/// Direct transposed convolution without padding, `w[C_in, C_out, K…]`.
pub fn deconv3d(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let (ci, ie) = vol(x);
    let (wci, co, ke) = ker(w);
    if wci != ci {
        return Err(Error::dim("reference deconv3d channel mismatch"));
    }
    let oe = [0, 1, 2].map(|a| (ie[a] - 1) * stride + ke[a]);
    let mut out = vec![0.0; co * oe.iter().product::<usize>()];
    for i in 0..ci {
        for a in 0..ie[0] {
            for b in 0..ie[1] {
                for c in 0..ie[2] {
                    let xv = x.data()[at3(ie, i, [a, b, c])];
                    for o in 0..co {
                        for p in 0..ke[0] {
                            for q in 0..ke[1] {
                                for r in 0..ke[2] {
                                    let wv = w.data()[((i * co + o) * ke[0] + p) * ke[1] * ke[2] + q * ke[2] + r];
                                    out[at3(oe, o, [a * stride + p, b * stride + q, c * stride + r])] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([co, oe[0], oe[1], oe[2]], out)
}

/// Direct depthwise convolution with stride 1, `w[C, 1, K…]`.
pub fn depthwise3d(x: &Tensor, w: &Tensor, padding: usize) -> Result<Tensor> {
    let (c, e) = vol(x);
    let (_, _, ke) = ker(w);
    let mut parts = Vec::with_capacity(c);
    for ch in 0..c {
        let n: usize = e.iter().product();
        let xc = Tensor::new([1, e[0], e[1], e[2]], x.data()[ch * n..(ch + 1) * n].to_vec())?;
        let kn: usize = ke.iter().product();
        let wc = Tensor::new([1, 1, ke[0], ke[1], ke[2]], w.data()[ch * kn..(ch + 1) * kn].to_vec())?;
        parts.push(conv3d(&xc, &wc, Conv3dGeom::uniform(1, padding))?);
    }
    let oe = vol(&parts[0]).1;
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new([c, oe[0], oe[1], oe[2]], data)
}

/// Scaled dot-product attention computed head by head with explicit loops;
/// `q[Nq, C]`, `k[Nk, C]`, `v[Nk, C]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (nq, c) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config("reference attention head split".into()));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * c];
    for h in 0..heads {
        for i in 0..nq {
            let scores: Vec<f64> = (0..nk)
                .map(|j| (0..dh).map(|t| q.data()[i * c + h * dh + t] * k.data()[j * c + h * dh + t]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                out[i * c + h * dh + t] = (0..nk).map(|j| e[j] / z * v.data()[j * c + h * dh + t]).sum();
            }
        }
    }
    Tensor::new([nq, c], out)
}

/// HD95 from every boundary voxel of each mask to every boundary voxel of
/// the other.
pub fn hd95_brute(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("empty mask".into()));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| {
        set.iter()
            .map(|q| {
                (0..3)
                    .map(|ax| {
                        let d = (p[ax] as f64 - q[ax] as f64) * spacing[ax];
                        d * d
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let mut d: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).chain(bb.iter().map(|p| nearest(p, &ba))).collect();
    Ok(percentile(&mut d, 95.0))
}

/// Central difference of `f` at `x` along the flat coordinates `indices`.
pub fn finite_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, indices: &[usize], h: f64) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over whole vectors.
pub fn rel_err_vec(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(floor)
}

/// Compares tape gradients of `Σ w ⊙ op(inputs)` against central differences,
/// for a fixed random weighting `w`. Returns the worst relative error over
/// the inputs.
pub fn op_gradient_error(
    inputs: &[Tensor],
    op: impl Fn(&mut crate::autodiff::Tape, &[crate::autodiff::Var]) -> Result<crate::autodiff::Var>,
    seed: u64,
) -> Result<f64> {
    use crate::autodiff::Tape;
    let eval = |xs: &[Tensor], w: Option<&Tensor>| -> Result<(f64, Vec<Tensor>, Tensor)> {
        let mut t = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let y = op(&mut t, &vars)?;
        let w = match w {
            Some(w) => w.clone(),
            None => Tensor::randn(t.shape(y).to_vec(), 1.0, &mut crate::seed::rng(seed, "weights"))?,
        };
        let wv = t.constant(w.clone());
        let prod = t.mul(y, wv)?;
        let l = t.sum(prod);
        t.backward(l)?;
        let grads = vars.iter().map(|&v| t.grad(v).expect("leaf requires grad")).collect();
        Ok((t.value(l).item()?, grads, w))
    };
    let (_, grads, w) = eval(inputs, None)?;
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let idx: Vec<usize> = (0..inputs[k].numel()).collect();
        let numeric = finite_difference(
            |x| {
                let mut xs = inputs.to_vec();
                xs[k] = x.clone();
                eval(&xs, Some(&w)).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &inputs[k],
            &idx,
            1e-5,
        );
        worst = worst.max(rel_err_vec(g.data(), &numeric, 1e-8));
    }
    Ok(worst)
}

/// Analytic and central-difference derivatives of the training loss of
/// `state` on `sample` with respect to single entries of trainable
/// parameters.
pub fn model_gradient_pairs(
    state: &crate::engine::ModelState,
    sample: &crate::synth::VolumeSample,
    task: crate::params::TaskId,
    picks: &[(crate::params::ParamId, usize)],
    h: f64,
) -> Result<Vec<(f64, f64)>> {
    let (_, grads) = state.loss_and_grads(sample, task)?;
    let mut out = Vec::with_capacity(picks.len());
    for &(id, i) in picks {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.data()[i])
            .ok_or_else(|| Error::Contract(format!("`{}` is not trainable", state.store.get(id).name)))?;
        let mut probe = state.clone();
        let base = state.store.value(id).clone();
        let mut at = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v.data_mut()[i] += delta;
            probe.store.update(id, v)?;
            Ok(probe.loss_and_grads(sample, task)?.0)
        };
        let numeric = (at(h)? - at(-h)?) / (2.0 * h);
        out.push((analytic, numeric));
    }
    Ok(out)
}
