//! Forward rules. Each method validates shapes, computes the output and
//! records the op on the tape.

use super::conv::{self, ConvDims, Conv3dGeom};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{matmul_new, View};
use crate::tensor::{numel_of, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride in the input for a unit step along each output axis.
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok((
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    ))
}

fn volume_dims(shape: &[usize], what: &str) -> Result<(usize, [usize; 3])> {
    match shape {
        &[c, s0, s1, s2] => Ok((c, [s0, s1, s2])),
        _ => Err(Error::dim(format!(
            "{what} must be a [C, S0, S1, S2] volume, got {shape:?}"
        ))),
    }
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match shape {
        &[a, b, k0, k1, k2] => Ok((a, b, [k0, k1, k2])),
        _ => Err(Error::dim(format!(
            "kernel must be [C_a, C_b, K0, K1, K2], got {shape:?}"
        ))),
    }
}

/// Soft-Dice + BCE terms of a logit volume `[O, ...]` against a binary target.
pub(crate) struct SegLossParts {
    pub dice: f64,
    pub bce: f64,
}

pub(crate) fn seg_loss_parts(logits: &Tensor, target: &Tensor, smooth: f64) -> SegLossParts {
    let o = logits.shape()[0];
    let v = logits.numel() / o;
    let (z, t) = (logits.data(), target.data());
    let mut dice = 0.0;
    let mut bce = 0.0;
    for c in 0..o {
        let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
        for i in c * v..(c + 1) * v {
            let p = sigmoid(z[i]);
            inter += p * t[i];
            psum += p;
            tsum += t[i];
            bce += softplus(z[i]) - t[i] * z[i];
        }
        dice += 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
    }
    SegLossParts {
        dice: dice / o as f64,
        bce: bce / (o * v) as f64,
    }
}

/// Gradient of `0.5·(dice + bce)` with respect to the logits.
pub(crate) fn seg_loss_grad(logits: &Tensor, target: &Tensor, smooth: f64) -> Vec<f64> {
    let o = logits.shape()[0];
    let v = logits.numel() / o;
    let (z, t) = (logits.data(), target.data());
    let p: Vec<f64> = z.iter().map(|&x| sigmoid(x)).collect();
    let mut grad = vec![0.0; z.len()];
    let n_total = (o * v) as f64;
    for c in 0..o {
        let range = c * v..(c + 1) * v;
        let inter: f64 = range.clone().map(|i| p[i] * t[i]).sum();
        let psum: f64 = p[range.clone()].iter().sum();
        let tsum: f64 = t[range.clone()].iter().sum();
        let denom = psum + tsum + smooth;
        let numer = 2.0 * inter + smooth;
        for i in range {
            let d_dice_dp = -(2.0 * t[i] * denom - numer) / (denom * denom);
            let dice_term = d_dice_dp * p[i] * (1.0 - p[i]) / o as f64;
            let bce_term = (p[i] - t[i]) / n_total;
            grad[i] = 0.5 * (dice_term + bce_term);
        }
    }
    grad
}

impl Tape {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!("{what} must be a matrix, got {s:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_new(m, k, n, self.value(a).data(), View::Normal, self.value(b).data(), View::Normal);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a linear layer applied to row tokens.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt lhs")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt inner extents differ: {:?} x {:?}^T",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_new(m, k, n, self.value(a).data(), View::Normal, self.value(b).data(), View::Trans);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a: a.0, b: b.0, m, k, n }))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale { a: a.0, s })
    }

    /// Adds a vector `b` of length `shape[axis]` broadcast along every other axis.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if self.shape(b) != [len] {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match axis {axis} of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for (l, &bl) in bv.iter().enumerate() {
                let s = (o * len + l) * inner;
                data[s..s + inner].iter_mut().for_each(|v| *v += bl);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias { x: x.0, b: b.0, outer, len, inner }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x: x.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { x: x.0 }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "{perm:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { x: x.0, perm: perm.to_vec() }))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims(x, "transpose")?;
        self.permute(x, &[1, 0])
    }

    /// `width` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if width == 0 || start + width > len {
            return Err(Error::dim(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + width,
                self.shape(x)
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let s = (o * len + start) * inner;
            data.extend_from_slice(&src[s..s + width * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = width;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { x: x.0, outer, len, inner, start, width },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let ref_shape = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis(&ref_shape, axis)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == ref_shape.len()
                && s.iter().zip(&ref_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {s:?} incompatible with {ref_shape:?}"
                )));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let parts = xs.iter().map(|v| v.0).zip(widths).collect();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { xs: parts, outer, inner, total },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + j;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    data[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[idx(l)] /= total;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x: x.0, outer, len, inner }))
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::dim("layernorm of a scalar"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim(format!(
                "layernorm gain {:?} / bias {:?} must both be [{c}]",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std, c },
        ))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid { x: x.0 })
    }

    /// 3D convolution of `x[C_in, S…]` with `kernel[C_out, C_in, K…]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, geom: Conv3dGeom) -> Result<Var> {
        let (c_in, input) = volume_dims(self.shape(x), "conv3d input")?;
        let (c_out, kc_in, kernel_ext) = kernel_dims(self.shape(kernel))?;
        if kc_in != c_in {
            return Err(Error::dim(format!(
                "conv3d kernel {:?} expects {kc_in} input channels, input {:?} has {c_in}",
                self.shape(kernel),
                self.shape(x)
            )));
        }
        let output = geom.conv_output(input, kernel_ext)?;
        let dims = ConvDims { c_in, c_out, input, kernel: kernel_ext, output };
        let out = conv::conv_forward(self.value(x).data(), self.value(kernel).data(), &dims, &geom);
        let shape = vec![c_out, output[0], output[1], output[2]];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv3d { x: x.0, w: kernel.0, dims, geom }))
    }

    /// Transposed 3D convolution, no padding: output extent `(S-1)·stride + K`.
    /// The kernel is `[C_in, C_out, K…]`, so the kernel of a forward conv can be
    /// reused to map back to its input channel count.
    pub fn deconv3d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (c_in, input) = volume_dims(self.shape(x), "deconv3d input")?;
        let (kc_in, c_out, kernel_ext) = kernel_dims(self.shape(kernel))?;
        if kc_in != c_in {
            return Err(Error::dim(format!(
                "deconv3d kernel {:?} expects {kc_in} input channels, input {:?} has {c_in}",
                self.shape(kernel),
                self.shape(x)
            )));
        }
        let geom = Conv3dGeom::uniform(stride, 0);
        let output = geom.transposed_output(input, kernel_ext)?;
        let dims = ConvDims { c_in, c_out, input, kernel: kernel_ext, output };
        let out = conv::deconv_forward(self.value(x).data(), self.value(kernel).data(), &dims, &geom);
        let shape = vec![c_out, output[0], output[1], output[2]];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Deconv3d { x: x.0, w: kernel.0, dims, geom }))
    }

    /// Per-channel convolution, stride 1, with kernel `[C, 1, K…]`.
    pub fn depthwise_conv3d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (c, input) = volume_dims(self.shape(x), "depthwise input")?;
        let (kc, one, kernel_ext) = kernel_dims(self.shape(kernel))?;
        if kc != c || one != 1 {
            return Err(Error::dim(format!(
                "depthwise kernel {:?} does not match input {:?}",
                self.shape(kernel),
                self.shape(x)
            )));
        }
        let pad = [padding; 3];
        let output = Conv3dGeom { stride: [1; 3], padding: pad }.conv_output(input, kernel_ext)?;
        let dims = ConvDims { c_in: c, c_out: c, input, kernel: kernel_ext, output };
        let out = conv::depthwise_forward(self.value(x).data(), self.value(kernel).data(), &dims, pad);
        let shape = vec![c, output[0], output[1], output[2]];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Depthwise3d { x: x.0, w: kernel.0, dims, pad }))
    }

    /// `0.5·(soft-Dice + BCE)` of sigmoid(logits) against a binary target of
    /// the same `[O, …]` shape. Dice is averaged over the leading channel axis.
    pub fn seg_loss(&mut self, logits: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::dim(format!(
                "loss: prediction {:?} vs target {:?}",
                self.shape(logits),
                target.shape()
            )));
        }
        if self.shape(logits).is_empty() {
            return Err(Error::dim("loss needs a leading class axis"));
        }
        let parts = seg_loss_parts(self.value(logits), target, smooth);
        let value = Tensor::scalar(0.5 * (parts.dice + parts.bce));
        Ok(self.push(
            value,
            Op::SegLoss { logits: logits.0, target: target.clone(), smooth },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        t.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap(), true)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2).unwrap());
        let m = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = leaf(&mut t, &[1, 2], &[1.0, 2.0]);
        let b = leaf(&mut t, &[2, 1], &[3.0, 4.0]);
        let d = t.matmul(a, b).unwrap();
        assert_eq!(t.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]).unwrap());
        let b = t.constant(Tensor::zeros([2, 3]).unwrap());
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([4], 3.0).unwrap());
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.25; 4]);
        assert!(matches!(t.softmax(x, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).item().unwrap(), 0.5);
        assert!(sigmoid(-30.0) > 0.0 && sigmoid(30.0) < 1.0);
    }

    #[test]
    fn layernorm_moments() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([3, 5], |i| (i as f64 * 1.3).sin() * 4.0 + 1.0).unwrap());
        let g = t.constant(Tensor::ones([5]).unwrap());
        let b = t.constant(Tensor::zeros([5]).unwrap());
        let y = t.layernorm(x, g, b, 1e-300).unwrap();
        for row in t.value(y).data().chunks(5) {
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert!(t.layernorm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([2, 3, 4], |i| i as f64).unwrap());
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        assert_eq!(t.value(p).at(&[3, 1, 2]), t.value(x).at(&[1, 2, 3]));
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert!(t.value(back).bit_eq(t.value(x)));
        assert!(t.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn slice_and_concat_invert() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([3, 6], |i| i as f64).unwrap());
        let a = t.slice(x, 1, 0, 2).unwrap();
        let b = t.slice(x, 1, 2, 4).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert!(t.value(c).bit_eq(t.value(x)));
        assert!(t.slice(x, 1, 5, 2).is_err());
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones([1, 2, 2, 2]).unwrap());
        let k = t.constant(Tensor::ones([1, 1, 1, 1, 1]).unwrap());
        let y = t.conv3d(x, k, Conv3dGeom::uniform(1, 0)).unwrap();
        assert!(t.value(y).bit_eq(t.value(x)));
    }

    #[test]
    fn strided_conv_and_deconv_shapes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones([1, 4, 4, 4]).unwrap());
        let k = t.constant(Tensor::ones([3, 1, 2, 2, 2]).unwrap());
        let y = t.conv3d(x, k, Conv3dGeom::uniform(2, 0)).unwrap();
        assert_eq!(t.shape(y), &[3, 2, 2, 2]);
        // the same kernel maps the 3 channels back to 1 at the original extent
        let z = t.deconv3d(y, k, 2).unwrap();
        assert_eq!(t.shape(z), &[1, 4, 4, 4]);

        let small = t.constant(Tensor::ones([1, 2, 2, 2]).unwrap());
        let up = t.constant(Tensor::ones([1, 1, 2, 2, 2]).unwrap());
        let u = t.deconv3d(small, up, 2).unwrap();
        assert_eq!(t.shape(u), &[1, 4, 4, 4]);
    }

    #[test]
    fn conv_kernel_larger_than_input_is_a_dimension_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones([1, 2, 2, 2]).unwrap());
        let k = t.constant(Tensor::ones([1, 1, 3, 3, 3]).unwrap());
        assert!(matches!(t.conv3d(x, k, Conv3dGeom::uniform(1, 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1.0, -2.0, 5.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 3]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0; 3]);
        t.zero_grad();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn detached_loss_leaves_zero_grad() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let y = t.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn bce_of_half_on_balanced_target_is_ln2() {
        let logits = Tensor::zeros([1, 4]).unwrap();
        let target = Tensor::new([1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let parts = seg_loss_parts(&logits, &target, 1.0);
        assert!((parts.bce - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
