//! Patch-gather (im2col) kernels for 3D convolution, transposed convolution
//! and depthwise convolution. Volumes are `[C, S0, S1, S2]`, kernels
//! `[C_out, C_in, K0, K1, K2]`.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::linalg::{gemm, View};

/// Stride and zero padding per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dGeom {
    pub fn uniform(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// Output extents of a forward convolution, or an error naming the axis
    /// where the kernel exceeds the padded input.
    pub fn conv_output(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for ax in 0..3 {
            if self.stride[ax] == 0 {
                return Err(Error::Config("convolution stride must be positive".into()));
            }
            let padded = input[ax] + 2 * self.padding[ax];
            if padded < kernel[ax] {
                return Err(Error::dim(format!(
                    "kernel extent {} exceeds padded input extent {padded} on axis {ax} (input {input:?}, kernel {kernel:?})",
                    kernel[ax]
                )));
            }
            out[ax] = (padded - kernel[ax]) / self.stride[ax] + 1;
        }
        Ok(out)
    }

    /// Output extents of a transposed convolution: `(S - 1)·s - 2p + K`.
    pub fn transposed_output(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for ax in 0..3 {
            if self.stride[ax] == 0 {
                return Err(Error::Config("convolution stride must be positive".into()));
            }
            let full = (input[ax] - 1) * self.stride[ax] + kernel[ax];
            if full <= 2 * self.padding[ax] {
                return Err(Error::dim(format!(
                    "transposed convolution padding {:?} leaves no output on axis {ax}",
                    self.padding
                )));
            }
            out[ax] = full - 2 * self.padding[ax];
        }
        Ok(out)
    }

    fn is_pointwise(&self, kernel: [usize; 3]) -> bool {
        kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

pub(crate) fn spatial_volume(s: [usize; 3]) -> usize {
    s[0] * s[1] * s[2]
}

/// Range of output indices `o` for which tap `t` lands inside the input, with
/// the input index of the first one.
#[inline]
fn tap_range(t: usize, stride: usize, pad: usize, extent: usize, out_len: usize) -> (usize, usize) {
    let lo = if t >= pad { 0 } else { (pad - t).div_ceil(stride) };
    let hi = if extent + pad > t { ((extent + pad - 1 - t) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// Visits every kernel tap with the rows of output and input it connects.
/// `f(tap, out_offset, in_offset, len)` covers `len` voxels along the last
/// axis; consecutive outputs are one apart and inputs `stride[2]` apart.
fn visit_taps(
    input: [usize; 3],
    kernel: [usize; 3],
    geom: &Conv3dGeom,
    output: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let [s0, s1, s2] = geom.stride;
    let [p0, p1, p2] = geom.padding;
    for t0 in 0..kernel[0] {
        let (a0, b0) = tap_range(t0, s0, p0, input[0], output[0]);
        for t1 in 0..kernel[1] {
            let (a1, b1) = tap_range(t1, s1, p1, input[1], output[1]);
            for t2 in 0..kernel[2] {
                let (a2, b2) = tap_range(t2, s2, p2, input[2], output[2]);
                let tap = (t0 * kernel[1] + t1) * kernel[2] + t2;
                if a2 == b2 {
                    continue;
                }
                for o0 in a0..b0 {
                    let i0 = o0 * s0 + t0 - p0;
                    for o1 in a1..b1 {
                        let i1 = o1 * s1 + t1 - p1;
                        let out = (o0 * output[1] + o1) * output[2] + a2;
                        let inp = (i0 * input[1] + i1) * input[2] + a2 * s2 + t2 - p2;
                        f(tap, out, inp, b2 - a2);
                    }
                }
            }
        }
    }
}

/// Gathers patches into a `[C·K0·K1·K2, N_out]` matrix whose row order matches
/// a flattened `[C_in, K0, K1, K2]` kernel.
pub(crate) fn im2col<'a>(
    x: &'a [f64],
    channels: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    geom: &Conv3dGeom,
    output: [usize; 3],
) -> Cow<'a, [f64]> {
    if geom.is_pointwise(kernel) {
        return Cow::Borrowed(x);
    }
    let n_out = spatial_volume(output);
    let n_in = spatial_volume(input);
    let taps = spatial_volume(kernel);
    let s2 = geom.stride[2];
    let mut cols = vec![0.0; channels * taps * n_out];
    for c in 0..channels {
        let xc = &x[c * n_in..(c + 1) * n_in];
        let block = &mut cols[c * taps * n_out..(c + 1) * taps * n_out];
        visit_taps(input, kernel, geom, output, |tap, o, i, len| {
            let dst = &mut block[tap * n_out + o..tap * n_out + o + len];
            if s2 == 1 {
                dst.copy_from_slice(&xc[i..i + len]);
            } else {
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = xc[i + j * s2];
                }
            }
        });
    }
    Cow::Owned(cols)
}

/// Scatter-adds a `[C·K, N_out]` patch matrix back onto a `[C, input]` volume.
pub(crate) fn col2im(
    cols: &[f64],
    channels: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    geom: &Conv3dGeom,
    output: [usize; 3],
) -> Vec<f64> {
    if geom.is_pointwise(kernel) {
        return cols.to_vec();
    }
    let n_out = spatial_volume(output);
    let n_in = spatial_volume(input);
    let taps = spatial_volume(kernel);
    let s2 = geom.stride[2];
    let mut x = vec![0.0; channels * n_in];
    for c in 0..channels {
        let xc = &mut x[c * n_in..(c + 1) * n_in];
        let block = &cols[c * taps * n_out..(c + 1) * taps * n_out];
        visit_taps(input, kernel, geom, output, |tap, o, i, len| {
            let src = &block[tap * n_out + o..tap * n_out + o + len];
            if s2 == 1 {
                xc[i..i + len].iter_mut().zip(src).for_each(|(d, v)| *d += v);
            } else {
                for (j, v) in src.iter().enumerate() {
                    xc[i + j * s2] += v;
                }
            }
        });
    }
    x
}

/// Shapes shared by the convolution kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
}

impl ConvDims {
    fn patch_len(&self) -> usize {
        self.c_in * spatial_volume(self.kernel)
    }
}

pub(crate) fn conv_forward(x: &[f64], w: &[f64], d: &ConvDims, geom: &Conv3dGeom) -> Vec<f64> {
    let n_out = spatial_volume(d.output);
    let cols = im2col(x, d.c_in, d.input, d.kernel, geom, d.output);
    let mut out = vec![0.0; d.c_out * n_out];
    // out^T [N, Co] = cols^T [N, CK] · w^T [CK, Co]; the tall orientation keeps
    // the GEMM kernel busy when Co is small.
    gemm(
        n_out,
        d.patch_len(),
        d.c_out,
        &cols,
        View::Trans,
        w,
        View::Trans,
        0.0,
        &mut out,
        View::Trans,
    );
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub(crate) fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    geom: &Conv3dGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n_out = spatial_volume(d.output);
    let ck = d.patch_len();
    let dw = need_dw.then(|| {
        let cols = im2col(x, d.c_in, d.input, d.kernel, geom, d.output);
        let mut dw = vec![0.0; d.c_out * ck];
        gemm(d.c_out, n_out, ck, g, View::Normal, &cols, View::Trans, 0.0, &mut dw, View::Normal);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; ck * n_out];
        gemm(ck, d.c_out, n_out, w, View::Trans, g, View::Normal, 0.0, &mut dcols, View::Normal);
        col2im(&dcols, d.c_in, d.input, d.kernel, geom, d.output)
    });
    (dx, dw)
}

/// Transposed convolution. Here `d.input` is the deconvolution input grid and
/// `d.output` its (larger) output grid; the kernel is `[C_in, C_out, K...]`.
pub(crate) fn deconv_forward(x: &[f64], w: &[f64], d: &ConvDims, geom: &Conv3dGeom) -> Vec<f64> {
    let n_in = spatial_volume(d.input);
    let rows = d.c_out * spatial_volume(d.kernel);
    let mut cols = vec![0.0; rows * n_in];
    gemm(rows, d.c_in, n_in, w, View::Trans, x, View::Normal, 0.0, &mut cols, View::Normal);
    // The deconvolution output is the input space of the adjoint convolution.
    col2im(&cols, d.c_out, d.output, d.kernel, geom, d.input)
}

pub(crate) fn deconv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    geom: &Conv3dGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n_in = spatial_volume(d.input);
    let rows = d.c_out * spatial_volume(d.kernel);
    let gcols = im2col(g, d.c_out, d.output, d.kernel, geom, d.input);
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; d.c_in * n_in];
        gemm(d.c_in, rows, n_in, w, View::Normal, &gcols, View::Normal, 0.0, &mut dx, View::Normal);
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![0.0; d.c_in * rows];
        gemm(d.c_in, n_in, rows, x, View::Normal, &gcols, View::Trans, 0.0, &mut dw, View::Normal);
        dw
    });
    (dx, dw)
}

/// Per-channel convolution, stride 1, kernel `[C, 1, K0, K1, K2]`.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], d: &ConvDims, pad: [usize; 3]) -> Vec<f64> {
    let n_in = spatial_volume(d.input);
    let n_out = spatial_volume(d.output);
    let taps = spatial_volume(d.kernel);
    let geom = Conv3dGeom { stride: [1; 3], padding: pad };
    let mut out = vec![0.0; d.c_in * n_out];
    for c in 0..d.c_in {
        let xc = &x[c * n_in..(c + 1) * n_in];
        let wc = &w[c * taps..(c + 1) * taps];
        let oc = &mut out[c * n_out..(c + 1) * n_out];
        visit_taps(d.input, d.kernel, &geom, d.output, |t, o, i, len| {
            let wt = wc[t];
            oc[o..o + len].iter_mut().zip(&xc[i..i + len]).for_each(|(y, v)| *y += wt * v);
        });
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    pad: [usize; 3],
) -> (Vec<f64>, Vec<f64>) {
    let n_in = spatial_volume(d.input);
    let n_out = spatial_volume(d.output);
    let taps = spatial_volume(d.kernel);
    let geom = Conv3dGeom { stride: [1; 3], padding: pad };
    let mut dx = vec![0.0; d.c_in * n_in];
    let mut dw = vec![0.0; d.c_in * taps];
    for c in 0..d.c_in {
        let xc = &x[c * n_in..(c + 1) * n_in];
        let wc = &w[c * taps..(c + 1) * taps];
        let gc = &g[c * n_out..(c + 1) * n_out];
        let dxc = &mut dx[c * n_in..(c + 1) * n_in];
        let dwc = &mut dw[c * taps..(c + 1) * taps];
        visit_taps(d.input, d.kernel, &geom, d.output, |t, o, i, len| {
            let wt = wc[t];
            let go = &gc[o..o + len];
            dxc[i..i + len].iter_mut().zip(go).for_each(|(dv, gv)| *dv += wt * gv);
            dwc[t] += xc[i..i + len].iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
        });
    }
    (dx, dw)
}
