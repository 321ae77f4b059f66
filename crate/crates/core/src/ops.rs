//! Floating-point reference kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups,
        }
    }
}

/// Resolved extents of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }
}

pub(crate) fn conv_dims(
    op: &'static str,
    input: &[usize],
    weight: &[usize],
    geo: ConvGeometry,
) -> Result<ConvDims> {
    if input.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            dim: "input rank",
            expected: 4,
            actual: input.len(),
        });
    }
    if weight.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            dim: "weight rank",
            expected: 4,
            actual: weight.len(),
        });
    }
    if geo.groups == 0 || geo.stride == 0 {
        return Err(Error::invalid(op, "stride and groups must be positive"));
    }
    let [n, cin, h, w] = [input[0], input[1], input[2], input[3]];
    let [cout, cin_g, kh, kw] = [weight[0], weight[1], weight[2], weight[3]];
    if cin % geo.groups != 0 {
        return Err(Error::invalid(
            op,
            format!("input channels {cin} not divisible by groups {}", geo.groups),
        ));
    }
    if cout % geo.groups != 0 {
        return Err(Error::invalid(
            op,
            format!("output channels {cout} not divisible by groups {}", geo.groups),
        ));
    }
    if cin_g != cin / geo.groups {
        return Err(Error::ShapeMismatch {
            op,
            dim: "weight input channels (Cin/groups)",
            expected: cin / geo.groups,
            actual: cin_g,
        });
    }
    if h + 2 * geo.padding < kh {
        return Err(Error::ShapeMismatch {
            op,
            dim: "kernel height",
            expected: h + 2 * geo.padding,
            actual: kh,
        });
    }
    if w + 2 * geo.padding < kw {
        return Err(Error::ShapeMismatch {
            op,
            dim: "kernel width",
            expected: w + 2 * geo.padding,
            actual: kw,
        });
    }
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        kh,
        kw,
        oh: (h + 2 * geo.padding - kh) / geo.stride + 1,
        ow: (w + 2 * geo.padding - kw) / geo.stride + 1,
        groups: geo.groups,
        stride: geo.stride,
        pad: geo.padding,
    })
}

pub(crate) fn check_bias(op: &'static str, bias: Option<&[f32]>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != cout => Err(Error::ShapeMismatch {
            op,
            dim: "bias length",
            expected: cout,
            actual: b.len(),
        }),
        _ => Ok(()),
    }
}

/// Shared loop nest of the float and integer convolutions. `acc` is indexed
/// by output position; `mac(acc, x_index, w_index)` performs one
/// multiply-accumulate.
#[inline(always)]
pub(crate) fn conv_loops(d: &ConvDims, mut mac: impl FnMut(usize, usize, usize)) {
    let cout_g = d.cout / d.groups;
    for b in 0..d.n {
        for oc in 0..d.cout {
            let g = oc / cout_g;
            let out_base = ((b * d.cout) + oc) * d.oh * d.ow;
            for icg in 0..d.cin_g {
                let ic = g * d.cin_g + icg;
                let in_base = ((b * d.cin) + ic) * d.h * d.w;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let widx = ((oc * d.cin_g + icg) * d.kh + ky) * d.kw + kx;
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let row = in_base + iy as usize * d.w;
                            for ox in 0..d.ow {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                mac(out_base + oy * d.ow + ox, row + ix as usize, widx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over an NCHW batch with zero padding.
pub fn conv2d_f32(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    const OP: &str = "conv2d_f32";
    let d = conv_dims(OP, input.shape(), weight.shape(), geo)?;
    check_bias(OP, bias, d.cout)?;
    let x = input.as_f32()?;
    let w = weight.as_f32()?;
    let out = conv2d_raw(&d, x, w, bias);
    Tensor::from_f32(&d.out_shape(), out)
}

pub(crate) fn conv2d_raw(d: &ConvDims, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0f32; d.n * d.cout * d.oh * d.ow];
    conv_loops(d, |o, i, k| out[o] += x[i] * w[k]);
    if let Some(bias) = bias {
        let plane = d.oh * d.ow;
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = bias[idx % d.cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Per-channel batch normalization over axis 1 of a tensor of rank >= 2.
pub fn batchnorm_f32(
    x: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor> {
    const OP: &str = "batchnorm_f32";
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::invalid(OP, "input must have a channel axis"));
    }
    let c = shape[1];
    for (name, v) in [("mean", mean), ("variance", var), ("gamma", gamma), ("beta", beta)] {
        if v.len() != c {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: name,
                expected: c,
                actual: v.len(),
            });
        }
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(OP, format!("variance {v} is negative")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(OP, format!("eps {eps} must be positive")));
    }
    let plane: usize = shape[2..].iter().product();
    let data = x.as_f32()?;
    let mut out = Vec::with_capacity(data.len());
    for (idx, chunk) in data.chunks(plane.max(1)).enumerate() {
        let ch = idx % c;
        let inv = 1.0 / (var[ch] + eps).sqrt();
        out.extend(
            chunk
                .iter()
                .map(|&v| gamma[ch] * (v - mean[ch]) * inv + beta[ch]),
        );
    }
    Tensor::from_f32(shape, out)
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn relu6_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0));
}

/// L2-normalizes `v` in place; the zero vector is left as zeros.
pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        let inv = (1.0 / norm) as f32;
        v.iter_mut().for_each(|x| *x *= inv);
    }
}
