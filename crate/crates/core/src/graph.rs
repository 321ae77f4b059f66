//! Layer graphs and their forward execution.
//!
//! A graph is an ordered list of layers; each layer consumes the previous
//! layer's output, except `ResidualAdd`, which also reads the output of an
//! earlier layer. Exactly one pooling head turns the final feature map into a
//! vector, an optional `Linear` projects it, and the result is L2-normalized.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::f16::round_f16;
use crate::ops::{conv2d_raw, conv_dims, l2_normalize, relu6_inplace, relu_inplace, ConvGeometry};
use crate::pooling::{linear_raw, PoolingHead, PoolingKind};
use crate::precision::{Precision, PrecisionConfig};
use crate::quant::kernel::{dequantize_acc, qconv_acc, quantize_activation};
use crate::quant::params::QuantParams;
use crate::tensor::{DType, Tensor};

/// Activations feeding integer layers are quantized to this many bits.
pub const ACTIVATION_BITS: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    F32(Tensor),
    /// Half precision storage, widened per element for arithmetic.
    F16(Tensor),
    /// Integer values (`I8` or `I4Packed`) with per-channel scales.
    Quantized { values: Tensor, params: QuantParams },
}

impl Weight {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weight::F32(t) | Weight::F16(t) => t.shape(),
            Weight::Quantized { values, .. } => values.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// `None` for full precision weights.
    pub fn precision(&self) -> Option<Precision> {
        match self {
            Weight::F32(_) => None,
            Weight::F16(_) => Some(Precision::Fp16),
            Weight::Quantized { params, .. } => Precision::from_bits(params.bits),
        }
    }

    /// Effective f32 values (widened or dequantized).
    pub fn to_f32(&self) -> Result<Tensor> {
        match self {
            Weight::F32(t) => Ok(t.clone()),
            Weight::F16(t) => t.cast_f32(),
            Weight::Quantized { values, params } => {
                crate::quant::kernel::dequantize_tensor(values, params)
            }
        }
    }

    pub fn as_f32(&self) -> Result<&Tensor> {
        match self {
            Weight::F32(t) => Ok(t),
            _ => Err(Error::invalid(
                "Weight::as_f32",
                "layer is already quantized; expected full precision weights",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[Cout, Cin/groups, Kh, Kw]`
    pub weight: Weight,
    pub bias: Option<Vec<f32>>,
    pub geometry: ConvGeometry,
    /// Per-tensor scale of this layer's input; set for integer layers.
    pub act_scale: Option<f32>,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BatchNormLayer {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[D_out, D_in]`
    pub weight: Weight,
    pub bias: Option<Vec<f32>>,
    pub act_scale: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingLayer {
    pub head: PoolingHead,
    /// Scale used when GeM/NetVLAD inputs follow an integer layer.
    pub act_scale: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    DepthwiseConv(ConvLayer),
    BatchNorm(BatchNormLayer),
    Relu,
    Relu6,
    /// Adds the output of layer `source` to the running activation.
    ResidualAdd { source: usize },
    Pooling(PoolingLayer),
    Linear(LinearLayer),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::DepthwiseConv(_) => "dwconv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::Relu6 => "relu6",
            Layer::ResidualAdd { .. } => "add",
            Layer::Pooling(_) => "pool",
            Layer::Linear(_) => "linear",
        }
    }

    pub fn is_quantizable(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::DepthwiseConv(_) | Layer::Linear(_))
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) | Layer::DepthwiseConv(c) => {
                c.weight.numel() + c.bias.as_ref().map_or(0, Vec::len)
            }
            Layer::BatchNorm(bn) => 4 * bn.channels(),
            Layer::Pooling(p) => p.head.param_count(),
            Layer::Linear(l) => l.weight.numel() + l.bias.as_ref().map_or(0, Vec::len),
            _ => 0,
        }
    }

    pub(crate) fn weight(&self) -> Option<&Weight> {
        match self {
            Layer::Conv(c) | Layer::DepthwiseConv(c) => Some(&c.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }
}

/// Shape of an activation between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    /// `[C, H, W]` feature map.
    Map([usize; 3]),
    Vector(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match self {
            ActShape::Map([c, h, w]) => c * h * w,
            ActShape::Vector(d) => *d,
        }
    }
}

/// Points where a forward pass can be observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// Input to the `n`-th quantizable layer.
    QuantizableInput(usize),
    /// Input to the pooling head.
    PoolingInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    /// Architecture name, e.g. `mini-mobilenet`.
    pub arch: String,
    /// `[C, H, W]` of one input sample.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    /// Precision vector when the model has been quantized.
    pub precision: Option<PrecisionConfig>,
}

fn invalid_graph(msg: impl Into<String>) -> Error {
    Error::invalid("ModelGraph", msg)
}

impl ModelGraph {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Indices of conv, depthwise and linear layers, in graph order.
    pub fn quantizable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_quantizable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn pooling_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, Layer::Pooling(_)))
    }

    pub fn pooling_kind(&self) -> Option<PoolingKind> {
        self.pooling_index().and_then(|i| match &self.layers[i] {
            Layer::Pooling(p) => Some(p.head.kind()),
            _ => None,
        })
    }

    pub fn descriptor_dim(&self) -> Result<usize> {
        match self.infer_shapes()?.last() {
            Some(ActShape::Vector(d)) => Ok(*d),
            _ => Err(invalid_graph("graph does not end in a vector")),
        }
    }

    /// Output shape of every layer; checks all structural invariants.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let pools = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Pooling(_)))
            .count();
        if pools != 1 {
            return Err(invalid_graph(format!(
                "expected exactly one pooling head, found {pools}"
            )));
        }
        let mut shapes: Vec<ActShape> = Vec::with_capacity(self.layers.len());
        let mut cur = ActShape::Map(self.input_shape);
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur) {
                (Layer::Conv(c) | Layer::DepthwiseConv(c), ActShape::Map([ch, h, w])) => {
                    if matches!(layer, Layer::DepthwiseConv(_))
                        && (c.geometry.groups != ch || c.out_channels() != ch)
                    {
                        return Err(invalid_graph(format!(
                            "layer {i}: depthwise conv must have groups = Cin = Cout = {ch}"
                        )));
                    }
                    let d = conv_dims("ModelGraph", &[1, ch, h, w], c.weight.shape(), c.geometry)?;
                    if let Some(b) = &c.bias {
                        if b.len() != d.cout {
                            return Err(Error::ShapeMismatch {
                                op: "ModelGraph",
                                dim: "bias length",
                                expected: d.cout,
                                actual: b.len(),
                            });
                        }
                    }
                    ActShape::Map([d.cout, d.oh, d.ow])
                }
                (Layer::BatchNorm(bn), ActShape::Map([ch, h, w])) => {
                    for v in [&bn.var, &bn.gamma, &bn.beta] {
                        if v.len() != bn.channels() {
                            return Err(invalid_graph(format!(
                                "layer {i}: batchnorm parameter vectors differ in length"
                            )));
                        }
                    }
                    if bn.channels() != ch {
                        return Err(Error::ShapeMismatch {
                            op: "ModelGraph",
                            dim: "batchnorm channels",
                            expected: ch,
                            actual: bn.channels(),
                        });
                    }
                    ActShape::Map([ch, h, w])
                }
                (Layer::Relu | Layer::Relu6, s) => s,
                (Layer::ResidualAdd { source }, s) => {
                    if *source >= i {
                        return Err(invalid_graph(format!(
                            "layer {i}: residual source {source} does not precede it"
                        )));
                    }
                    if shapes[*source] != s {
                        return Err(invalid_graph(format!(
                            "layer {i}: residual source {source} has shape {:?}, expected {s:?}",
                            shapes[*source]
                        )));
                    }
                    s
                }
                (Layer::Pooling(p), ActShape::Map([ch, _, _])) => {
                    p.head.validate(ch)?;
                    ActShape::Vector(p.head.output_dim(ch))
                }
                (Layer::Linear(l), ActShape::Vector(d)) => {
                    let s = l.weight.shape();
                    if s.len() != 2 || s[1] != d {
                        return Err(Error::ShapeMismatch {
                            op: "ModelGraph",
                            dim: "linear input dimension",
                            expected: d,
                            actual: s.get(1).copied().unwrap_or(0),
                        });
                    }
                    if let Some(b) = &l.bias {
                        if b.len() != s[0] {
                            return Err(Error::ShapeMismatch {
                                op: "ModelGraph",
                                dim: "linear bias length",
                                expected: s[0],
                                actual: b.len(),
                            });
                        }
                    }
                    ActShape::Vector(s[0])
                }
                (l, s) => {
                    return Err(invalid_graph(format!(
                        "layer {i} ({}) cannot consume activation {s:?}",
                        l.kind_name()
                    )))
                }
            };
            shapes.push(cur);
        }
        if !matches!(cur, ActShape::Vector(_)) {
            return Err(invalid_graph("graph must end with a descriptor vector"));
        }
        Ok(shapes)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                dim: "batch rank",
                expected: 4,
                actual: s.len(),
            });
        }
        for (dim, (&got, &want)) in ["channels", "height", "width"]
            .into_iter()
            .zip(s[1..].iter().zip(&self.input_shape))
        {
            if got != want {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    dim,
                    expected: want,
                    actual: got,
                });
            }
        }
        Ok(s[0])
    }

    /// Runs a `[B, C, H, W]` batch and returns `[B, D]` L2-normalized
    /// descriptors. Samples are processed in parallel.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let b = self.check_batch(batch)?;
        let shapes = self.infer_shapes()?;
        let data = batch.as_f32()?;
        let per = data.len() / b.max(1);
        let rows = (0..b)
            .into_par_iter()
            .map(|i| self.run_sample(&shapes, &data[i * per..(i + 1) * per], &mut |_, _| {}))
            .collect::<Result<Vec<_>>>()?;
        let d = match shapes.last() {
            Some(ActShape::Vector(d)) => *d,
            _ => unreachable!("validated by infer_shapes"),
        };
        Tensor::from_f32(&[b, d], rows.concat())
    }

    /// Descriptor of one `[C, H, W]` sample.
    pub fn forward_sample(&self, sample: &[f32]) -> Result<Vec<f32>> {
        let shapes = self.infer_shapes()?;
        self.check_sample(sample)?;
        self.run_sample(&shapes, sample, &mut |_, _| {})
    }

    /// Like [`forward_sample`](Self::forward_sample), reporting the inputs of
    /// quantizable layers and of the pooling head to `observe`.
    pub fn forward_observed(
        &self,
        sample: &[f32],
        observe: &mut dyn FnMut(Tap, &[f32]),
    ) -> Result<Vec<f32>> {
        let shapes = self.infer_shapes()?;
        self.check_sample(sample)?;
        self.run_sample(&shapes, sample, observe)
    }

    fn check_sample(&self, sample: &[f32]) -> Result<()> {
        let want: usize = self.input_shape.iter().product();
        if sample.len() != want {
            return Err(Error::ShapeMismatch {
                op: "forward",
                dim: "sample element count",
                expected: want,
                actual: sample.len(),
            });
        }
        Ok(())
    }

    /// Precision path of the last quantizable layer before the pooling head.
    fn pooling_input_path(&self) -> Option<Precision> {
        let pool = self.pooling_index()?;
        self.layers[..pool]
            .iter()
            .rev()
            .find_map(|l| l.weight())
            .and_then(Weight::precision)
    }

    fn run_sample(
        &self,
        shapes: &[ActShape],
        sample: &[f32],
        observe: &mut dyn FnMut(Tap, &[f32]),
    ) -> Result<Vec<f32>> {
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        let mut cur_shape = ActShape::Map(self.input_shape);
        let mut q_index = 0;
        let pool_path = self.pooling_input_path();
        for (i, layer) in self.layers.iter().enumerate() {
            let input: &[f32] = if i == 0 { sample } else { &outputs[i - 1] };
            if layer.is_quantizable() {
                observe(Tap::QuantizableInput(q_index), input);
                q_index += 1;
            }
            let out = match layer {
                Layer::Conv(c) | Layer::DepthwiseConv(c) => {
                    let ActShape::Map([ch, h, w]) = cur_shape else {
                        unreachable!("validated by infer_shapes")
                    };
                    exec_conv(c, input, [ch, h, w])?
                }
                Layer::BatchNorm(bn) => {
                    let plane = input.len() / bn.channels();
                    let mut out = Vec::with_capacity(input.len());
                    for (ch, chunk) in input.chunks(plane).enumerate() {
                        let inv = 1.0 / (bn.var[ch] + bn.eps).sqrt();
                        out.extend(
                            chunk
                                .iter()
                                .map(|&v| bn.gamma[ch] * (v - bn.mean[ch]) * inv + bn.beta[ch]),
                        );
                    }
                    out
                }
                Layer::Relu => {
                    let mut out = input.to_vec();
                    relu_inplace(&mut out);
                    out
                }
                Layer::Relu6 => {
                    let mut out = input.to_vec();
                    relu6_inplace(&mut out);
                    out
                }
                Layer::ResidualAdd { source } => input
                    .iter()
                    .zip(&outputs[*source])
                    .map(|(a, b)| a + b)
                    .collect(),
                Layer::Pooling(p) => {
                    let ActShape::Map([ch, h, w]) = cur_shape else {
                        unreachable!("validated by infer_shapes")
                    };
                    observe(Tap::PoolingInput, input);
                    let sensitive = matches!(p.head.kind(), PoolingKind::Gem | PoolingKind::NetVlad);
                    match (sensitive, pool_path) {
                        (true, Some(Precision::Fp16)) => {
                            let x: Vec<f32> = input.iter().map(|&v| round_f16(v)).collect();
                            p.head.pool_map(&x, ch, h, w)?
                        }
                        (true, Some(prec)) if prec.is_integer() => {
                            let s = p.act_scale.ok_or_else(|| {
                                invalid_graph("pooling input follows an integer layer but has no activation scale")
                            })?;
                            let x: Vec<f32> = quantize_activation(input, s, ACTIVATION_BITS)
                                .into_iter()
                                .map(|q| q as f32 * s)
                                .collect();
                            p.head.pool_map(&x, ch, h, w)?
                        }
                        _ => p.head.pool_map(input, ch, h, w)?,
                    }
                }
                Layer::Linear(l) => exec_linear(l, input)?,
            };
            cur_shape = shapes[i];
            outputs.push(out);
        }
        let mut desc = outputs.pop().unwrap_or_default();
        l2_normalize(&mut desc);
        Ok(desc)
    }
}

fn missing_scale() -> Error {
    invalid_graph("integer layer has no activation scale")
}

fn exec_conv(c: &ConvLayer, x: &[f32], [ch, h, w]: [usize; 3]) -> Result<Vec<f32>> {
    let d = conv_dims("forward", &[1, ch, h, w], c.weight.shape(), c.geometry)?;
    let bias = c.bias.as_deref();
    Ok(match &c.weight {
        Weight::F32(wt) => conv2d_raw(&d, x, wt.as_f32()?, bias),
        Weight::F16(wt) => {
            let xin: Vec<f32> = x.iter().map(|&v| round_f16(v)).collect();
            let mut out = conv2d_raw(&d, &xin, &wt.to_f32_vec(), bias);
            out.iter_mut().for_each(|v| *v = round_f16(*v));
            out
        }
        Weight::Quantized { values, params } => {
            let s_x = c.act_scale.ok_or_else(missing_scale)?;
            let xi: Vec<i32> = quantize_activation(x, s_x, ACTIVATION_BITS)
                .into_iter()
                .map(i32::from)
                .collect();
            let wi: Vec<i32> = values.to_i8_values().into_iter().map(i32::from).collect();
            let acc = qconv_acc(&d, &xi, &wi);
            let per = values.numel() / d.cout;
            dequantize_acc(&acc, d.cout, d.oh * d.ow, s_x, |o| params.scale_at(o * per, per), bias)
        }
    })
}

fn exec_linear(l: &LinearLayer, x: &[f32]) -> Result<Vec<f32>> {
    let d_out = l.weight.shape()[0];
    let bias = l.bias.as_deref();
    Ok(match &l.weight {
        Weight::F32(wt) => linear_raw(x, wt.as_f32()?, d_out, bias),
        Weight::F16(wt) => {
            let xin: Vec<f32> = x.iter().map(|&v| round_f16(v)).collect();
            let mut out = linear_raw(&xin, &wt.to_f32_vec(), d_out, bias);
            out.iter_mut().for_each(|v| *v = round_f16(*v));
            out
        }
        Weight::Quantized { values, params } => {
            let s_x = l.act_scale.ok_or_else(missing_scale)?;
            let xi = quantize_activation(x, s_x, ACTIVATION_BITS);
            crate::quant::kernel::qlinear_int(
                &xi,
                s_x,
                crate::quant::kernel::QOperand { values, params },
                bias,
            )?
        }
    })
}

/// Checks the stored dtype of a weight against its variant.
pub(crate) fn check_weight_dtype(w: &Weight) -> Result<()> {
    let ok = match w {
        Weight::F32(t) => t.dtype() == DType::F32,
        Weight::F16(t) => t.dtype() == DType::F16,
        Weight::Quantized { values, params } => matches!(
            (values.dtype(), params.bits),
            (DType::I8, 8) | (DType::I4Packed, 4)
        ),
    };
    if ok {
        Ok(())
    } else {
        Err(invalid_graph("weight dtype does not match its precision"))
    }
}
