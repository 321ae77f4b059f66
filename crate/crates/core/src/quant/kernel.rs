//! Quantize/dequantize and integer kernels with exact i32 accumulation.

use crate::error::{Error, Result};
use crate::ops::{check_bias, conv_dims, conv_loops, ConvGeometry};
use crate::quant::params::{Granularity, QuantParams};
use crate::tensor::{DType, Tensor};

fn per_channel_len(op: &'static str, shape: &[usize], params: &QuantParams) -> Result<usize> {
    let n: usize = shape.iter().product();
    match params.granularity {
        Granularity::PerTensor => Ok(n.max(1)),
        Granularity::PerChannel => {
            let c = shape.first().copied().unwrap_or(1);
            if c != params.scales.len() {
                return Err(Error::ShapeMismatch {
                    op,
                    dim: "per-channel scale count (axis 0)",
                    expected: c,
                    actual: params.scales.len(),
                });
            }
            Ok((n / c.max(1)).max(1))
        }
    }
}

/// Integer value of a single element: `clamp(round_half_even(w / s), -q, q)`.
#[inline]
pub fn quantize_value(w: f32, scale: f32, qmax: i32) -> i8 {
    let q = (w / scale).round_ties_even();
    q.clamp(-(qmax as f32), qmax as f32) as i8
}

/// Symmetric quantization. 8-bit params give an `I8` tensor, 4-bit params an
/// `I4Packed` one.
pub fn quantize_tensor(w: &Tensor, params: &QuantParams) -> Result<Tensor> {
    params.validate(None)?;
    let data = w.as_f32()?;
    let per = per_channel_len("quantize_tensor", w.shape(), params)?;
    let q = params.qmax();
    let values: Vec<i8> = data
        .iter()
        .enumerate()
        .map(|(i, &v)| quantize_value(v, params.scale_at(i, per), q))
        .collect();
    match params.bits {
        8 => Tensor::from_i8(w.shape(), values),
        4 => Tensor::from_i4(w.shape(), &values),
        other => Err(Error::UnsupportedBitwidth(other)),
    }
}

/// `w_float = s * w_int`, elementwise with per-channel broadcasting.
pub fn dequantize_tensor(w_int: &Tensor, params: &QuantParams) -> Result<Tensor> {
    match (w_int.dtype(), params.bits) {
        (DType::I8, 8) | (DType::I4Packed, 4) => {}
        (dt, bits) => {
            return Err(Error::invalid(
                "dequantize_tensor",
                format!("dtype {dt} does not match bit-width {bits}"),
            ))
        }
    }
    let per = per_channel_len("dequantize_tensor", w_int.shape(), params)?;
    let out = w_int
        .to_i8_values()
        .into_iter()
        .enumerate()
        .map(|(i, v)| params.scale_at(i, per) * v as f32)
        .collect();
    Tensor::from_f32(w_int.shape(), out)
}

/// Quantizes an activation buffer to i8 values with one scale.
pub(crate) fn quantize_activation(x: &[f32], scale: f32, bits: u32) -> Vec<i8> {
    let q = (1i32 << (bits - 1)) - 1;
    x.iter().map(|&v| quantize_value(v, scale, q)).collect()
}

/// Largest i32 accumulator magnitude for `terms` products of 8-bit operands.
fn check_accumulator(terms: usize, weight_bits: u32) -> Result<()> {
    let wq = (1i64 << (weight_bits - 1)) - 1;
    let max_product = 127 * wq;
    if (terms as i64).saturating_mul(max_product) > i32::MAX as i64 {
        return Err(Error::AccumulatorOverflow { terms, max_product });
    }
    Ok(())
}

/// Rejects layer shapes whose worst-case integer dot product could overflow
/// the i32 accumulator.
pub fn check_conv_accumulator(weight_shape: &[usize], weight_bits: u32) -> Result<()> {
    let terms: usize = weight_shape.iter().skip(1).product();
    check_accumulator(terms, weight_bits)
}

/// A quantized operand: integer values plus their scale parameters.
#[derive(Debug, Clone, Copy)]
pub struct QOperand<'a> {
    pub values: &'a Tensor,
    pub params: &'a QuantParams,
}

/// Integer convolution. Input is per-tensor quantized, weights per-channel
/// (i8 or sign-extended i4). Products accumulate exactly in i32 and each
/// output is dequantized as `acc * s_x * s_w[c] + bias[c]`.
pub fn qconv2d_int(
    input: QOperand<'_>,
    weight: QOperand<'_>,
    bias: Option<&[f32]>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    const OP: &str = "qconv2d_int";
    if input.values.dtype() != DType::I8 {
        return Err(Error::DTypeMismatch {
            op: OP,
            expected: "i8",
            actual: input.values.dtype().name(),
        });
    }
    if input.params.granularity != Granularity::PerTensor {
        return Err(Error::invalid(OP, "activations must use a per-tensor scale"));
    }
    let d = conv_dims(OP, input.values.shape(), weight.values.shape(), geo)?;
    check_bias(OP, bias, d.cout)?;
    weight.params.validate(None)?;
    let per = per_channel_len(OP, weight.values.shape(), weight.params)?;
    check_conv_accumulator(weight.values.shape(), weight.params.bits)?;

    let x: Vec<i32> = input.values.to_i8_values().into_iter().map(i32::from).collect();
    let w: Vec<i32> = weight.values.to_i8_values().into_iter().map(i32::from).collect();
    let acc = qconv_acc(&d, &x, &w);
    let out = dequantize_acc(&acc, d.cout, d.oh * d.ow, input.params.scales[0], |c| {
        weight.params.scale_at(c * per, per)
    }, bias);
    Tensor::from_f32(&d.out_shape(), out)
}

pub(crate) fn qconv_acc(d: &crate::ops::ConvDims, x: &[i32], w: &[i32]) -> Vec<i32> {
    let mut acc = vec![0i32; d.n * d.cout * d.oh * d.ow];
    conv_loops(d, |o, i, k| acc[o] += x[i] * w[k]);
    acc
}

pub(crate) fn dequantize_acc(
    acc: &[i32],
    cout: usize,
    plane: usize,
    s_x: f32,
    s_w: impl Fn(usize) -> f32,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(acc.len());
    for (idx, chunk) in acc.chunks(plane.max(1)).enumerate() {
        let c = idx % cout;
        let s = s_x * s_w(c);
        let b = bias.map_or(0.0, |b| b[c]);
        out.extend(chunk.iter().map(|&a| a as f32 * s + b));
    }
    out
}

/// Integer matrix-vector product for a `[D_out, D_in]` weight.
pub fn qlinear_int(
    x: &[i8],
    s_x: f32,
    weight: QOperand<'_>,
    bias: Option<&[f32]>,
) -> Result<Vec<f32>> {
    const OP: &str = "qlinear_int";
    let s = weight.values.shape();
    if s.len() != 2 || s[1] != x.len() {
        return Err(Error::ShapeMismatch {
            op: OP,
            dim: "weight input dimension",
            expected: x.len(),
            actual: s.get(1).copied().unwrap_or(0),
        });
    }
    check_bias(OP, bias, s[0])?;
    check_accumulator(s[1], weight.params.bits)?;
    let per = per_channel_len(OP, s, weight.params)?;
    let w = weight.values.to_i8_values();
    let acc: Vec<i32> = w
        .chunks(s[1])
        .map(|row| row.iter().zip(x).map(|(&a, &b)| a as i32 * b as i32).sum())
        .collect();
    Ok(dequantize_acc(&acc, s[0], 1, s_x, |c| weight.params.scale_at(c * per, per), bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        let w = Tensor::from_f32(&[3], vec![0.5, -1.0, 0.25]).unwrap();
        let p = QuantParams::per_tensor(8, 1.0 / 127.0).unwrap();
        assert_eq!(quantize_tensor(&w, &p).unwrap().to_i8_values(), vec![64, -127, 32]);

        let w = Tensor::from_f32(&[2], vec![0.7, -0.35]).unwrap();
        let p = QuantParams::per_tensor(4, 0.1).unwrap();
        let q = quantize_tensor(&w, &p).unwrap();
        assert_eq!(q.dtype(), DType::I4Packed);
        assert_eq!(q.to_i8_values(), vec![7, -4]);

        let z = Tensor::zeros(&[5]);
        let p = QuantParams::per_tensor(8, 0.37).unwrap();
        assert_eq!(quantize_tensor(&z, &p).unwrap().to_i8_values(), vec![0; 5]);
    }

    #[test]
    fn clamps_to_symmetric_range() {
        let w = Tensor::from_f32(&[2], vec![100.0, -100.0]).unwrap();
        let p = QuantParams::per_tensor(8, 0.1).unwrap();
        assert_eq!(quantize_tensor(&w, &p).unwrap().to_i8_values(), vec![127, -127]);
        let p = QuantParams::per_tensor(4, 0.1).unwrap();
        assert_eq!(quantize_tensor(&w, &p).unwrap().to_i8_values(), vec![7, -7]);
    }

    #[test]
    fn bad_bitwidth_rejected() {
        let w = Tensor::zeros(&[2]);
        let p = QuantParams {
            bits: 2,
            scales: vec![1.0],
            granularity: Granularity::PerTensor,
        };
        assert!(matches!(quantize_tensor(&w, &p), Err(Error::UnsupportedBitwidth(2))));
    }

    #[test]
    fn dequantize_examples() {
        let q = Tensor::from_i8(&[1], vec![-127]).unwrap();
        let p = QuantParams::per_tensor(8, 1.0 / 127.0).unwrap();
        assert_eq!(dequantize_tensor(&q, &p).unwrap().as_f32().unwrap(), &[-1.0]);

        let q = Tensor::from_i8(&[2, 1], vec![10, 10]).unwrap();
        let p = QuantParams::per_channel(8, vec![0.1, 0.2]).unwrap();
        assert_eq!(dequantize_tensor(&q, &p).unwrap().as_f32().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn scalar_integer_conv() {
        let x = Tensor::from_i8(&[1, 1, 1, 1], vec![10]).unwrap();
        let px = QuantParams::per_tensor(8, 0.1).unwrap();
        let w = Tensor::from_i8(&[1, 1, 1, 1], vec![20]).unwrap();
        let pw = QuantParams::per_channel(8, vec![0.05]).unwrap();
        let y = qconv2d_int(
            QOperand { values: &x, params: &px },
            QOperand { values: &w, params: &pw },
            None,
            ConvGeometry::default(),
        )
        .unwrap();
        let v = y.as_f32().unwrap()[0];
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::from_i8(&[1, 2, 3, 3], vec![0; 18]).unwrap();
        let px = QuantParams::per_tensor(8, 0.3).unwrap();
        let w = Tensor::from_i4(&[2, 2, 3, 3], &[3; 36]).unwrap();
        let pw = QuantParams::per_channel(4, vec![0.2, 0.4]).unwrap();
        let bias = [0.125f32, -3.5];
        let y = qconv2d_int(
            QOperand { values: &x, params: &px },
            QOperand { values: &w, params: &pw },
            Some(&bias),
            ConvGeometry::new(1, 1, 1),
        )
        .unwrap();
        let out = y.as_f32().unwrap();
        assert!(out[..9].iter().all(|&v| v == 0.125));
        assert!(out[9..].iter().all(|&v| v == -3.5));
    }

    #[test]
    fn overflow_risk_rejected() {
        // 133_145 * 127 * 127 > i32::MAX
        assert!(check_conv_accumulator(&[1, 14_794, 3, 3], 8).is_err());
        assert!(check_conv_accumulator(&[1, 14_793, 3, 3], 8).is_ok());
    }

    #[test]
    fn integer_linear() {
        let w = Tensor::from_i8(&[2, 3], vec![1, 2, 3, -1, -2, -3]).unwrap();
        let pw = QuantParams::per_channel(8, vec![0.5, 0.25]).unwrap();
        let y = qlinear_int(&[1, 1, 1], 2.0, QOperand { values: &w, params: &pw }, None).unwrap();
        assert_eq!(y, vec![6.0, -3.0]);
    }
}
