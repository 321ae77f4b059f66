//! Whole-model post-training quantization under a per-layer precision vector.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::kernel::{check_conv_accumulator, quantize_tensor};
use super::kl::{calibrate_kl, calibrate_kl_weights};
use super::params::{calibrate_maxabs, Granularity, QuantParams};
use crate::error::{Error, Result};
use crate::f16::round_f16;
use crate::fuse::is_fused;
use crate::graph::{Layer, ModelGraph, Tap, Weight, ACTIVATION_BITS};
use crate::pooling::PoolingKind;
use crate::precision::{Precision, PrecisionConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CalibrationMethod {
    #[default]
    MaxAbs,
    Kl,
}

impl CalibrationMethod {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationMethod::MaxAbs => "maxabs",
            CalibrationMethod::Kl => "kl",
        }
    }
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalibrationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxabs" | "max" => Ok(CalibrationMethod::MaxAbs),
            "kl" | "entropy" => Ok(CalibrationMethod::Kl),
            _ => Err(Error::invalid(
                "CalibrationMethod",
                format!("unknown calibration method {s:?} (expected maxabs or kl)"),
            )),
        }
    }
}

/// Per-tensor activation scales gathered from the f32 model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationScales {
    /// One scale per quantizable layer input, in graph order.
    pub layers: Vec<f32>,
    /// Scale of the pooling head input.
    pub pooling: f32,
}

fn scale_from(values: &[f32], method: CalibrationMethod) -> Result<f32> {
    if values.is_empty() {
        return Ok(1.0);
    }
    Ok(match method {
        CalibrationMethod::MaxAbs => {
            let t = Tensor::from_f32(&[values.len()], values.to_vec())?;
            calibrate_maxabs(&t, ACTIVATION_BITS, Granularity::PerTensor)?.scales[0]
        }
        CalibrationMethod::Kl => calibrate_kl(values, ACTIVATION_BITS)?.scales[0],
    })
}

/// Runs every calibration sample (`[L, C, H, W]`) through the f32 model and
/// derives one activation scale per quantizable layer plus one for the
/// pooling input.
pub fn calibrate_activations(
    model: &ModelGraph,
    calib: &Tensor,
    method: CalibrationMethod,
) -> Result<ActivationScales> {
    let n_layers = model.quantizable_layers().len();
    let s = calib.shape();
    if s.len() != 4 || s[1..] != model.input_shape[..] {
        return Err(Error::invalid(
            "calibrate_activations",
            format!(
                "calibration batch has shape {s:?}, expected [L, {}, {}, {}]",
                model.input_shape[0], model.input_shape[1], model.input_shape[2]
            ),
        ));
    }
    if s[0] == 0 {
        return Err(Error::invalid("calibrate_activations", "calibration sample is empty"));
    }
    let data = calib.as_f32()?;
    let per = data.len() / s[0];
    let taps = n_layers + 1;
    // Per sample: gathered values (kl) or running max (maxabs) for each tap.
    let gathered: Vec<Vec<Vec<f32>>> = data
        .par_chunks(per)
        .map(|sample| {
            let mut buf: Vec<Vec<f32>> = vec![Vec::new(); taps];
            model.forward_observed(sample, &mut |tap, x| {
                let slot = match tap {
                    Tap::QuantizableInput(i) => i,
                    Tap::PoolingInput => n_layers,
                };
                match method {
                    CalibrationMethod::Kl => buf[slot].extend_from_slice(x),
                    CalibrationMethod::MaxAbs => {
                        let m = x.iter().fold(0f32, |m, v| m.max(v.abs()));
                        match buf[slot].first_mut() {
                            Some(cur) => *cur = cur.max(m),
                            None => buf[slot].push(m),
                        }
                    }
                }
            })?;
            Ok(buf)
        })
        .collect::<Result<_>>()?;
    let scales = (0..taps)
        .into_par_iter()
        .map(|t| {
            let pooled: Vec<f32> = gathered.iter().flat_map(|b| b[t].iter().copied()).collect();
            scale_from(&pooled, method)
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(ActivationScales {
        pooling: scales[n_layers],
        layers: scales[..n_layers].to_vec(),
    })
}

/// A graph whose quantizable layers follow a precision configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub graph: ModelGraph,
}

impl QuantizedModel {
    /// Checks that every quantizable layer's storage matches the graph's
    /// recorded precision vector.
    pub fn from_graph(graph: ModelGraph) -> Result<Self> {
        let config = graph
            .precision
            .clone()
            .ok_or_else(|| Error::invalid("QuantizedModel", "graph carries no precision configuration"))?;
        let q = graph.quantizable_layers();
        if q.len() != config.len() {
            return Err(Error::ShapeMismatch {
                op: "QuantizedModel",
                dim: "precision config length",
                expected: q.len(),
                actual: config.len(),
            });
        }
        for (&i, &p) in q.iter().zip(config.as_slice()) {
            let layer = &graph.layers[i];
            let w = layer.weight().expect("quantizable layers carry weights");
            let (stored, act) = (w.precision(), layer_act_scale(layer));
            let ok = stored == Some(p) && (p.is_integer() == act.is_some());
            if !ok {
                return Err(Error::invalid(
                    "QuantizedModel",
                    format!("layer {i} does not match precision {}", p.bits()),
                ));
            }
        }
        graph.infer_shapes()?;
        Ok(QuantizedModel { graph })
    }

    pub fn config(&self) -> &PrecisionConfig {
        self.graph.precision.as_ref().expect("validated on construction")
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.graph.forward(batch)
    }
}

fn layer_act_scale(layer: &Layer) -> Option<f32> {
    match layer {
        Layer::Conv(c) | Layer::DepthwiseConv(c) => c.act_scale,
        Layer::Linear(l) => l.act_scale,
        _ => None,
    }
}

fn quantize_weight(w: &Tensor, p: Precision, method: CalibrationMethod) -> Result<Weight> {
    let bits = p.bits();
    let params: QuantParams = match method {
        CalibrationMethod::MaxAbs => calibrate_maxabs(w, bits, Granularity::PerChannel)?,
        CalibrationMethod::Kl => calibrate_kl_weights(w, bits, Granularity::PerChannel)?,
    };
    check_conv_accumulator(w.shape(), bits)?;
    Ok(Weight::Quantized {
        values: quantize_tensor(w, &params)?,
        params,
    })
}

/// Quantizes a fused model with precomputed activation scales.
pub fn quantize_model_with_scales(
    model: &ModelGraph,
    config: &PrecisionConfig,
    scales: Option<&ActivationScales>,
    method: CalibrationMethod,
) -> Result<QuantizedModel> {
    const OP: &str = "quantize_model";
    if !is_fused(model) {
        return Err(Error::invalid(OP, "model must be fused before quantization"));
    }
    let q = model.quantizable_layers();
    if config.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: OP,
            dim: "precision config length (quantizable layers)",
            expected: q.len(),
            actual: config.len(),
        });
    }
    let needs_scales = config.as_slice().iter().any(|p| p.is_integer());
    let scales = match scales {
        Some(s) if s.layers.len() == q.len() => Some(s),
        Some(s) => {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "activation scale count",
                expected: q.len(),
                actual: s.layers.len(),
            })
        }
        None if needs_scales => {
            return Err(Error::invalid(
                OP,
                "a calibration sample is required when any layer is 4 or 8 bits",
            ))
        }
        None => None,
    };

    let mut graph = model.clone();
    let mut last_precision = None;
    let pool = model.pooling_index();
    for (k, (&i, &p)) in q.iter().zip(config.as_slice()).enumerate() {
        let act = if p.is_integer() {
            scales.map(|s| s.layers[k])
        } else {
            None
        };
        let (weight, bias) = match &mut graph.layers[i] {
            Layer::Conv(c) | Layer::DepthwiseConv(c) => {
                c.act_scale = act;
                (&mut c.weight, &mut c.bias)
            }
            Layer::Linear(l) => {
                l.act_scale = act;
                (&mut l.weight, &mut l.bias)
            }
            _ => unreachable!("quantizable layers are conv or linear"),
        };
        let w = weight.as_f32()?;
        *weight = match p {
            Precision::Fp16 => {
                if let Some(b) = bias {
                    b.iter_mut().for_each(|v| *v = round_f16(*v));
                }
                Weight::F16(w.cast_f16()?)
            }
            _ => quantize_weight(w, p, method)?,
        };
        if pool.is_some_and(|pi| i < pi) {
            last_precision = Some(p);
        }
    }
    if let Some(pi) = pool {
        if let Layer::Pooling(pl) = &mut graph.layers[pi] {
            let sensitive = matches!(pl.head.kind(), PoolingKind::Gem | PoolingKind::NetVlad);
            pl.act_scale = match (sensitive, last_precision, scales) {
                (true, Some(p), Some(s)) if p.is_integer() => Some(s.pooling),
                _ => None,
            };
        }
    }
    graph.precision = Some(config.clone());
    QuantizedModel::from_graph(graph)
}

/// Calibrates activation scales on `calib` (`[L, C, H, W]`) and quantizes
/// the fused model. Weights use per-channel scales, activations per-tensor
/// 8-bit scales; fp16 layers store half precision weights.
pub fn quantize_model(
    model: &ModelGraph,
    config: &PrecisionConfig,
    calib: Option<&Tensor>,
    method: CalibrationMethod,
) -> Result<QuantizedModel> {
    let needs_scales = config.as_slice().iter().any(|p| p.is_integer());
    let scales = match calib {
        Some(c) if needs_scales => {
            if !is_fused(model) {
                return Err(Error::invalid("quantize_model", "model must be fused before quantization"));
            }
            Some(calibrate_activations(model, c, method)?)
        }
        _ => None,
    };
    quantize_model_with_scales(model, config, scales.as_ref(), method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, ArchConfig, Family};
    use crate::fuse::fuse_conv_bn;
    use crate::tensor::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelGraph {
        let mut cfg = ArchConfig::new(Family::MiniVgg);
        cfg.input_shape = [3, 12, 12];
        cfg.depth = 3;
        cfg.seed = 2;
        fuse_conv_bn(&build_backbone(&cfg).unwrap()).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n * 3 * 144).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_f32(&[n, 3, 12, 12], v).unwrap()
    }

    #[test]
    fn length_mismatch_rejected() {
        let m = model();
        let cfg = PrecisionConfig::uniform(Precision::Int8, 1);
        assert!(matches!(
            quantize_model(&m, &cfg, Some(&batch(2, 0)), CalibrationMethod::MaxAbs),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn integer_layers_need_calibration() {
        let m = model();
        let t = m.quantizable_layers().len();
        let cfg = PrecisionConfig::uniform(Precision::Int8, t);
        assert!(quantize_model(&m, &cfg, None, CalibrationMethod::MaxAbs).is_err());
        let fp16 = PrecisionConfig::uniform(Precision::Fp16, t);
        assert!(quantize_model(&m, &fp16, None, CalibrationMethod::MaxAbs).is_ok());
    }

    #[test]
    fn single_int4_layer_is_packed() {
        let m = model();
        let t = m.quantizable_layers().len();
        let mut p = vec![Precision::Fp16; t];
        p[1] = Precision::Int4;
        let qm = quantize_model(&m, &PrecisionConfig(p), Some(&batch(2, 1)), CalibrationMethod::Kl).unwrap();
        for (k, &i) in qm.graph.quantizable_layers().iter().enumerate() {
            let w = qm.graph.layers[i].weight().unwrap();
            let packed = matches!(w, Weight::Quantized { values, .. } if values.dtype() == DType::I4Packed);
            assert_eq!(packed, k == 1);
        }
    }

    #[test]
    fn fp16_tracks_f32() {
        let m = model();
        let t = m.quantizable_layers().len();
        let qm = quantize_model(&m, &PrecisionConfig::uniform(Precision::Fp16, t), None, CalibrationMethod::MaxAbs)
            .unwrap();
        let x = batch(3, 4);
        let a = m.forward(&x).unwrap();
        let b = qm.forward(&x).unwrap();
        let diff = a
            .as_f32()
            .unwrap()
            .iter()
            .zip(b.as_f32().unwrap())
            .fold(0f32, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff < 1e-2, "{diff}");
    }

    #[test]
    fn unfused_model_rejected() {
        let mut cfg = ArchConfig::new(Family::MiniResNet);
        cfg.input_shape = [3, 12, 12];
        let m = build_backbone(&cfg).unwrap();
        let t = m.quantizable_layers().len();
        let r = quantize_model(&m, &PrecisionConfig::uniform(Precision::Int8, t), Some(&batch(1, 0)), CalibrationMethod::MaxAbs);
        assert!(r.is_err());
    }
}
