//! Folding batch normalization into the preceding convolution.

use crate::error::{Error, Result};
use crate::graph::{BatchNormLayer, ConvLayer, Layer, ModelGraph, Weight};
use crate::tensor::Tensor;

/// Folds `bn` into `conv`: `W' = g * W` per output channel and
/// `b' = beta + g * (b - mu)` with `g = gamma / sqrt(var + eps)`.
pub fn fold_batchnorm(conv: &ConvLayer, bn: &BatchNormLayer) -> Result<ConvLayer> {
    let w = conv.weight.as_f32()?;
    let cout = conv.out_channels();
    if bn.channels() != cout {
        return Err(Error::ShapeMismatch {
            op: "fuse_conv_bn",
            dim: "batchnorm channels",
            expected: cout,
            actual: bn.channels(),
        });
    }
    let per = w.numel() / cout;
    let gain: Vec<f32> = (0..cout)
        .map(|c| bn.gamma[c] / (bn.var[c] + bn.eps).sqrt())
        .collect();
    let weight: Vec<f32> = w
        .as_f32()?
        .iter()
        .enumerate()
        .map(|(i, &v)| gain[i / per] * v)
        .collect();
    let bias = (0..cout)
        .map(|c| {
            let b = conv.bias.as_ref().map_or(0.0, |b| b[c]);
            bn.beta[c] + gain[c] * (b - bn.mean[c])
        })
        .collect();
    Ok(ConvLayer {
        weight: Weight::F32(Tensor::from_f32(w.shape(), weight)?),
        bias: Some(bias),
        geometry: conv.geometry,
        act_scale: None,
    })
}

/// Returns a new graph with every Conv+BatchNorm pair replaced by one
/// convolution. Residual sources are remapped to the new indices. A batch
/// norm that does not directly follow a convolution is rejected.
pub fn fuse_conv_bn(model: &ModelGraph) -> Result<ModelGraph> {
    let mut layers: Vec<Layer> = Vec::with_capacity(model.layers.len());
    let mut remap = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::BatchNorm(bn) => {
                let folded = match layers.last() {
                    Some(Layer::Conv(c)) if i > 0 && matches!(model.layers[i - 1], Layer::Conv(_)) => {
                        Layer::Conv(fold_batchnorm(c, bn)?)
                    }
                    Some(Layer::DepthwiseConv(c))
                        if i > 0 && matches!(model.layers[i - 1], Layer::DepthwiseConv(_)) =>
                    {
                        Layer::DepthwiseConv(fold_batchnorm(c, bn)?)
                    }
                    _ => {
                        return Err(Error::invalid(
                            "fuse_conv_bn",
                            format!("batchnorm at layer {i} does not follow a convolution"),
                        ))
                    }
                };
                *layers.last_mut().expect("checked above") = folded;
                remap.push(layers.len() - 1);
            }
            Layer::ResidualAdd { source } => {
                layers.push(Layer::ResidualAdd {
                    source: remap[*source],
                });
                remap.push(layers.len() - 1);
            }
            other => {
                layers.push(other.clone());
                remap.push(layers.len() - 1);
            }
        }
    }
    let fused = ModelGraph {
        arch: model.arch.clone(),
        input_shape: model.input_shape,
        layers,
        precision: model.precision.clone(),
    };
    fused.infer_shapes()?;
    Ok(fused)
}

pub fn is_fused(model: &ModelGraph) -> bool {
    !model.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvGeometry;

    fn conv(weight: Vec<f32>, bias: Option<Vec<f32>>) -> ConvLayer {
        let n = weight.len();
        ConvLayer {
            weight: Weight::F32(Tensor::from_f32(&[n, 1, 1, 1], weight).unwrap()),
            bias,
            geometry: ConvGeometry::default(),
            act_scale: None,
        }
    }

    #[test]
    fn identity_bn_leaves_conv_unchanged() {
        let eps = 1e-5;
        let c = conv(vec![0.25, -1.5], Some(vec![0.5, 2.0]));
        let bn = BatchNormLayer {
            mean: vec![0.0; 2],
            var: vec![1.0 - eps; 2],
            gamma: vec![1.0; 2],
            beta: vec![0.0; 2],
            eps,
        };
        let f = fold_batchnorm(&c, &bn).unwrap();
        assert_eq!(f.weight, c.weight);
        assert_eq!(f.bias, c.bias);
    }

    #[test]
    fn scalar_substitution() {
        // gamma = 2, var + eps = 4, mu = 1, beta = 0, b = 0 -> scale 1, b' = -1
        let c = conv(vec![0.75], None);
        let bn = BatchNormLayer {
            mean: vec![1.0],
            var: vec![4.0 - 0.5],
            gamma: vec![2.0],
            beta: vec![0.0],
            eps: 0.5,
        };
        let f = fold_batchnorm(&c, &bn).unwrap();
        assert_eq!(f.weight.as_f32().unwrap().as_f32().unwrap(), &[0.75]);
        assert_eq!(f.bias, Some(vec![-1.0]));
    }
}
