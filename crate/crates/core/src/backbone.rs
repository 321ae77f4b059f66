//! Miniature backbones and their text configuration.
//!
//! Config files are `key = value` lines grouped into sections. `[model]`
//! holds the global settings; optional `[block N]` sections override the
//! channels, stride or expansion ratio of block `N`.
//!
//! ```text
//! [model]
//! family = mini-mobilenet
//! width = 1.0
//! depth = 3
//! input = 3,32,32
//! dim = 64
//! pooling = gem
//!
//! [block 1]
//! stride = 2
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchNormLayer, ConvLayer, Layer, LinearLayer, ModelGraph, PoolingLayer, Weight};
use crate::ops::ConvGeometry;
use crate::pooling::{PoolingHead, PoolingKind, DEFAULT_GEM_P, DEFAULT_NETVLAD_CODES};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
const BASE_CHANNELS: f32 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    MiniMobileNet,
    MiniResNet,
    MiniVgg,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::MiniMobileNet => "mini-mobilenet",
            Family::MiniResNet => "mini-resnet",
            Family::MiniVgg => "mini-vgg",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mini-mobilenet" | "mobilenet" => Ok(Family::MiniMobileNet),
            "mini-resnet" | "resnet" => Ok(Family::MiniResNet),
            "mini-vgg" | "vgg" => Ok(Family::MiniVgg),
            other => Err(Error::invalid(
                "build_backbone",
                format!("unknown backbone family {other:?}"),
            )),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockOverride {
    pub channels: Option<usize>,
    pub stride: Option<usize>,
    pub expand: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub family: Family,
    pub width: f32,
    pub depth: usize,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub descriptor_dim: usize,
    pub pooling: PoolingKind,
    pub gem_p: f32,
    pub netvlad_codes: usize,
    /// `None` adds a projection only when the pooled dimension differs from
    /// `descriptor_dim`.
    pub projection: Option<bool>,
    /// Bias on convolutions that are not followed by batch norm, and on the
    /// projection.
    pub bias: bool,
    /// Inverted-bottleneck expansion ratio (mini-mobilenet).
    pub expand_ratio: usize,
    pub blocks: BTreeMap<usize, BlockOverride>,
    pub seed: u64,
}

impl ArchConfig {
    pub fn new(family: Family) -> Self {
        ArchConfig {
            family,
            width: 1.0,
            depth: 2,
            input_shape: [3, 32, 32],
            descriptor_dim: 0,
            pooling: PoolingKind::Gem,
            gem_p: DEFAULT_GEM_P,
            netvlad_codes: DEFAULT_NETVLAD_CODES,
            projection: None,
            bias: true,
            expand_ratio: 4,
            blocks: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn base_channels(&self) -> usize {
        ((BASE_CHANNELS * self.width).round() as usize).max(4)
    }

    /// Parses the sectioned `key = value` format. The seed is not part of the
    /// file and stays 0 until set by the caller.
    pub fn parse(text: &str) -> Result<Self> {
        let mut section: Option<Option<usize>> = None;
        let mut kv: Vec<(usize, Option<usize>, String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(if name == "model" {
                    None
                } else if let Some(idx) = name
                    .strip_prefix("block")
                    .map(|s| s.trim_start_matches(['.', ' ']))
                {
                    Some(idx.parse::<usize>().map_err(|_| Error::Config {
                        line: line_no,
                        msg: format!("bad block index in section [{name}]"),
                    })?)
                } else {
                    return Err(Error::Config {
                        line: line_no,
                        msg: format!("unknown section [{name}]"),
                    });
                });
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            let Some(sec) = section else {
                return Err(Error::Config {
                    line: line_no,
                    msg: "key outside of a section".into(),
                });
            };
            kv.push((line_no, sec, k.trim().to_string(), v.trim().to_string()));
        }

        let family = kv
            .iter()
            .find(|(_, s, k, _)| s.is_none() && k == "family")
            .ok_or(Error::Config {
                line: 0,
                msg: "missing `family` in [model]".into(),
            })
            .and_then(|(line, _, _, v)| {
                v.parse::<Family>().map_err(|e| Error::Config {
                    line: *line,
                    msg: e.to_string(),
                })
            })?;
        let mut cfg = ArchConfig::new(family);
        for (line, sec, key, value) in kv {
            let bad = |what: &str| Error::Config {
                line,
                msg: format!("invalid {what} {value:?}"),
            };
            match sec {
                None => match key.as_str() {
                    "family" => {}
                    "width" => cfg.width = value.parse().map_err(|_| bad("width"))?,
                    "depth" => cfg.depth = value.parse().map_err(|_| bad("depth"))?,
                    "input" => {
                        let dims: Vec<usize> = value
                            .split([',', 'x'])
                            .map(|s| s.trim().parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad("input shape"))?;
                        cfg.input_shape = dims.try_into().map_err(|_| bad("input shape"))?;
                    }
                    "dim" => cfg.descriptor_dim = value.parse().map_err(|_| bad("dim"))?,
                    "pooling" => {
                        cfg.pooling = PoolingKind::parse(&value).ok_or_else(|| bad("pooling"))?
                    }
                    "gem_p" => cfg.gem_p = value.parse().map_err(|_| bad("gem_p"))?,
                    "codes" => cfg.netvlad_codes = value.parse().map_err(|_| bad("codes"))?,
                    "projection" => {
                        cfg.projection = match value.as_str() {
                            "auto" => None,
                            "true" | "linear" | "yes" => Some(true),
                            "false" | "none" | "no" => Some(false),
                            _ => return Err(bad("projection")),
                        }
                    }
                    "bias" => cfg.bias = value.parse().map_err(|_| bad("bias"))?,
                    "expand" => cfg.expand_ratio = value.parse().map_err(|_| bad("expand"))?,
                    _ => {
                        return Err(Error::Config {
                            line,
                            msg: format!("unknown key {key:?} in [model]"),
                        })
                    }
                },
                Some(b) => {
                    let o = cfg.blocks.entry(b).or_default();
                    match key.as_str() {
                        "channels" => o.channels = Some(value.parse().map_err(|_| bad("channels"))?),
                        "stride" => o.stride = Some(value.parse().map_err(|_| bad("stride"))?),
                        "expand" => o.expand = Some(value.parse().map_err(|_| bad("expand"))?),
                        _ => {
                            return Err(Error::Config {
                                line,
                                msg: format!("unknown key {key:?} in [block {b}]"),
                            })
                        }
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("[model]\n");
        s += &format!("family = {}\n", self.family);
        s += &format!("width = {}\n", self.width);
        s += &format!("depth = {}\n", self.depth);
        let [c, h, w] = self.input_shape;
        s += &format!("input = {c},{h},{w}\n");
        s += &format!("dim = {}\n", self.descriptor_dim);
        s += &format!("pooling = {}\n", self.pooling.name());
        s += &format!("gem_p = {}\n", self.gem_p);
        s += &format!("codes = {}\n", self.netvlad_codes);
        let proj = match self.projection {
            None => "auto",
            Some(true) => "true",
            Some(false) => "false",
        };
        s += &format!("projection = {proj}\n");
        s += &format!("bias = {}\n", self.bias);
        s += &format!("expand = {}\n", self.expand_ratio);
        for (i, b) in &self.blocks {
            s += &format!("\n[block {i}]\n");
            if let Some(v) = b.channels {
                s += &format!("channels = {v}\n");
            }
            if let Some(v) = b.stride {
                s += &format!("stride = {v}\n");
            }
            if let Some(v) = b.expand {
                s += &format!("expand = {v}\n");
            }
        }
        s
    }
}

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
    shape: [usize; 3],
}

impl Builder {
    fn uniform(&mut self, n: usize, k: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.random_range(-k..=k)).collect()
    }

    fn conv(&mut self, cout: usize, kernel: usize, stride: usize, groups: usize, bias: bool) {
        let [cin, h, w] = self.shape;
        let cin_g = cin / groups;
        let fan_in = cin_g * kernel * kernel;
        let k = 1.0 / (fan_in as f32).sqrt();
        let weight = self.uniform(cout * fan_in, k);
        let bias = bias.then(|| self.uniform(cout, k));
        let pad = kernel / 2;
        let layer = ConvLayer {
            weight: Weight::F32(
                Tensor::from_f32(&[cout, cin_g, kernel, kernel], weight).expect("consistent shape"),
            ),
            bias,
            geometry: ConvGeometry::new(stride, pad, groups),
            act_scale: None,
        };
        self.layers.push(if groups > 1 && groups == cin && cout == cin {
            Layer::DepthwiseConv(layer)
        } else {
            Layer::Conv(layer)
        });
        self.shape = [
            cout,
            (h + 2 * pad - kernel) / stride + 1,
            (w + 2 * pad - kernel) / stride + 1,
        ];
    }

    fn bn(&mut self) {
        let c = self.shape[0];
        let mut draw = |lo: f32, hi: f32| -> Vec<f32> {
            (0..c).map(|_| self.rng.random_range(lo..=hi)).collect()
        };
        let gamma = draw(0.5, 1.5);
        let beta = draw(-0.1, 0.1);
        let mean = draw(-0.1, 0.1);
        let var = draw(0.5, 1.5);
        self.layers.push(Layer::BatchNorm(BatchNormLayer {
            mean,
            var,
            gamma,
            beta,
            eps: BN_EPS,
        }));
    }

    fn last(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Builds a seeded miniature backbone with its pooling head and optional
/// projection. Weights are drawn from `uniform(-k, k)`, `k = 1/sqrt(fan_in)`.
pub fn build_backbone(cfg: &ArchConfig) -> Result<ModelGraph> {
    const OP: &str = "build_backbone";
    if !(cfg.width > 0.0) || !cfg.width.is_finite() {
        return Err(Error::invalid(OP, format!("width multiplier {} must be > 0", cfg.width)));
    }
    if cfg.depth == 0 {
        return Err(Error::invalid(OP, "depth must be at least 1"));
    }
    let [c_in, h, w] = cfg.input_shape;
    if c_in == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(OP, "input shape extents must be positive"));
    }
    if cfg.expand_ratio == 0 {
        return Err(Error::invalid(OP, "expansion ratio must be positive"));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        layers: Vec::new(),
        shape: cfg.input_shape,
    };
    let base = cfg.base_channels();
    let ov = |i: usize| cfg.blocks.get(&i).cloned().unwrap_or_default();

    match cfg.family {
        Family::MiniVgg => {
            for i in 0..cfg.depth {
                let o = ov(i);
                let cout = o.channels.unwrap_or(base << i.min(6));
                let stride = o.stride.unwrap_or(if i == 0 { 1 } else { 2 });
                b.conv(cout, 3, stride, 1, cfg.bias);
                b.layers.push(Layer::Relu);
            }
        }
        Family::MiniResNet => {
            b.conv(base, 3, 2, 1, false);
            b.bn();
            b.layers.push(Layer::Relu);
            for i in 0..cfg.depth {
                let o = ov(i);
                let c = b.shape[0];
                if i > 0 || o.channels.is_some() || o.stride.is_some() {
                    let cout = o.channels.unwrap_or(if i > 0 { 2 * c } else { c });
                    let stride = o.stride.unwrap_or(if i > 0 { 2 } else { 1 });
                    b.conv(cout, 3, stride, 1, false);
                    b.bn();
                    b.layers.push(Layer::Relu);
                }
                let source = b.last();
                let c = b.shape[0];
                b.conv(c, 3, 1, 1, false);
                b.bn();
                b.layers.push(Layer::Relu);
                b.conv(c, 3, 1, 1, false);
                b.bn();
                b.layers.push(Layer::ResidualAdd { source });
                b.layers.push(Layer::Relu);
            }
        }
        Family::MiniMobileNet => {
            b.conv(base, 3, 2, 1, false);
            b.bn();
            b.layers.push(Layer::Relu6);
            for i in 0..cfg.depth {
                let o = ov(i);
                let cin = b.shape[0];
                let (default_c, default_s) = if i % 2 == 0 { (cin, 1) } else { (2 * cin, 2) };
                let cout = o.channels.unwrap_or(default_c);
                let stride = o.stride.unwrap_or(default_s);
                let hidden = cin * o.expand.unwrap_or(cfg.expand_ratio);
                let source = b.last();
                b.conv(hidden, 1, 1, 1, false);
                b.bn();
                b.layers.push(Layer::Relu6);
                b.conv(hidden, 3, stride, hidden, false);
                b.bn();
                b.layers.push(Layer::Relu6);
                b.conv(cout, 1, 1, 1, false);
                b.bn();
                if stride == 1 && cin == cout {
                    b.layers.push(Layer::ResidualAdd { source });
                }
            }
        }
    }

    let channels = b.shape[0];
    let head = match cfg.pooling {
        PoolingKind::Spoc => PoolingHead::Spoc,
        PoolingKind::Mac => PoolingHead::Mac,
        PoolingKind::Gem => {
            if !(cfg.gem_p >= 1.0) {
                return Err(Error::invalid(OP, format!("GeM exponent {} must be >= 1", cfg.gem_p)));
            }
            PoolingHead::Gem {
                p: vec![cfg.gem_p; channels],
            }
        }
        PoolingKind::NetVlad => {
            if cfg.netvlad_codes == 0 {
                return Err(Error::invalid(OP, "NetVLAD needs at least one code"));
            }
            let k = 1.0 / (channels as f32).sqrt();
            let codes = b.uniform(cfg.netvlad_codes * channels, k);
            PoolingHead::NetVlad {
                codes: Tensor::from_f32(&[cfg.netvlad_codes, channels], codes)?,
            }
        }
    };
    let pooled = head.output_dim(channels);
    b.layers.push(Layer::Pooling(PoolingLayer {
        head,
        act_scale: None,
    }));

    let dim = if cfg.descriptor_dim == 0 { pooled } else { cfg.descriptor_dim };
    let project = match cfg.projection {
        None => dim != pooled,
        Some(true) => true,
        Some(false) if dim != pooled => {
            return Err(Error::invalid(
                OP,
                format!(
                    "descriptor dim {dim} incompatible with {} pooling output {pooled} without a projection",
                    cfg.pooling.name()
                ),
            ))
        }
        Some(false) => false,
    };
    if project {
        let k = 1.0 / (pooled as f32).sqrt();
        let weight = b.uniform(dim * pooled, k);
        let bias = cfg.bias.then(|| b.uniform(dim, k));
        b.layers.push(Layer::Linear(LinearLayer {
            weight: Weight::F32(Tensor::from_f32(&[dim, pooled], weight)?),
            bias,
            act_scale: None,
        }));
    }

    let model = ModelGraph {
        arch: cfg.family.name().to_string(),
        input_shape: cfg.input_shape,
        layers: b.layers,
        precision: None,
    };
    model.infer_shapes()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip() {
        let mut cfg = ArchConfig::new(Family::MiniMobileNet);
        cfg.depth = 3;
        cfg.width = 0.5;
        cfg.pooling = PoolingKind::NetVlad;
        cfg.descriptor_dim = 32;
        cfg.blocks.insert(
            1,
            BlockOverride {
                channels: Some(24),
                stride: Some(1),
                expand: None,
            },
        );
        let text = cfg.to_text();
        assert_eq!(ArchConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ArchConfig::parse("[model]\nfamily = mini-vgg\ndepth = two\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = ArchConfig::parse("[model]\nfamily = lenet\n").unwrap_err();
        assert!(err.to_string().contains("unknown backbone family"), "{err}");
        assert!(ArchConfig::parse("[model]\nfamily = mini-vgg\nfoo = 1\n").is_err());
        assert!(ArchConfig::parse("depth = 1\n").is_err());
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut cfg = ArchConfig::new(Family::MiniVgg);
        cfg.depth = 0;
        assert!(build_backbone(&cfg).is_err());
        let mut cfg = ArchConfig::new(Family::MiniVgg);
        cfg.width = 0.0;
        assert!(build_backbone(&cfg).is_err());
        let mut cfg = ArchConfig::new(Family::MiniVgg);
        cfg.descriptor_dim = 7;
        cfg.projection = Some(false);
        assert!(build_backbone(&cfg).is_err());
    }

    #[test]
    fn descriptor_dim_matches_config() {
        for family in [Family::MiniMobileNet, Family::MiniResNet, Family::MiniVgg] {
            for pooling in [PoolingKind::Spoc, PoolingKind::Mac, PoolingKind::Gem, PoolingKind::NetVlad] {
                let mut cfg = ArchConfig::new(family);
                cfg.input_shape = [3, 16, 16];
                cfg.pooling = pooling;
                cfg.descriptor_dim = 24;
                let m = build_backbone(&cfg).unwrap();
                assert_eq!(m.descriptor_dim().unwrap(), 24, "{family} {pooling:?}");
            }
        }
    }
}
