//! "VPRQ" model container.
//!
//! ```text
//! magic "VPRQ" | u32 version = 1 | u64 manifest length | UTF-8 manifest
//! zero padding to a 64-byte boundary | weight blobs, each 64-byte aligned
//! ```
//!
//! The manifest has one `model ...` line followed by one line per layer:
//! `<index> <kind> key=value ...`. Blob references are written as
//! `dtype:offset:length:shape`, where `dtype` is the tensor dtype code,
//! `offset` is relative to the start of the blob section and `shape` is
//! `x`-separated. Per-channel weight scales are f32 blobs referenced by
//! `wscale`; `bits` gives the integer bit-width and `act` the per-tensor
//! activation scale.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{BatchNormLayer, ConvLayer, Layer, LinearLayer, ModelGraph, PoolingLayer, Weight};
use crate::ops::ConvGeometry;
use crate::pooling::{PoolingHead, PoolingKind};
use crate::precision::PrecisionConfig;
use crate::quant::params::{Granularity, QuantParams};
use crate::tensor::{DType, Tensor};

pub const VPRQ_MAGIC: [u8; 4] = *b"VPRQ";
pub const VPRQ_VERSION: u32 = 1;
pub const BLOB_ALIGN: usize = 64;
pub const HEADER_LEN: usize = 16;

fn align_up(n: usize) -> usize {
    n.div_ceil(BLOB_ALIGN) * BLOB_ALIGN
}

#[derive(Default)]
struct BlobWriter {
    data: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, t: &Tensor) -> String {
        let offset = self.data.len();
        let bytes = t.payload_bytes();
        self.data.extend_from_slice(&bytes);
        self.data.resize(align_up(self.data.len()), 0);
        let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        format!("{}:{}:{}:{}", t.dtype().code(), offset, bytes.len(), shape.join("x"))
    }

    fn push_f32(&mut self, v: &[f32]) -> String {
        self.push(&Tensor::from_f32(&[v.len()], v.to_vec()).expect("1-d"))
    }

    fn push_f16(&mut self, v: &[f32]) -> Result<String> {
        Ok(self.push(&Tensor::from_f32(&[v.len()], v.to_vec())?.cast_f16()?))
    }
}

fn weight_attrs(w: &Weight, blobs: &mut BlobWriter, out: &mut Vec<String>) {
    match w {
        Weight::F32(t) | Weight::F16(t) => out.push(format!("w={}", blobs.push(t))),
        Weight::Quantized { values, params } => {
            out.push(format!("w={}", blobs.push(values)));
            out.push(format!("wscale={}", blobs.push_f32(&params.scales)));
            out.push(format!("bits={}", params.bits));
            let g = match params.granularity {
                Granularity::PerChannel => "channel",
                Granularity::PerTensor => "tensor",
            };
            out.push(format!("granularity={g}"));
        }
    }
}

fn bias_attr(w: &Weight, bias: &Option<Vec<f32>>, blobs: &mut BlobWriter, out: &mut Vec<String>) -> Result<()> {
    if let Some(b) = bias {
        let r = match w {
            Weight::F16(_) => blobs.push_f16(b)?,
            _ => blobs.push_f32(b),
        };
        out.push(format!("b={r}"));
    }
    Ok(())
}

/// Serializes a model to bytes. Identical models give identical bytes.
pub fn encode_model(model: &ModelGraph) -> Result<Vec<u8>> {
    model.infer_shapes()?;
    let mut blobs = BlobWriter::default();
    let mut manifest = String::new();
    let [c, h, w] = model.input_shape;
    let precision = model
        .precision
        .as_ref()
        .map_or_else(|| "none".to_string(), |p| p.to_string());
    manifest += &format!(
        "model arch={} input={c}x{h}x{w} layers={} precision={precision}\n",
        model.arch,
        model.layers.len()
    );
    for (i, layer) in model.layers.iter().enumerate() {
        let mut attrs: Vec<String> = vec![i.to_string(), layer.kind_name().to_string()];
        match layer {
            Layer::Conv(cv) | Layer::DepthwiseConv(cv) => {
                let g = cv.geometry;
                attrs.push(format!("stride={}", g.stride));
                attrs.push(format!("pad={}", g.padding));
                attrs.push(format!("groups={}", g.groups));
                weight_attrs(&cv.weight, &mut blobs, &mut attrs);
                bias_attr(&cv.weight, &cv.bias, &mut blobs, &mut attrs)?;
                if let Some(s) = cv.act_scale {
                    attrs.push(format!("act={s}"));
                }
            }
            Layer::BatchNorm(bn) => {
                attrs.push(format!("mean={}", blobs.push_f32(&bn.mean)));
                attrs.push(format!("var={}", blobs.push_f32(&bn.var)));
                attrs.push(format!("gamma={}", blobs.push_f32(&bn.gamma)));
                attrs.push(format!("beta={}", blobs.push_f32(&bn.beta)));
                attrs.push(format!("eps={}", bn.eps));
            }
            Layer::Relu | Layer::Relu6 => {}
            Layer::ResidualAdd { source } => attrs.push(format!("source={source}")),
            Layer::Pooling(p) => {
                attrs.push(format!("kind={}", p.head.kind().name()));
                match &p.head {
                    PoolingHead::Gem { p } => attrs.push(format!("p={}", blobs.push_f32(p))),
                    PoolingHead::NetVlad { codes } => {
                        attrs.push(format!("codes={}", blobs.push(codes)))
                    }
                    _ => {}
                }
                if let Some(s) = p.act_scale {
                    attrs.push(format!("act={s}"));
                }
            }
            Layer::Linear(l) => {
                weight_attrs(&l.weight, &mut blobs, &mut attrs);
                bias_attr(&l.weight, &l.bias, &mut blobs, &mut attrs)?;
                if let Some(s) = l.act_scale {
                    attrs.push(format!("act={s}"));
                }
            }
        }
        manifest += &attrs.join(" ");
        manifest.push('\n');
    }

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + BLOB_ALIGN + blobs.data.len());
    out.extend_from_slice(&VPRQ_MAGIC);
    out.extend_from_slice(&VPRQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.resize(align_up(out.len()), 0);
    out.extend_from_slice(&blobs.data);
    Ok(out)
}

struct LineAttrs<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
    blobs: &'a [u8],
}

impl<'a> LineAttrs<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Manifest {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.map.get(key).copied()
    }

    fn req(&self, key: &str) -> Result<&'a str> {
        self.get(key).ok_or_else(|| self.err(format!("missing attribute {key:?}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.req(key)?;
        v.parse()
            .map_err(|_| self.err(format!("attribute {key}={v:?} is not a valid number")))
    }

    fn opt_num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|_| self.num(key)).transpose()
    }

    fn tensor(&self, key: &str) -> Result<Tensor> {
        let r = self.req(key)?;
        let parts: Vec<&str> = r.split(':').collect();
        if parts.len() != 4 {
            return Err(self.err(format!("blob reference {key}={r:?} is malformed")));
        }
        let code: u8 = parts[0].parse().map_err(|_| self.err(format!("bad dtype in {key}")))?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| self.err(format!("unknown dtype code {code} in {key}")))?;
        let offset: usize = parts[1].parse().map_err(|_| self.err(format!("bad offset in {key}")))?;
        let len: usize = parts[2].parse().map_err(|_| self.err(format!("bad length in {key}")))?;
        let shape: Vec<usize> = if parts[3].is_empty() {
            Vec::new()
        } else {
            parts[3]
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| self.err(format!("bad shape in {key}")))?
        };
        if offset % BLOB_ALIGN != 0 {
            return Err(self.err(format!("blob {key} offset {offset} is not {BLOB_ALIGN}-byte aligned")));
        }
        let end = offset.checked_add(len).ok_or_else(|| self.err("blob range overflows"))?;
        if end > self.blobs.len() {
            return Err(Error::Truncated {
                what: "weight blob",
                needed: end,
                available: self.blobs.len(),
            });
        }
        if Tensor::payload_len(dtype, &shape) != len {
            return Err(self.err(format!("blob {key} length {len} does not match shape {shape:?}")));
        }
        Tensor::from_payload(dtype, &shape, &self.blobs[offset..end])
    }

    fn f32_vec(&self, key: &str) -> Result<Vec<f32>> {
        Ok(self.tensor(key)?.to_f32_vec())
    }

    fn weight(&self) -> Result<Weight> {
        let t = self.tensor("w")?;
        match t.dtype() {
            DType::F32 => Ok(Weight::F32(t)),
            DType::F16 => Ok(Weight::F16(t)),
            DType::I8 | DType::I4Packed => {
                let bits: u32 = self.num("bits")?;
                let granularity = match self.get("granularity").unwrap_or("channel") {
                    "channel" => Granularity::PerChannel,
                    "tensor" => Granularity::PerTensor,
                    g => return Err(self.err(format!("unknown granularity {g:?}"))),
                };
                let params = QuantParams {
                    bits,
                    scales: self.f32_vec("wscale")?,
                    granularity,
                };
                let channels = (granularity == Granularity::PerChannel).then(|| t.shape()[0]);
                params.validate(channels).map_err(|e| self.err(e.to_string()))?;
                let w = Weight::Quantized { values: t, params };
                crate::graph::check_weight_dtype(&w).map_err(|e| self.err(e.to_string()))?;
                Ok(w)
            }
            DType::I32 => Err(self.err("i32 weights are not supported")),
        }
    }

    fn bias(&self) -> Result<Option<Vec<f32>>> {
        self.get("b").map(|_| self.f32_vec("b")).transpose()
    }
}

/// Parses a serialized model.
pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != VPRQ_MAGIC {
            return Err(Error::BadMagic {
                expected: VPRQ_MAGIC,
                found: [bytes[0], bytes[1], bytes[2], bytes[3]],
            });
        }
        return Err(Error::Truncated {
            what: "VPRQ header",
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if bytes[..4] != VPRQ_MAGIC {
        return Err(Error::BadMagic {
            expected: VPRQ_MAGIC,
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VPRQ_VERSION {
        return Err(Error::VersionMismatch {
            expected: VPRQ_VERSION,
            found: version,
        });
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let mend = HEADER_LEN.checked_add(mlen).unwrap_or(usize::MAX);
    if mend > bytes.len() {
        return Err(Error::Truncated {
            what: "VPRQ manifest",
            needed: mlen,
            available: bytes.len() - HEADER_LEN,
        });
    }
    let manifest = std::str::from_utf8(&bytes[HEADER_LEN..mend]).map_err(|_| Error::Manifest {
        line: 0,
        msg: "manifest is not valid UTF-8".into(),
    })?;
    let data_start = align_up(mend).min(bytes.len());
    let blobs = &bytes[data_start..];

    let mut lines = manifest.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Manifest {
        line: 1,
        msg: "empty manifest".into(),
    })?;
    let head = parse_line(1, header, blobs)?;
    if head.0 != "model" {
        return Err(Error::Manifest {
            line: 1,
            msg: "first manifest line must describe the model".into(),
        });
    }
    let h = head.2;
    let input: Vec<usize> = h
        .req("input")?
        .split('x')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| h.err("bad input shape"))?;
    let input_shape: [usize; 3] = input.try_into().map_err(|_| h.err("input shape must be CxHxW"))?;
    let n_layers: usize = h.num("layers")?;
    let precision = match h.req("precision")? {
        "none" => None,
        p => Some(
            p.parse::<PrecisionConfig>()
                .map_err(|e| h.err(e.to_string()))?,
        ),
    };
    let arch = h.req("arch")?.to_string();

    let mut layers = Vec::with_capacity(n_layers);
    for (n, text) in lines {
        if text.trim().is_empty() {
            continue;
        }
        let (idx, kind, a) = parse_line(n + 1, text, blobs)?;
        if idx.parse::<usize>().ok() != Some(layers.len()) {
            return Err(a.err(format!("expected layer index {}, found {idx:?}", layers.len())));
        }
        let layer = match kind {
            "conv" | "dwconv" => {
                let cv = ConvLayer {
                    weight: a.weight()?,
                    bias: a.bias()?,
                    geometry: ConvGeometry::new(a.num("stride")?, a.num("pad")?, a.num("groups")?),
                    act_scale: a.opt_num("act")?,
                };
                if kind == "conv" {
                    Layer::Conv(cv)
                } else {
                    Layer::DepthwiseConv(cv)
                }
            }
            "batchnorm" => Layer::BatchNorm(BatchNormLayer {
                mean: a.f32_vec("mean")?,
                var: a.f32_vec("var")?,
                gamma: a.f32_vec("gamma")?,
                beta: a.f32_vec("beta")?,
                eps: a.num("eps")?,
            }),
            "relu" => Layer::Relu,
            "relu6" => Layer::Relu6,
            "add" => Layer::ResidualAdd {
                source: a.num("source")?,
            },
            "pool" => {
                let kind = a.req("kind")?;
                let head = match PoolingKind::parse(kind) {
                    Some(PoolingKind::Spoc) => PoolingHead::Spoc,
                    Some(PoolingKind::Mac) => PoolingHead::Mac,
                    Some(PoolingKind::Gem) => PoolingHead::Gem { p: a.f32_vec("p")? },
                    Some(PoolingKind::NetVlad) => PoolingHead::NetVlad {
                        codes: a.tensor("codes")?,
                    },
                    None => return Err(a.err(format!("unknown pooling kind {kind:?}"))),
                };
                Layer::Pooling(PoolingLayer {
                    head,
                    act_scale: a.opt_num("act")?,
                })
            }
            "linear" => Layer::Linear(LinearLayer {
                weight: a.weight()?,
                bias: a.bias()?,
                act_scale: a.opt_num("act")?,
            }),
            other => return Err(a.err(format!("unknown layer kind {other:?}"))),
        };
        layers.push(layer);
    }
    if layers.len() != n_layers {
        return Err(Error::Manifest {
            line: 1,
            msg: format!("header declares {n_layers} layers, manifest lists {}", layers.len()),
        });
    }
    let model = ModelGraph {
        arch,
        input_shape,
        layers,
        precision,
    };
    model.infer_shapes()?;
    Ok(model)
}

fn parse_line<'a>(line: usize, text: &'a str, blobs: &'a [u8]) -> Result<(&'a str, &'a str, LineAttrs<'a>)> {
    let mut toks = text.split_whitespace();
    let first = toks.next().unwrap_or("");
    let (kind, rest): (&str, Vec<&str>) = if first == "model" {
        ("", toks.collect())
    } else {
        let kind = toks.next().ok_or(Error::Manifest {
            line,
            msg: "missing layer kind".into(),
        })?;
        (kind, toks.collect())
    };
    let mut map = BTreeMap::new();
    for tok in rest {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Manifest {
            line,
            msg: format!("attribute {tok:?} is not key=value"),
        })?;
        map.insert(k, v);
    }
    Ok((first, kind, LineAttrs { line, map, blobs }))
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_model(&bytes)
}
