use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerChannel,
    PerTensor,
}

/// Symmetric linear quantization parameters. Per-channel scales run along
/// axis 0 (output channels); per-tensor params hold a single scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub scales: Vec<f32>,
    pub granularity: Granularity,
}

/// Largest representable magnitude, `2^(b-1) - 1`.
pub fn qmax(bits: u32) -> Result<i32> {
    match bits {
        4 | 8 => Ok((1 << (bits - 1)) - 1),
        other => Err(Error::UnsupportedBitwidth(other)),
    }
}

impl QuantParams {
    pub fn per_tensor(bits: u32, scale: f32) -> Result<Self> {
        let p = QuantParams {
            bits,
            scales: vec![scale],
            granularity: Granularity::PerTensor,
        };
        p.validate(None)?;
        Ok(p)
    }

    pub fn per_channel(bits: u32, scales: Vec<f32>) -> Result<Self> {
        let p = QuantParams {
            bits,
            scales,
            granularity: Granularity::PerChannel,
        };
        p.validate(None)?;
        Ok(p)
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Checks bit-width, positivity of scales, and (when given) the channel
    /// count a per-channel vector must match.
    pub fn validate(&self, channels: Option<usize>) -> Result<()> {
        qmax(self.bits)?;
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(
                "QuantParams",
                format!("scale {s} must be positive and finite"),
            ));
        }
        match self.granularity {
            Granularity::PerTensor if self.scales.len() != 1 => Err(Error::ShapeMismatch {
                op: "QuantParams",
                dim: "per-tensor scale count",
                expected: 1,
                actual: self.scales.len(),
            }),
            Granularity::PerChannel => match channels {
                Some(c) if c != self.scales.len() => Err(Error::ShapeMismatch {
                    op: "QuantParams",
                    dim: "per-channel scale count (Cout)",
                    expected: c,
                    actual: self.scales.len(),
                }),
                _ if self.scales.is_empty() => {
                    Err(Error::invalid("QuantParams", "empty per-channel scale vector"))
                }
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Scale applied to flat element `i` of a tensor with `per_channel`
    /// elements per output channel.
    #[inline]
    pub(crate) fn scale_at(&self, i: usize, per_channel: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel => self.scales[i / per_channel],
        }
    }
}

fn maxabs_scale(values: &[f32], qmax: i32) -> f32 {
    let m = values.iter().fold(0f32, |acc, v| acc.max(v.abs()));
    if m > 0.0 {
        m / qmax as f32
    } else {
        1.0
    }
}

/// Max-abs calibration: `s = max|w| / (2^(b-1) - 1)` per output channel or
/// for the whole tensor. An all-zero slice gets the sentinel scale 1.
pub fn calibrate_maxabs(w: &Tensor, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    let q = qmax(bits)?;
    let data = w.as_f32()?;
    let scales = match granularity {
        Granularity::PerTensor => vec![maxabs_scale(data, q)],
        Granularity::PerChannel => {
            let c = w.shape().first().copied().unwrap_or(1).max(1);
            let per = data.len() / c;
            if per == 0 {
                vec![1.0; c]
            } else {
                data.chunks(per).map(|ch| maxabs_scale(ch, q)).collect()
            }
        }
    };
    Ok(QuantParams {
        bits,
        scales,
        granularity,
    })
}
