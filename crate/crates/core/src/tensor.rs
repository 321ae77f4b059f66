//! Dense tensors with a small set of storage types.
//!
//! Feature maps are NCHW; convolution weights are `[Cout, Cin/groups, Kh, Kw]`.
//! `I4Packed` stores two signed nibbles per byte, low nibble first, with every
//! innermost row padded to a whole number of bytes.

use std::fmt;

use crate::error::{Error, Result};
use crate::f16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    I8,
    I4Packed,
    I32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DTypeInfo {
    pub bits: u32,
    pub min: f64,
    pub max: f64,
    pub is_float: bool,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::I8 => 2,
            DType::I4Packed => 3,
            DType::I32 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F32,
            1 => DType::F16,
            2 => DType::I8,
            3 => DType::I4Packed,
            4 => DType::I32,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I8 => "i8",
            DType::I4Packed => "i4packed",
            DType::I32 => "i32",
        }
    }

    pub fn info(self) -> DTypeInfo {
        match self {
            DType::F32 => DTypeInfo {
                bits: 32,
                min: f32::MIN as f64,
                max: f32::MAX as f64,
                is_float: true,
            },
            DType::F16 => DTypeInfo {
                bits: 16,
                min: -f16::F16_MAX as f64,
                max: f16::F16_MAX as f64,
                is_float: true,
            },
            DType::I8 => DTypeInfo {
                bits: 8,
                min: -127.0,
                max: 127.0,
                is_float: false,
            },
            DType::I4Packed => DTypeInfo {
                bits: 4,
                min: -7.0,
                max: 7.0,
                is_float: false,
            },
            DType::I32 => DTypeInfo {
                bits: 32,
                min: i32::MIN as f64,
                max: i32::MAX as f64,
                is_float: false,
            },
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    /// binary16 bit patterns
    F16(Vec<u16>),
    I8(Vec<i8>),
    I4Packed(Vec<u8>),
    I32(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

/// Bytes needed to pack an int4 tensor of this shape.
pub fn i4_packed_len(shape: &[usize]) -> usize {
    let row = shape.last().copied().unwrap_or(1);
    let rows = if shape.is_empty() {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    };
    rows * row.div_ceil(2)
}

fn check_len(op: &'static str, shape: &[usize], actual: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != actual {
        return Err(Error::ShapeMismatch {
            op,
            dim: "element count",
            expected,
            actual,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_len("Tensor::from_f32", shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: Storage::F32(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            storage: Storage::F32(vec![0.0; shape.iter().product()]),
        }
    }

    pub fn from_f16_bits(shape: &[usize], data: Vec<u16>) -> Result<Self> {
        check_len("Tensor::from_f16_bits", shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: Storage::F16(data),
        })
    }

    /// Symmetric range only: `-128` is rejected.
    pub fn from_i8(shape: &[usize], data: Vec<i8>) -> Result<Self> {
        check_len("Tensor::from_i8", shape, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v == i8::MIN) {
            return Err(Error::invalid(
                "Tensor::from_i8",
                format!("value {v} outside symmetric range [-127, 127]"),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: Storage::I8(data),
        })
    }

    /// Packs logical int4 values in `[-7, 7]`.
    pub fn from_i4(shape: &[usize], values: &[i8]) -> Result<Self> {
        check_len("Tensor::from_i4", shape, values.len())?;
        if let Some(v) = values.iter().find(|&&v| !(-7..=7).contains(&v)) {
            return Err(Error::invalid(
                "Tensor::from_i4",
                format!("value {v} outside int4 range [-7, 7]"),
            ));
        }
        let row = shape.last().copied().unwrap_or(1).max(1);
        let row_bytes = row.div_ceil(2);
        let mut packed = vec![0u8; i4_packed_len(shape)];
        for (r, chunk) in values.chunks(row).enumerate() {
            for (i, &v) in chunk.iter().enumerate() {
                let nib = (v as u8) & 0x0f;
                let byte = &mut packed[r * row_bytes + i / 2];
                if i % 2 == 0 {
                    *byte |= nib;
                } else {
                    *byte |= nib << 4;
                }
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: Storage::I4Packed(packed),
        })
    }

    /// Wraps an already packed nibble buffer.
    pub fn from_i4_packed(shape: &[usize], packed: Vec<u8>) -> Result<Self> {
        let expected = i4_packed_len(shape);
        if packed.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_i4_packed",
                dim: "packed byte count",
                expected,
                actual: packed.len(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            storage: Storage::I4Packed(packed),
        };
        if t.to_i8_values().contains(&-8) {
            return Err(Error::invalid(
                "Tensor::from_i4_packed",
                "nibble -8 outside symmetric int4 range",
            ));
        }
        Ok(t)
    }

    pub fn from_i32(shape: &[usize], data: Vec<i32>) -> Result<Self> {
        check_len("Tensor::from_i32", shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: Storage::I32(data),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::F32(_) => DType::F32,
            Storage::F16(_) => DType::F16,
            Storage::I8(_) => DType::I8,
            Storage::I4Packed(_) => DType::I4Packed,
            Storage::I32(_) => DType::I32,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Ok(v),
            _ => Err(Error::DTypeMismatch {
                op: "Tensor::as_f32",
                expected: "f32",
                actual: self.dtype().name(),
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        let actual = self.dtype().name();
        match self.storage {
            Storage::F32(v) => Ok(v),
            _ => Err(Error::DTypeMismatch {
                op: "Tensor::into_f32",
                expected: "f32",
                actual,
            }),
        }
    }

    /// Logical values of an integer tensor (i8 or i4), sign-extended.
    pub fn to_i8_values(&self) -> Vec<i8> {
        match &self.storage {
            Storage::I8(v) => v.clone(),
            Storage::I4Packed(bytes) => {
                let row = self.shape.last().copied().unwrap_or(1).max(1);
                let row_bytes = row.div_ceil(2);
                let rows = self.numel() / row;
                let mut out = Vec::with_capacity(self.numel());
                for r in 0..rows {
                    for i in 0..row {
                        let byte = bytes[r * row_bytes + i / 2];
                        let nib = if i % 2 == 0 { byte & 0x0f } else { byte >> 4 };
                        // sign-extend the nibble
                        out.push(((nib << 4) as i8) >> 4);
                    }
                }
                out
            }
            _ => Vec::new(),
        }
    }

    /// Widens any storage type to `f32` values. Integer values are returned
    /// unscaled.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.storage {
            Storage::F32(v) => v.clone(),
            Storage::F16(v) => f16::f16_slice_to_f32(v),
            Storage::I8(_) | Storage::I4Packed(_) => {
                self.to_i8_values().into_iter().map(f32::from).collect()
            }
            Storage::I32(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Casts an `f32` tensor to half precision storage.
    pub fn cast_f16(&self) -> Result<Tensor> {
        let data = self.as_f32()?;
        Ok(Tensor {
            shape: self.shape.clone(),
            storage: Storage::F16(f16::f32_slice_to_f16(data)),
        })
    }

    /// Widens a half precision tensor back to `f32`.
    pub fn cast_f32(&self) -> Result<Tensor> {
        match &self.storage {
            Storage::F16(v) => Ok(Tensor {
                shape: self.shape.clone(),
                storage: Storage::F32(f16::f16_slice_to_f32(v)),
            }),
            Storage::F32(_) => Ok(self.clone()),
            _ => Err(Error::DTypeMismatch {
                op: "Tensor::cast_f32",
                expected: "f16",
                actual: self.dtype().name(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        if self.dtype() == DType::I4Packed && shape.last() != self.shape.last() {
            return Err(Error::invalid(
                "Tensor::reshape",
                "i4packed tensors can only be reshaped with the same row length",
            ));
        }
        check_len("Tensor::reshape", shape, self.numel())?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Payload in the little-endian layout used by the on-disk containers.
    pub fn payload_bytes(&self) -> Vec<u8> {
        match &self.storage {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::I8(v) => v.iter().map(|&x| x as u8).collect(),
            Storage::I4Packed(v) => v.clone(),
            Storage::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn payload_len(dtype: DType, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        match dtype {
            DType::F32 | DType::I32 => 4 * n,
            DType::F16 => 2 * n,
            DType::I8 => n,
            DType::I4Packed => i4_packed_len(shape),
        }
    }

    pub fn from_payload(dtype: DType, shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
        let needed = Self::payload_len(dtype, shape);
        if bytes.len() != needed {
            return Err(Error::Truncated {
                what: "tensor payload",
                needed,
                available: bytes.len(),
            });
        }
        match dtype {
            DType::F32 => Tensor::from_f32(
                shape,
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F16 => Tensor::from_f16_bits(
                shape,
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::I8 => Tensor::from_i8(shape, bytes.iter().map(|&b| b as i8).collect()),
            DType::I4Packed => Tensor::from_i4_packed(shape, bytes.to_vec()),
            DType::I32 => Tensor::from_i32(
                shape,
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        }
    }
}
