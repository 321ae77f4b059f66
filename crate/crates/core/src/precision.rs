use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Storage precision of one quantizable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Precision {
    Int4,
    Int8,
    Fp16,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::Int4, Precision::Int8, Precision::Fp16];

    pub fn bits(self) -> u32 {
        match self {
            Precision::Int4 => 4,
            Precision::Int8 => 8,
            Precision::Fp16 => 16,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            4 => Some(Precision::Int4),
            8 => Some(Precision::Int8),
            16 => Some(Precision::Fp16),
            _ => None,
        }
    }

    pub fn is_integer(self) -> bool {
        self != Precision::Fp16
    }

    /// Next lower precision, if any.
    pub fn lower(self) -> Option<Self> {
        match self {
            Precision::Fp16 => Some(Precision::Int8),
            Precision::Int8 => Some(Precision::Int4),
            Precision::Int4 => None,
        }
    }
}

/// Per-layer precision vector over the quantizable layers of a model, in
/// graph order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrecisionConfig(pub Vec<Precision>);

impl PrecisionConfig {
    pub fn uniform(p: Precision, layers: usize) -> Self {
        PrecisionConfig(vec![p; layers])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Precision] {
        &self.0
    }

    pub fn total_bits(&self) -> u32 {
        self.0.iter().map(|p| p.bits()).sum()
    }

    pub fn mean_bits(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.total_bits() as f64 / self.0.len() as f64
    }

    /// `mean(I) <= budget`, evaluated exactly on integers.
    pub fn satisfies(&self, budget: f64) -> bool {
        (self.total_bits() as f64) <= budget * self.0.len() as f64
    }
}

impl fmt::Display for PrecisionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", p.bits())?;
        }
        Ok(())
    }
}

impl FromStr for PrecisionConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(PrecisionConfig(Vec::new()));
        }
        s.split(',')
            .map(|tok| {
                let tok = tok.trim();
                tok.parse::<u32>()
                    .ok()
                    .and_then(Precision::from_bits)
                    .ok_or_else(|| {
                        Error::invalid(
                            "PrecisionConfig::from_str",
                            format!("precision {tok:?} is not one of 4, 8, 16"),
                        )
                    })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(PrecisionConfig)
    }
}
