//! Entropy calibration: pick the clip threshold whose quantized magnitude
//! distribution has minimal KL divergence from the observed one.
//!
//! The magnitude histogram has 2048 bins over `[0, max|v|]`. Candidate
//! thresholds are the upper edges of bins 128..=2048. For a candidate `i`,
//! the reference distribution is the first `i` bins with all clipped mass
//! folded into bin `i - 1`; the candidate distribution merges the first `i`
//! (unclipped) bins into `2^(b-1) - 1` levels and spreads each level's mass
//! uniformly over the bins that are nonzero in the reference.

use crate::error::{Error, Result};
use crate::quant::params::{calibrate_maxabs, qmax, Granularity, QuantParams};
use crate::tensor::Tensor;

pub const KL_BINS: usize = 2048;
pub const KL_START_BIN: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeHistogram {
    pub counts: Vec<u64>,
    pub max_abs: f32,
}

impl MagnitudeHistogram {
    /// `None` when every value is zero.
    pub fn from_values(values: &[f32]) -> Option<Self> {
        let max_abs = values.iter().fold(0f32, |m, v| m.max(v.abs()));
        if !(max_abs > 0.0) || !max_abs.is_finite() {
            return None;
        }
        let mut counts = vec![0u64; KL_BINS];
        let per_bin = KL_BINS as f64 / max_abs as f64;
        for v in values {
            let b = ((v.abs() as f64) * per_bin) as usize;
            counts[b.min(KL_BINS - 1)] += 1;
        }
        Some(MagnitudeHistogram { counts, max_abs })
    }

    /// Upper edge of bin `i - 1`, i.e. the clip threshold for candidate `i`.
    pub fn threshold(&self, i: usize) -> f32 {
        (i as f64 * self.max_abs as f64 / KL_BINS as f64) as f32
    }
}

/// KL(reference || quantized) for clip candidate `i` (`1 <= i <= bins`).
/// Returns `+inf` when a reference bin receives no quantized mass.
pub fn kl_divergence_at(counts: &[u64], i: usize, levels: usize) -> f64 {
    let total: u64 = counts.iter().sum();
    let outliers: u64 = counts[i..].iter().sum();
    let p_at = |b: usize| -> u64 {
        if b == i - 1 {
            counts[b] + outliers
        } else {
            counts[b]
        }
    };

    let levels = levels.min(i).max(1);
    let merged = i / levels;
    let chunk_of = |b: usize| (b / merged).min(levels - 1);

    // per level: unclipped mass and number of nonzero reference bins
    let mut mass = vec![0u64; levels];
    let mut nonzero = vec![0u64; levels];
    for b in 0..i {
        let j = chunk_of(b);
        mass[j] += counts[b];
        if p_at(b) > 0 {
            nonzero[j] += 1;
        }
    }
    let q_total: u64 = mass
        .iter()
        .zip(&nonzero)
        .filter(|(_, &nz)| nz > 0)
        .map(|(m, _)| *m)
        .sum();

    let mut kl = 0f64;
    for b in 0..i {
        let p = p_at(b);
        if p == 0 {
            continue;
        }
        let j = chunk_of(b);
        if mass[j] == 0 {
            return f64::INFINITY;
        }
        let p_norm = p as f64 / total as f64;
        let q_norm = (mass[j] as f64 / nonzero[j] as f64) / q_total as f64;
        kl += p_norm * (p_norm / q_norm).ln();
    }
    kl
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlThreshold {
    /// Candidate bin count `i` (threshold is the upper edge of bin `i - 1`).
    pub bin: usize,
    pub threshold: f32,
    pub divergence: f64,
}

/// Sweeps every candidate and returns the minimizer, preferring the larger
/// threshold on ties. `None` when all values are zero.
pub fn kl_threshold(values: &[f32], bits: u32) -> Result<Option<KlThreshold>> {
    let levels = qmax(bits)? as usize;
    let Some(hist) = MagnitudeHistogram::from_values(values) else {
        return Ok(None);
    };
    let mut best = (KL_BINS, f64::INFINITY);
    for i in KL_START_BIN..=KL_BINS {
        let kl = kl_divergence_at(&hist.counts, i, levels);
        if kl <= best.1 {
            best = (i, kl);
        }
    }
    Ok(Some(KlThreshold {
        bin: best.0,
        threshold: hist.threshold(best.0),
        divergence: best.1,
    }))
}

fn kl_scale(values: &[f32], bits: u32) -> Result<f32> {
    Ok(match kl_threshold(values, bits)? {
        Some(t) => t.threshold / qmax(bits)? as f32,
        None => 1.0,
    })
}

/// Entropy-calibrated per-tensor scale for a pool of values (typically
/// activations gathered over a calibration sample). An all-zero source falls
/// back to the max-abs sentinel scale.
pub fn calibrate_kl(values: &[f32], bits: u32) -> Result<QuantParams> {
    if values.is_empty() {
        return Err(Error::invalid("calibrate_kl", "no values to calibrate from"));
    }
    QuantParams::per_tensor(bits, kl_scale(values, bits)?)
}

/// Entropy calibration applied independently to each output channel of a
/// weight tensor.
pub fn calibrate_kl_weights(w: &Tensor, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    let data = w.as_f32()?;
    match granularity {
        Granularity::PerTensor => calibrate_kl(data, bits),
        Granularity::PerChannel => {
            let c = w.shape().first().copied().unwrap_or(1).max(1);
            let per = data.len() / c;
            if per == 0 {
                return calibrate_maxabs(w, bits, granularity);
            }
            let scales = data
                .chunks(per)
                .map(|ch| kl_scale(ch, bits))
                .collect::<Result<Vec<_>>>()?;
            QuantParams::per_channel(bits, scales)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_values_keep_full_range() {
        let v = vec![-0.75f32; 100];
        let t = kl_threshold(&v, 8).unwrap().unwrap();
        assert_eq!(t.bin, KL_BINS);
        assert_eq!(t.threshold, 0.75);
        let p = calibrate_kl(&v, 8).unwrap();
        assert_eq!(p.scales, vec![0.75 / 127.0]);
    }

    #[test]
    fn all_zero_falls_back_to_sentinel() {
        let p = calibrate_kl(&[0.0; 16], 8).unwrap();
        assert_eq!(p.scales, vec![1.0]);
        assert!(calibrate_kl(&[], 8).is_err());
    }

    #[test]
    fn threshold_bounds() {
        let v: Vec<f32> = (0..500).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
        let max = v.iter().fold(0f32, |m, x| m.max(x.abs()));
        let t = kl_threshold(&v, 8).unwrap().unwrap();
        assert!(t.threshold <= max);
        assert!(t.threshold >= max * (KL_START_BIN as f32 / KL_BINS as f32) * 0.999_999);
    }

    #[test]
    fn per_channel_weights() {
        let w = Tensor::from_f32(&[2, 3], vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let p = calibrate_kl_weights(&w, 4, Granularity::PerChannel).unwrap();
        assert_eq!(p.scales, vec![0.5 / 7.0, 1.0]);
    }
}
