//! Global pooling heads that turn a `[D, H, W]` feature map into a descriptor.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::l2_normalize;
use crate::tensor::Tensor;

/// Inputs to GeM are floored here before exponentiation.
pub const GEM_EPS: f32 = 1e-6;
pub const DEFAULT_GEM_P: f32 = 3.0;
pub const DEFAULT_NETVLAD_CODES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    Spoc,
    Mac,
    Gem,
    NetVlad,
}

impl PoolingKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Spoc => "spoc",
            PoolingKind::Mac => "mac",
            PoolingKind::Gem => "gem",
            PoolingKind::NetVlad => "netvlad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "spoc" | "avg" => PoolingKind::Spoc,
            "mac" | "max" => PoolingKind::Mac,
            "gem" => PoolingKind::Gem,
            "netvlad" => PoolingKind::NetVlad,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoolingHead {
    Spoc,
    Mac,
    /// `p` is either a single shared exponent or one per channel.
    Gem { p: Vec<f32> },
    /// `codes` has shape `[K, d]`.
    NetVlad { codes: Tensor },
}

impl PoolingHead {
    pub fn kind(&self) -> PoolingKind {
        match self {
            PoolingHead::Spoc => PoolingKind::Spoc,
            PoolingHead::Mac => PoolingKind::Mac,
            PoolingHead::Gem { .. } => PoolingKind::Gem,
            PoolingHead::NetVlad { .. } => PoolingKind::NetVlad,
        }
    }

    pub fn output_dim(&self, channels: usize) -> usize {
        match self {
            PoolingHead::NetVlad { codes } => codes.shape()[0] * channels,
            _ => channels,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            PoolingHead::Spoc | PoolingHead::Mac => 0,
            PoolingHead::Gem { p } => p.len(),
            PoolingHead::NetVlad { codes } => codes.numel(),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        match self {
            PoolingHead::Gem { p } => {
                if p.len() != 1 && p.len() != channels {
                    return Err(Error::ShapeMismatch {
                        op: "PoolingHead::Gem",
                        dim: "exponent count",
                        expected: channels,
                        actual: p.len(),
                    });
                }
                check_gem_p(p)
            }
            PoolingHead::NetVlad { codes } => {
                let s = codes.shape();
                if s.len() != 2 || s[0] == 0 {
                    return Err(Error::invalid(
                        "PoolingHead::NetVlad",
                        "codes must be a non-empty [K, d] matrix",
                    ));
                }
                if s[1] != channels {
                    return Err(Error::ShapeMismatch {
                        op: "PoolingHead::NetVlad",
                        dim: "code dimension",
                        expected: channels,
                        actual: s[1],
                    });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Pools one `[C, H, W]` map stored contiguously.
    pub(crate) fn pool_map(&self, fm: &[f32], c: usize, h: usize, w: usize) -> Result<Vec<f32>> {
        match self {
            PoolingHead::Spoc => Ok(spoc_raw(fm, c, h * w)),
            PoolingHead::Mac => Ok(mac_raw(fm, c, h * w)),
            PoolingHead::Gem { p } => Ok(gem_raw(fm, c, h * w, p)),
            PoolingHead::NetVlad { codes } => {
                let hw = h * w;
                let mut rows = vec![0f32; hw * c];
                for ch in 0..c {
                    for n in 0..hw {
                        rows[n * c + ch] = fm[ch * hw + n];
                    }
                }
                let k = codes.shape()[0];
                let mut v = netvlad_residuals_raw(&rows, hw, c, codes.as_f32()?, k);
                vlad_normalize(&mut v, k, c);
                Ok(v)
            }
        }
    }
}

fn check_gem_p(p: &[f32]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("gem", "exponent vector is empty"));
    }
    if let Some(bad) = p.iter().find(|v| !(**v >= 1.0)) {
        return Err(Error::invalid("gem", format!("exponent p = {bad} must be >= 1")));
    }
    Ok(())
}

fn map_dims(op: &'static str, features: &Tensor) -> Result<(usize, usize)> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            dim: "feature rank",
            expected: 3,
            actual: s.len(),
        });
    }
    if s[1] == 0 || s[2] == 0 {
        return Err(Error::invalid(op, "spatial extents must be at least 1"));
    }
    Ok((s[0], s[1] * s[2]))
}

fn spoc_raw(fm: &[f32], c: usize, hw: usize) -> Vec<f32> {
    (0..c)
        .map(|ch| {
            let sum: f64 = fm[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum();
            (sum / hw as f64) as f32
        })
        .collect()
}

fn mac_raw(fm: &[f32], c: usize, hw: usize) -> Vec<f32> {
    (0..c)
        .map(|ch| {
            fm[ch * hw..(ch + 1) * hw]
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect()
}

fn gem_raw(fm: &[f32], c: usize, hw: usize, p: &[f32]) -> Vec<f32> {
    (0..c)
        .map(|ch| {
            let p = if p.len() == 1 { p[0] } else { p[ch] } as f64;
            let vals = &fm[ch * hw..(ch + 1) * hw];
            // factor out the maximum so large exponents cannot overflow
            let m = vals.iter().map(|&v| v.max(GEM_EPS) as f64).fold(0.0, f64::max);
            let mean = vals
                .iter()
                .map(|&v| (v.max(GEM_EPS) as f64 / m).powf(p))
                .sum::<f64>()
                / hw as f64;
            (m * mean.powf(1.0 / p)) as f32
        })
        .collect()
}

/// Uniformly weighted spatial average per channel.
pub fn spoc(features: &Tensor) -> Result<Vec<f32>> {
    let (c, hw) = map_dims("spoc", features)?;
    Ok(spoc_raw(features.as_f32()?, c, hw))
}

/// Spatial maximum per channel.
pub fn mac(features: &Tensor) -> Result<Vec<f32>> {
    let (c, hw) = map_dims("mac", features)?;
    Ok(mac_raw(features.as_f32()?, c, hw))
}

/// Generalized mean `(mean F^p)^(1/p)` per channel. `p` holds one shared
/// exponent or one per channel.
pub fn gem(features: &Tensor, p: &[f32]) -> Result<Vec<f32>> {
    let (c, hw) = map_dims("gem", features)?;
    check_gem_p(p)?;
    if p.len() != 1 && p.len() != c {
        return Err(Error::ShapeMismatch {
            op: "gem",
            dim: "exponent count",
            expected: c,
            actual: p.len(),
        });
    }
    Ok(gem_raw(features.as_f32()?, c, hw, p))
}

fn assign_into(x: &[f32], codes: &[f32], k: usize, out: &mut [f32]) {
    let d = x.len();
    for (j, o) in out.iter_mut().enumerate().take(k) {
        *o = codes[j * d..(j + 1) * d]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum();
    }
    let max = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0f32;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn code_dims(op: &'static str, codes: &Tensor, d: usize) -> Result<usize> {
    let s = codes.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::invalid(op, "codes must be a non-empty [K, d] matrix"));
    }
    if s[1] != d {
        return Err(Error::ShapeMismatch {
            op,
            dim: "code dimension",
            expected: d,
            actual: s[1],
        });
    }
    Ok(s[0])
}

/// Soft assignment of one local descriptor to the codes: a softmax over the
/// inner products `<x, c_k>`.
pub fn netvlad_assign(x: &[f32], codes: &Tensor) -> Result<Vec<f32>> {
    let k = code_dims("netvlad_assign", codes, x.len())?;
    let mut out = vec![0f32; k];
    assign_into(x, codes.as_f32()?, k, &mut out);
    Ok(out)
}

fn netvlad_residuals_raw(rows: &[f32], n: usize, d: usize, codes: &[f32], k: usize) -> Vec<f32> {
    let mut v = vec![0f32; k * d];
    let mut a = vec![0f32; k];
    for i in 0..n {
        let x = &rows[i * d..(i + 1) * d];
        assign_into(x, codes, k, &mut a);
        for j in 0..k {
            let c = &codes[j * d..(j + 1) * d];
            let block = &mut v[j * d..(j + 1) * d];
            for t in 0..d {
                block[t] += a[j] * (x[t] - c[t]);
            }
        }
    }
    v
}

fn vlad_normalize(v: &mut [f32], k: usize, d: usize) {
    for j in 0..k {
        l2_normalize(&mut v[j * d..(j + 1) * d]);
    }
    l2_normalize(v);
}

fn local_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::invalid(op, "local descriptors must be a non-empty [N, d] matrix"));
    }
    Ok((s[0], s[1]))
}

/// Weighted residual sums `v_k = sum_n a_nk (x_n - c_k)`, concatenated
/// k-major, before any normalization.
pub fn netvlad_residuals(x: &Tensor, codes: &Tensor) -> Result<Vec<f32>> {
    let (n, d) = local_dims("netvlad_residuals", x)?;
    let k = code_dims("netvlad_residuals", codes, d)?;
    Ok(netvlad_residuals_raw(x.as_f32()?, n, d, codes.as_f32()?, k))
}

/// NetVLAD aggregation with intra-normalization of each code block followed
/// by global L2 normalization. Output length is `K * d`.
pub fn netvlad_pool(x: &Tensor, codes: &Tensor) -> Result<Vec<f32>> {
    let (_, d) = local_dims("netvlad_pool", x)?;
    let k = code_dims("netvlad_pool", codes, d)?;
    let mut v = netvlad_residuals(x, codes)?;
    vlad_normalize(&mut v, k, d);
    Ok(v)
}

/// Optional linear projection (`[D_out, D_in]` weight, optional bias) then L2
/// normalization.
pub fn project_normalize(
    v: &[f32],
    projection: Option<(&Tensor, Option<&[f32]>)>,
) -> Result<Vec<f32>> {
    let mut out = match projection {
        None => v.to_vec(),
        Some((w, bias)) => {
            let s = w.shape();
            if s.len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "project_normalize",
                    dim: "projection rank",
                    expected: 2,
                    actual: s.len(),
                });
            }
            if s[1] != v.len() {
                return Err(Error::ShapeMismatch {
                    op: "project_normalize",
                    dim: "projection input dimension",
                    expected: s[1],
                    actual: v.len(),
                });
            }
            if let Some(b) = bias {
                if b.len() != s[0] {
                    return Err(Error::ShapeMismatch {
                        op: "project_normalize",
                        dim: "projection bias length",
                        expected: s[0],
                        actual: b.len(),
                    });
                }
            }
            linear_raw(v, w.as_f32()?, s[0], bias)
        }
    };
    l2_normalize(&mut out);
    Ok(out)
}

pub(crate) fn linear_raw(v: &[f32], w: &[f32], d_out: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let d_in = v.len();
    (0..d_out)
        .map(|o| {
            let dot: f32 = w[o * d_in..(o + 1) * d_in]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum();
            dot + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Seeded k-means (Lloyd iterations) over local descriptors, used to place
/// NetVLAD codes. Returns a `[k, d]` matrix.
pub fn kmeans_codes(points: &[f32], d: usize, k: usize, iters: usize, seed: u64) -> Result<Tensor> {
    if d == 0 || points.len() % d != 0 {
        return Err(Error::invalid("kmeans_codes", "points are not a whole number of rows"));
    }
    let n = points.len() / d;
    if k == 0 || n < k {
        return Err(Error::invalid(
            "kmeans_codes",
            format!("need at least k = {k} points, got {n}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f32> = sample(&mut rng, n, k)
        .into_iter()
        .flat_map(|i| points[i * d..(i + 1) * d].iter().copied())
        .collect();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let x = &points[i * d..(i + 1) * d];
            let best = (0..k)
                .map(|j| {
                    let c = &centers[j * d..(j + 1) * d];
                    let dist: f32 = x.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum();
                    (j, dist)
                })
                .fold((0, f32::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc })
                .0;
            if best != *a {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for t in 0..d {
                sums[a * d + t] += points[i * d + t] as f64;
            }
        }
        for j in 0..k {
            // empty clusters keep their previous center
            if counts[j] > 0 {
                for t in 0..d {
                    centers[j * d + t] = (sums[j * d + t] / counts[j] as f64) as f32;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Tensor::from_f32(&[k, d], centers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_2x2() -> Tensor {
        Tensor::from_f32(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn spoc_mac_basics() {
        assert_eq!(spoc(&map_2x2()).unwrap(), vec![2.5]);
        assert_eq!(mac(&map_2x2()).unwrap(), vec![4.0]);
        let neg = Tensor::from_f32(&[1, 1, 3], vec![-3.0, -1.5, -2.0]).unwrap();
        assert_eq!(mac(&neg).unwrap(), vec![-1.5]);
        let constant = Tensor::from_f32(&[2, 1, 2], vec![0.3, 0.3, -4.0, -4.0]).unwrap();
        assert_eq!(spoc(&constant).unwrap(), vec![0.3, -4.0]);
    }

    #[test]
    fn gem_scalar_cases() {
        assert!((gem(&map_2x2(), &[1.0]).unwrap()[0] - 2.5).abs() < 1e-6);
        let g3 = gem(&map_2x2(), &[3.0]).unwrap()[0];
        assert!((g3 as f64 - 25f64.powf(1.0 / 3.0)).abs() < 1e-5);
        assert!((g3 - 2.9240).abs() < 1e-4);
        let g100 = gem(&map_2x2(), &[100.0]).unwrap()[0];
        assert!((g100 - 3.945).abs() < 1e-3, "{g100}");
        assert!((4.0 - g100) / 4.0 < 0.015);
    }

    #[test]
    fn gem_rejects_small_p() {
        assert!(gem(&map_2x2(), &[0.5]).is_err());
        assert!(gem(&map_2x2(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn assign_softmax_values() {
        let codes = Tensor::from_f32(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = netvlad_assign(&[1.0, 0.0], &codes).unwrap();
        let e = std::f32::consts::E;
        assert!((a[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((a[1] - 1.0 / (e + 1.0)).abs() < 1e-6);
        let a = netvlad_assign(&[0.5, 0.5], &codes).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
    }

    #[test]
    fn residuals_small_cases() {
        let c0 = Tensor::from_f32(&[1, 2], vec![0.4, -0.2]).unwrap();
        let x = Tensor::from_f32(&[1, 2], vec![0.4, -0.2]).unwrap();
        assert_eq!(netvlad_residuals(&x, &c0).unwrap(), vec![0.0, 0.0]);

        let codes = Tensor::from_f32(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_f32(&[1, 2], vec![1.0, 0.0]).unwrap();
        let v = netvlad_residuals(&x, &codes).unwrap();
        let a1 = 1.0 / (std::f32::consts::E + 1.0);
        assert!(v[0].abs() < 1e-7 && v[1].abs() < 1e-7);
        assert!((v[2] - a1).abs() < 1e-6 && (v[3] + a1).abs() < 1e-6);
        assert!((v[2] - 0.2689).abs() < 1e-4);
        assert_eq!(netvlad_pool(&x, &codes).unwrap().len(), 4);
    }

    #[test]
    fn projection_cases() {
        assert_eq!(project_normalize(&[3.0, 4.0], None).unwrap(), vec![0.6, 0.8]);
        let eye = Tensor::from_f32(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            project_normalize(&[0.6, 0.8], Some((&eye, None))).unwrap(),
            vec![0.6, 0.8]
        );
        assert_eq!(project_normalize(&[0.0, 0.0], None).unwrap(), vec![0.0, 0.0]);
        let wide = Tensor::from_f32(&[1, 3], vec![1.0; 3]).unwrap();
        assert!(project_normalize(&[1.0, 2.0], Some((&wide, None))).is_err());
    }

    #[test]
    fn kmeans_separates_two_clusters() {
        let mut pts = Vec::new();
        for i in 0..10 {
            let j = i as f32 * 0.01;
            pts.extend_from_slice(&[j, 0.0]);
            pts.extend_from_slice(&[5.0 + j, 5.0]);
        }
        let codes = kmeans_codes(&pts, 2, 2, 20, 3).unwrap();
        let c = codes.as_f32().unwrap();
        let mut xs = [c[0], c[2]];
        xs.sort_by(f32::total_cmp);
        assert!((xs[0] - 0.045).abs() < 1e-4 && (xs[1] - 5.045).abs() < 1e-4);
        assert_eq!(kmeans_codes(&pts, 2, 2, 20, 3).unwrap(), codes);
    }

    #[test]
    fn head_param_counts() {
        let codes = Tensor::zeros(&[8, 16]);
        let vlad = PoolingHead::NetVlad { codes };
        assert_eq!(vlad.output_dim(16), 128);
        assert_eq!(vlad.param_count(), 128);
        assert_eq!(PoolingHead::Gem { p: vec![3.0; 16] }.param_count(), 16);
        assert_eq!(PoolingHead::Mac.param_count(), 0);
    }
}
