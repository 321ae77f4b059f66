//! Latency benchmarking, the linear retrieval-latency model, descriptor
//! dimension planning and database memory checks.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::ops::l2_normalize;
use crate::retrieval::{search_topk, DescriptorDB};
use crate::tensor::Tensor;

/// Descriptor dimensions considered by the planner.
pub const SUPPORTED_DIMS: [usize; 4] = [512, 1024, 2048, 4096];

pub const WARMUP_RUNS: usize = 2;
pub const MIN_REPETITIONS: usize = 3;

pub const BENCH_CSV_HEADER: &str = "N,D,precision,tau_e,tau_r,tau_total,repetitions";

/// One benchmark row; times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub n: usize,
    pub d: usize,
    pub tau_e: f64,
    pub tau_r: f64,
}

impl LatencySample {
    pub fn tau_total(&self) -> f64 {
        self.tau_e + self.tau_r
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median wall-clock seconds of `f` after the warm-up runs.
pub fn time_median(repetitions: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..WARMUP_RUNS {
        f()?;
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(d) {
        l2_normalize(row);
    }
    v
}

/// Brute-force top-1 latency against a random `[n, d]` database.
pub fn bench_retrieval(n: usize, d: usize, repetitions: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let db = DescriptorDB::new(
        &Tensor::from_f32(&[n, d], random_unit_rows(&mut rng, n, d))?,
        (0..n).collect(),
    )?;
    let q = random_unit_rows(&mut rng, 1, d);
    time_median(repetitions, || search_topk(&db, &q, 1).map(|_| ()))
}

/// Single-sample forward latency of the model.
pub fn bench_encode(model: &ModelGraph, repetitions: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = model.input_shape.iter().product();
    let x: Vec<f32> = (0..per).map(|_| rng.random_range(-1.0..1.0)).collect();
    time_median(repetitions, || model.forward_sample(&x).map(|_| ()))
}

/// Encode latency once, retrieval latency for every `(N, D)` pair.
pub fn bench_latency(
    model: &ModelGraph,
    n_list: &[usize],
    d_list: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<LatencySample>> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::invalid(
            "bench_latency",
            format!("at least {MIN_REPETITIONS} repetitions are required"),
        ));
    }
    if n_list.contains(&0) || d_list.contains(&0) {
        return Err(Error::invalid("bench_latency", "N and D must be positive"));
    }
    let tau_e = bench_encode(model, repetitions, seed)?;
    let mut out = Vec::with_capacity(n_list.len() * d_list.len());
    for &n in n_list {
        for &d in d_list {
            out.push(LatencySample {
                n,
                d,
                tau_e,
                tau_r: bench_retrieval(n, d, repetitions, seed)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    /// Seconds per descriptor dimension.
    pub k1: f64,
    /// Seconds per database entry.
    pub k2: f64,
    /// Encode latency in seconds.
    pub tau_e: f64,
    pub n_range: (usize, usize),
    pub d_range: (usize, usize),
}

impl LatencyModel {
    pub fn predict_retrieval(&self, n: usize, d: usize) -> f64 {
        self.k1 * d as f64 + self.k2 * n as f64
    }

    pub fn predict_total(&self, n: usize, d: usize) -> f64 {
        self.tau_e + self.predict_retrieval(n, d)
    }
}

/// Least-squares fit of `tau_r = k1 * D + k2 * N` without intercept.
/// Negative coefficients are clamped to zero and the other refitted alone.
/// The `(D, N)` design must have rank 2.
pub fn fit_k1_k2(samples: &[LatencySample]) -> Result<LatencyModel> {
    const OP: &str = "fit_k1_k2";
    if samples.len() < 2 {
        return Err(Error::invalid(OP, "at least two samples are required"));
    }
    let (mut sdd, mut snn, mut sdn, mut sdt, mut snt) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for s in samples {
        let (d, n, t) = (s.d as f64, s.n as f64, s.tau_r);
        sdd += d * d;
        snn += n * n;
        sdn += d * n;
        sdt += d * t;
        snt += n * t;
    }
    let det = sdd * snn - sdn * sdn;
    if det.abs() <= 1e-12 * sdd * snn {
        return Err(Error::invalid(
            OP,
            "samples are rank deficient: (D, N) pairs must not be proportional",
        ));
    }
    let mut k1 = (sdt * snn - snt * sdn) / det;
    let mut k2 = (snt * sdd - sdt * sdn) / det;
    if k1 < 0.0 {
        k1 = 0.0;
        k2 = (snt / snn).max(0.0);
    } else if k2 < 0.0 {
        k2 = 0.0;
        k1 = (sdt / sdd).max(0.0);
    }
    let range = |f: fn(&LatencySample) -> usize| {
        let it = samples.iter().map(f);
        (it.clone().min().unwrap_or(0), it.max().unwrap_or(0))
    };
    Ok(LatencyModel {
        k1,
        k2,
        tau_e: samples.iter().map(|s| s.tau_e).sum::<f64>() / samples.len() as f64,
        n_range: range(|s| s.n),
        d_range: range(|s| s.d),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanResult {
    Feasible {
        dim: usize,
        /// Unrounded `(T_lat - tau_e - k2 * N) / k1`; infinite when `k1 = 0`.
        raw: f64,
        predicted_total: f64,
        /// `T_lat - predicted_total`.
        slack: f64,
    },
    Infeasible {
        raw: f64,
        reason: String,
    },
}

impl PlanResult {
    pub fn dim(&self) -> Option<usize> {
        match self {
            PlanResult::Feasible { dim, .. } => Some(*dim),
            PlanResult::Infeasible { .. } => None,
        }
    }
}

impl fmt::Display for PlanResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanResult::Feasible {
                dim,
                raw,
                predicted_total,
                slack,
            } => write!(
                f,
                "feasible=true\ndim={dim}\nraw_dim={raw}\npredicted_total={predicted_total}\nslack={slack}"
            ),
            PlanResult::Infeasible { raw, reason } => {
                write!(f, "feasible=false\nraw_dim={raw}\nreason={reason}")
            }
        }
    }
}

/// Largest dimension in `dims` whose predicted total latency fits `t_lat`.
pub fn plan_dim(t_lat: f64, n: usize, model: &LatencyModel, dims: &[usize]) -> Result<PlanResult> {
    if dims.is_empty() {
        return Err(Error::invalid("plan_dim", "no candidate dimensions"));
    }
    let fixed = model.tau_e + model.k2 * n as f64;
    let budget = t_lat - fixed;
    let raw = if model.k1 > 0.0 {
        budget / model.k1
    } else if budget > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    if budget <= 0.0 {
        return Ok(PlanResult::Infeasible {
            raw,
            reason: format!("target {t_lat} s does not exceed encode plus per-entry time {fixed} s"),
        });
    }
    let mut sorted = dims.to_vec();
    sorted.sort_unstable();
    match sorted.iter().rev().find(|&&d| d as f64 <= raw) {
        Some(&dim) => {
            let predicted_total = model.predict_total(n, dim);
            Ok(PlanResult::Feasible {
                dim,
                raw,
                predicted_total,
                slack: t_lat - predicted_total,
            })
        }
        None => Ok(PlanResult::Infeasible {
            raw,
            reason: format!("raw dimension {raw:.1} is below the smallest supported dimension {}", sorted[0]),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryBudget {
    pub memory_bytes: u64,
    pub n: u64,
    pub d: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryCheck {
    pub pass: bool,
    pub required_bytes: u64,
}

/// Passes iff the allocation strictly exceeds `N * D * 4` bytes.
pub fn check_memory(b: MemoryBudget) -> MemoryCheck {
    let required_bytes = b.n.saturating_mul(b.d).saturating_mul(4);
    MemoryCheck {
        pass: b.memory_bytes > required_bytes,
        required_bytes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub sample: LatencySample,
    pub precision: String,
    pub repetitions: usize,
}

pub fn write_bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.sample;
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            s.n,
            s.d,
            r.precision,
            s.tau_e,
            s.tau_r,
            s.tau_total(),
            r.repetitions
        );
    }
    out
}

pub fn read_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("N,")) {
            continue;
        }
        let bad = |msg: &str| Error::Config {
            line: n + 1,
            msg: format!("bench CSV: {msg}"),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(bad("expected 7 columns"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(BenchRow {
            sample: LatencySample {
                n: int(f[0])?,
                d: int(f[1])?,
                tau_e: float(f[3])?,
                tau_r: float(f[4])?,
            },
            precision: f[2].to_string(),
            repetitions: int(f[6])?,
        });
    }
    Ok(rows)
}
