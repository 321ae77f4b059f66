//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::time::Instant;

use qvpr_core::backbone::{build_backbone, ArchConfig, Family};
use qvpr_core::format::encode_model;
use qvpr_core::fuse::{fold_batchnorm, fuse_conv_bn};
use qvpr_core::graph::{BatchNormLayer, ConvLayer, ModelGraph, Weight};
use qvpr_core::ops::{batchnorm_f32, conv2d_f32, ConvGeometry};
use qvpr_core::perf::{check_memory, fit_k1_k2, plan_dim, LatencySample, MemoryBudget, SUPPORTED_DIMS};
use qvpr_core::pooling::{gem, mac, netvlad_assign, netvlad_pool, spoc, PoolingKind};
use qvpr_core::quant::{
    calibrate_maxabs, dequantize_tensor, kl_threshold, quantize_model, quantize_tensor,
    CalibrationMethod, Granularity,
};
use qvpr_core::retrieval::{
    encode_queries, encode_references, generate_synthetic, search_topk, DescriptorDB, SyntheticConfig,
};
use qvpr_core::search::{exhaustive_oracle, run_search_with, FitnessEvaluator, SearchConfig};
use qvpr_core::{Precision, PrecisionConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0f32, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

fn fusion_equivalence() -> Outcome {
    let mut worst = 0f32;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = [1, 2][rng.random_range(0..2)];
        let cin = groups * rng.random_range(1..4);
        let cout = groups * rng.random_range(1..4);
        let k = [1, 3][rng.random_range(0..2)];
        let geo = ConvGeometry::new(rng.random_range(1..3), k / 2, groups);
        let (h, w) = (rng.random_range(4..9), rng.random_range(4..9));
        let x = Tensor::from_f32(&[1, cin, h, w], uniform(&mut rng, cin * h * w, -1.0, 1.0)).unwrap();
        let wt = Tensor::from_f32(&[cout, cin / groups, k, k], uniform(&mut rng, cout * cin / groups * k * k, -1.0, 1.0))
            .unwrap();
        let bias = uniform(&mut rng, cout, -0.5, 0.5);
        let bn = BatchNormLayer {
            mean: uniform(&mut rng, cout, -0.5, 0.5),
            var: uniform(&mut rng, cout, 0.2, 2.0),
            gamma: uniform(&mut rng, cout, 0.5, 1.5),
            beta: uniform(&mut rng, cout, -0.5, 0.5),
            eps: 1e-5,
        };
        let y = conv2d_f32(&x, &wt, Some(&bias), geo).unwrap();
        let reference = batchnorm_f32(&y, &bn.mean, &bn.var, &bn.gamma, &bn.beta, bn.eps).unwrap();
        let conv = ConvLayer {
            weight: Weight::F32(wt),
            bias: Some(bias),
            geometry: geo,
            act_scale: None,
        };
        let f = fold_batchnorm(&conv, &bn).map_err(|e| e.to_string())?;
        let fused = conv2d_f32(&x, f.weight.as_f32().unwrap(), f.bias.as_deref(), geo).unwrap();
        for (a, b) in reference.as_f32().unwrap().iter().zip(fused.as_f32().unwrap()) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-4, format!("max abs diff {worst:e}"))?;
    Ok(format!("100 pairs, max abs diff {worst:.2e}"))
}

/// Frobenius error of int8 max-abs quantization.
fn quant_error(w: &Tensor, g: Granularity) -> f64 {
    let p = calibrate_maxabs(w, 8, g).unwrap();
    let deq = dequantize_tensor(&quantize_tensor(w, &p).unwrap(), &p).unwrap();
    w.as_f32()
        .unwrap()
        .iter()
        .zip(deq.as_f32().unwrap())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
        .sum()
}

fn quantization_roundtrip() -> Outcome {
    let mut min_sqnr = f64::INFINITY;
    let mut near_equal_violations = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..9);
        let per = rng.random_range(27..300);
        // channel spreads differ by at least 2x
        let mut data = Vec::with_capacity(c * per);
        for i in 0..c {
            let std = 0.02 * 2f32.powi(i as i32) * rng.random_range(1.0f32..1.5);
            data.extend(gaussian(&mut rng, per, std));
        }
        let w = Tensor::from_f32(&[c, per], data.clone()).unwrap();

        // near-equal channel spreads: measured, not asserted
        let mut alt = Vec::with_capacity(c * per);
        for _ in 0..c {
            let std = rng.random_range(0.01f32..2.0);
            alt.extend(gaussian(&mut rng, per, std));
        }
        let alt = Tensor::from_f32(&[c, per], alt).unwrap();
        if quant_error(&alt, Granularity::PerChannel) > quant_error(&alt, Granularity::PerTensor) {
            near_equal_violations += 1;
        }

        for bits in [8, 4] {
            let params = calibrate_maxabs(&w, bits, Granularity::PerChannel).unwrap();
            let deq = dequantize_tensor(&quantize_tensor(&w, &params).unwrap(), &params).unwrap();
            for (i, (a, b)) in data.iter().zip(deq.as_f32().unwrap()).enumerate() {
                let s = f64::from(params.scales[i / per]);
                let (a, b) = (f64::from(*a), f64::from(*b));
                // f32 rounding of w/s and s*q adds at most a few ulps of |w|
                let slack = 4.0 * f64::from(f32::EPSILON) * a.abs().max(s);
                check((a - b).abs() <= s / 2.0 + slack, format!("seed {seed} b={bits}: |{a} - {b}| > {s}/2"))?;
            }
        }
        let (pc, pt) = (quant_error(&w, Granularity::PerChannel), quant_error(&w, Granularity::PerTensor));
        check(pc <= pt, format!("seed {seed}: per-channel {pc} > per-tensor {pt}"))?;
        let signal: f64 = data.iter().map(|v| f64::from(*v).powi(2)).sum();
        min_sqnr = min_sqnr.min(10.0 * (signal / pc).log10());
    }
    check(min_sqnr >= 30.0, format!("min SQNR {min_sqnr:.2} dB"))?;
    Ok(format!(
        "1000 tensors, min int8 per-channel SQNR {min_sqnr:.1} dB; per-channel <= per-tensor in all trials \
         (i.i.d. channel spreads: {near_equal_violations}/1000 counterexamples)"
    ))
}

/// Sweep over explicit reference / expanded candidate distributions.
fn kl_oracle(values: &[f32], levels: usize) -> usize {
    const BINS: usize = 2048;
    let max = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    let mut hist = vec![0u64; BINS];
    for v in values {
        let b = ((v.abs() as f64) * (BINS as f64 / max as f64)) as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let mut best = (0usize, f64::INFINITY);
    for i in 128..=BINS {
        let mut p: Vec<u64> = hist[..i].to_vec();
        p[i - 1] += hist[i..].iter().sum::<u64>();
        let lv = levels.min(i);
        let width = i / lv;
        let mut q = vec![0f64; i];
        let mut chunks = Vec::new();
        for j in 0..lv {
            let start = j * width;
            let end = if j == lv - 1 { i } else { start + width };
            let mass: u64 = hist[start..end].iter().sum();
            let nz = p[start..end].iter().filter(|&&c| c > 0).count() as u64;
            chunks.push((start, end, mass, nz));
        }
        let q_total: u64 = chunks.iter().filter(|c| c.3 > 0).map(|c| c.2).sum();
        let mut infinite = false;
        for &(start, end, mass, nz) in &chunks {
            for b in start..end {
                if p[b] > 0 {
                    if mass == 0 {
                        infinite = true;
                    }
                    q[b] = (mass as f64 / nz as f64) / q_total as f64;
                }
            }
        }
        let kl = if infinite {
            f64::INFINITY
        } else {
            (0..i)
                .filter(|&b| p[b] > 0)
                .map(|b| {
                    let pn = p[b] as f64 / total as f64;
                    pn * (pn / q[b]).ln()
                })
                .sum()
        };
        if kl <= best.1 {
            best = (i, kl);
        }
    }
    best.0
}

fn kl_vs_bruteforce() -> Outcome {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4000;
        let values: Vec<f32> = match seed % 4 {
            0 => gaussian(&mut rng, n, 1.0),
            1 => uniform(&mut rng, n, -1.0, 1.0),
            2 => {
                let mut v = gaussian(&mut rng, n, 0.5);
                v.push(40.0);
                v
            }
            _ => (0..n)
                .map(|_| {
                    let e: f32 = rng.random_range(1e-6f32..1.0);
                    -e.ln() * if rng.random::<bool>() { 1.0 } else { -1.0 }
                })
                .collect(),
        };
        let bits = if seed % 2 == 0 { 8 } else { 4 };
        let got = kl_threshold(&values, bits).unwrap().unwrap().bin;
        let want = kl_oracle(&values, (1usize << (bits - 1)) - 1);
        check(got == want, format!("seed {seed}: bin {got} != oracle {want}"))?;
    }
    Ok("20 distributions, exact bin match".into())
}

fn pooling_identities() -> Outcome {
    // GeM(100) >= MAC * (H*W)^(-1/100), so the 1.5% band is guaranteed only
    // for H*W <= 4; larger maps are measured and reported.
    let mut wide_gap = 0f32;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let big = Tensor::from_f32(&[4, 7, 7], uniform(&mut rng, 4 * 49, 0.01, 2.0)).unwrap();
        for (a, b) in gem(&big, &[100.0]).unwrap().iter().zip(mac(&big).unwrap()) {
            wide_gap = wide_gap.max(((a - b) / b).abs());
        }
        let (c, h) = (rng.random_range(1..6), rng.random_range(1..3));
        let w = rng.random_range(1..=4 / h);
        let x = Tensor::from_f32(&[c, h, w], uniform(&mut rng, c * h * w, 0.01, 2.0)).unwrap();
        let g1 = gem(&x, &[1.0]).unwrap();
        let sp = spoc(&x).unwrap();
        for (a, b) in g1.iter().zip(&sp) {
            check((a - b).abs() <= 1e-6, format!("seed {seed}: GeM(1) {a} vs SPoC {b}"))?;
        }
        let g100 = gem(&x, &[100.0]).unwrap();
        let mx = mac(&x).unwrap();
        for (a, b) in g100.iter().zip(&mx) {
            check(((a - b) / b).abs() <= 0.015, format!("seed {seed}: GeM(100) {a} vs MAC {b}"))?;
        }
        let (k, d, n) = (rng.random_range(1..9), rng.random_range(1..8), rng.random_range(1..20));
        let codes = Tensor::from_f32(&[k, d], uniform(&mut rng, k * d, -1.0, 1.0)).unwrap();
        let local = uniform(&mut rng, n * d, -3.0, 3.0);
        for row in local.chunks(d) {
            let a = netvlad_assign(row, &codes).unwrap();
            let s: f64 = a.iter().map(|&v| f64::from(v)).sum();
            check((s - 1.0).abs() <= 1e-6, format!("seed {seed}: assignment sums to {s}"))?;
        }
        let v = netvlad_pool(&Tensor::from_f32(&[n, d], local).unwrap(), &codes).unwrap();
        check(v.len() == k * d, format!("seed {seed}: NetVLAD dim {} != {}", v.len(), k * d))?;
    }
    Ok(format!(
        "50 seeded cases, GeM(100) within 1.5% of MAC on maps with H*W <= 4 (7x7 uniform maps: {:.1}%)",
        wide_gap * 100.0
    ))
}

fn four_layer_net(seed: u64) -> ModelGraph {
    let mut cfg = ArchConfig::new(Family::MiniMobileNet);
    cfg.width = 0.5;
    cfg.depth = 1;
    cfg.input_shape = [3, 16, 16];
    cfg.pooling = PoolingKind::Gem;
    cfg.seed = seed;
    fuse_conv_bn(&build_backbone(&cfg).unwrap()).unwrap()
}

fn calib_batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let cfg = SyntheticConfig {
        places: n,
        queries_per_place: 1,
        input_shape: shape,
        seed,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg).unwrap().references
}

fn ga_optimality() -> Outcome {
    let model = four_layer_net(1);
    let t = model.quantizable_layers().len();
    check(t == 4, format!("expected 4 quantizable layers, found {t}"))?;
    let calib = calib_batch(8, model.input_shape, 100);
    let budget = 12.0;
    let oracle_eval = FitnessEvaluator::new(&model, &calib, CalibrationMethod::MaxAbs).unwrap();
    let (_, oracle) = exhaustive_oracle(&oracle_eval, budget).unwrap();
    let mut hits = 0;
    for seed in 0..5u64 {
        let eval = FitnessEvaluator::new(&model, &calib, CalibrationMethod::MaxAbs).unwrap();
        let cfg = SearchConfig {
            population: 16,
            generations: 300,
            budget,
            seed,
            ..SearchConfig::default()
        };
        let r = run_search_with(&eval, &cfg).unwrap();
        check(
            r.evaluated.iter().all(|(c, _)| c.satisfies(budget)),
            format!("seed {seed}: infeasible candidate evaluated"),
        )?;
        check(
            r.trace.windows(2).all(|w| w[1] >= w[0]),
            format!("seed {seed}: best-so-far trace decreased"),
        )?;
        check(
            r.population_sizes.iter().all(|&n| n == cfg.population),
            format!("seed {seed}: population size changed"),
        )?;
        check(r.best_fitness <= oracle, format!("seed {seed}: GA beat the oracle"))?;
        if (r.best_fitness - oracle).abs() <= 1e-9 {
            hits += 1;
        }
    }
    check(hits >= 4, format!("GA matched the oracle in {hits}/5 seeds"))?;
    Ok(format!("GA matched oracle fitness {oracle:.3e} in {hits}/5 seeds"))
}

fn budget_monotonicity() -> Outcome {
    let mut lines = Vec::new();
    for seed in [2u64, 3, 4] {
        let model = four_layer_net(seed);
        let calib = calib_batch(6, model.input_shape, seed + 50);
        let eval = FitnessEvaluator::new(&model, &calib, CalibrationMethod::MaxAbs).unwrap();
        let mut prev = f64::INFINITY;
        let mut fs = Vec::new();
        for b in [16.0, 12.0, 10.0, 8.0, 6.0] {
            let (_, f) = exhaustive_oracle(&eval, b).unwrap();
            check(f <= prev, format!("seed {seed}: fitness rose from {prev} to {f} at B={b}"))?;
            prev = f;
            fs.push(format!("{f:.2e}"));
        }
        lines.push(fs.join(">="));
    }
    Ok(lines.join("; "))
}

fn fp16_fidelity() -> Outcome {
    let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let mut cfg = ArchConfig::new(Family::MiniMobileNet);
    cfg.input_shape = ds.sample_shape();
    cfg.seed = 7;
    let model = fuse_conv_bn(&build_backbone(&cfg).unwrap()).unwrap();
    let t = model.quantizable_layers().len();
    let half = quantize_model(&model, &PrecisionConfig::uniform(Precision::Fp16, t), None, CalibrationMethod::MaxAbs)
        .unwrap()
        .graph;
    let (r32, q32) = (encode_references(&model, &ds).unwrap(), encode_queries(&model, &ds).unwrap());
    let (r16, q16) = (encode_references(&half, &ds).unwrap(), encode_queries(&half, &ds).unwrap());
    let nq = q32.len();
    let (mut same, mut hit32, mut hit16) = (0, 0, 0);
    for i in 0..nq {
        let a = search_topk(&r32, q32.row(i), 1).unwrap()[0];
        let b = search_topk(&r16, q16.row(i), 1).unwrap()[0];
        same += usize::from(a.index == b.index);
        hit32 += usize::from(a.place == q32.ids()[i]);
        hit16 += usize::from(b.place == q16.ids()[i]);
    }
    let agree = same as f64 / nq as f64;
    check(agree >= 0.99, format!("top-1 agreement {agree:.4}"))?;
    check(hit32.abs_diff(hit16) <= 1, format!("recall@1 hits {hit32} vs {hit16}"))?;
    Ok(format!(
        "{nq} queries, top-1 agreement {:.2}%, recall@1 f32 {:.4} fp16 {:.4}",
        agree * 100.0,
        hit32 as f64 / nq as f64,
        hit16 as f64 / nq as f64
    ))
}

fn size_reduction() -> Outcome {
    let mut cfg = ArchConfig::new(Family::MiniVgg);
    cfg.width = 2.0;
    cfg.depth = 3;
    cfg.input_shape = [3, 16, 16];
    cfg.seed = 3;
    let model = fuse_conv_bn(&build_backbone(&cfg).unwrap()).unwrap();
    let t = model.quantizable_layers().len();
    let calib = calib_batch(4, model.input_shape, 9);
    let f32_len = encode_model(&model).unwrap().len() as f64;
    let size = |p: Precision| {
        let qm = quantize_model(&model, &PrecisionConfig::uniform(p, t), Some(&calib), CalibrationMethod::MaxAbs).unwrap();
        encode_model(&qm.graph).unwrap().len() as f64 / f32_len
    };
    let (r8, r16) = (size(Precision::Int8), size(Precision::Fp16));
    check(r8 <= 0.30, format!("int8 ratio {r8:.3}"))?;
    check(r16 <= 0.55, format!("fp16 ratio {r16:.3}"))?;
    Ok(format!("int8 {:.1}%, fp16 {:.1}% of f32 size", r8 * 100.0, r16 * 100.0))
}

fn full_sort(db: &DescriptorDB, q: &[f32], k: usize) -> Vec<usize> {
    let scores: Vec<f32> = (0..db.len())
        .map(|i| db.row(i).iter().zip(q).map(|(a, b)| a * b).sum())
        .collect();
    let mut idx: Vec<usize> = (0..db.len()).collect();
    // stable sort keeps ascending index order among equal scores
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.truncate(k);
    idx
}

fn retrieval_exactness() -> Outcome {
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (rng.random_range(1..60), rng.random_range(1..24));
        // a small pool of rows makes ties common
        let pool: Vec<Vec<f32>> = (0..rng.random_range(1..8))
            .map(|_| {
                let mut v = uniform(&mut rng, d, -1.0, 1.0);
                qvpr_core::ops::l2_normalize(&mut v);
                v
            })
            .collect();
        let rows: Vec<f32> = (0..n).flat_map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let db = DescriptorDB::new(&Tensor::from_f32(&[n, d], rows).unwrap(), (0..n).map(|i| i * 3).collect()).unwrap();
        let q = uniform(&mut rng, d, -1.0, 1.0);
        let k = rng.random_range(1..=n);
        let got: Vec<usize> = search_topk(&db, &q, k).unwrap().iter().map(|h| h.index).collect();
        check(got == full_sort(&db, &q, k), format!("seed {seed}: ranking differs"))?;
    }
    Ok("1000 instances, identical rankings".into())
}

fn table1_latency_model() -> Outcome {
    let rows = [
        LatencySample { n: 1000, d: 512, tau_e: 0.4248, tau_r: 0.0485 },
        LatencySample { n: 1000, d: 4096, tau_e: 0.4248, tau_r: 0.3396 },
    ];
    let m = fit_k1_k2(&rows).map_err(|e| e.to_string())?;
    let p1024 = m.predict_retrieval(1000, 1024);
    let p2048 = m.predict_retrieval(1000, 2048);
    check(((p1024 - 0.0908) / 0.0908).abs() <= 0.10, format!("tau_r(1024) = {p1024:.4}"))?;
    check(((p2048 - 0.1720) / 0.1720).abs() <= 0.10, format!("tau_r(2048) = {p2048:.4}"))?;
    let plan = plan_dim(0.5156, 1000, &m, &SUPPORTED_DIMS).map_err(|e| e.to_string())?;
    check(plan.dim() == Some(1024), format!("plan {plan:?}"))?;
    Ok(format!(
        "k1 {:.3e}, k2*N {:.4}, tau_r(1024) {p1024:.4}, tau_r(2048) {p2048:.4}, D=1024",
        m.k1,
        m.k2 * 1000.0
    ))
}

fn memory_ratio() -> Outcome {
    let req = |d| check_memory(MemoryBudget { memory_bytes: 0, n: 1000, d }).required_bytes;
    let (big, small) = (req(4096), req(512));
    check(big == 8 * small, format!("{big} vs {small}"))?;
    let c = check_memory(MemoryBudget { memory_bytes: 4_096_000, n: 1000, d: 1024 });
    check(!c.pass && c.required_bytes == 4_096_000, "strict inequality at the boundary")?;
    Ok(format!("{big} / {small} bytes = 8x"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("fusion equivalence", fusion_equivalence),
        ("quantization round-trip", quantization_roundtrip),
        ("KL calibration vs brute force", kl_vs_bruteforce),
        ("pooling identities", pooling_identities),
        ("GA optimality", ga_optimality),
        ("budget monotonicity", budget_monotonicity),
        ("fp16 fidelity", fp16_fidelity),
        ("size reduction", size_reduction),
        ("retrieval exactness", retrieval_exactness),
        ("latency model consistency", table1_latency_model),
        ("memory constraint", memory_ratio),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
