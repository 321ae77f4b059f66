use half::f16;
use qvpr_core::f16::{f16_bits_to_f32, f32_to_f16_bits, round_f16};
use qvpr_core::ops::{conv2d_f32, ConvGeometry};
use qvpr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn f16_encode_matches_half_crate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut values: Vec<f32> = vec![
        0.0, -0.0, 1.0, -1.0, 65504.0, 65519.0, 65520.0, 1e6, -1e6, 6.1e-5, 5.96e-8, 2.98e-8, 1e-9,
        f32::INFINITY, f32::NEG_INFINITY, f32::MIN_POSITIVE,
    ];
    for _ in 0..200_000 {
        values.push(f32::from_bits(rng.random()));
    }
    for x in values {
        let ours = f32_to_f16_bits(x);
        let theirs = f16::from_f32(x).to_bits();
        if x.is_nan() {
            assert!(f16::from_bits(ours).is_nan(), "{x}");
        } else {
            assert_eq!(ours, theirs, "{x:e} ({:#010x})", x.to_bits());
        }
    }
}

#[test]
fn f16_decode_matches_half_crate_for_every_pattern() {
    for h in 0..=u16::MAX {
        let ours = f16_bits_to_f32(h);
        let theirs = f16::from_bits(h).to_f32();
        if theirs.is_nan() {
            assert!(ours.is_nan());
        } else {
            assert_eq!(ours.to_bits(), theirs.to_bits(), "{h:#06x}");
        }
    }
}

#[test]
fn round_f16_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let x: f32 = rng.random_range(-70000.0..70000.0);
        let r = round_f16(x);
        assert_eq!(round_f16(r).to_bits(), r.to_bits());
    }
}

/// Direct seven-deep loop with f64 accumulation.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    geo: ConvGeometry,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * geo.padding - k) / geo.stride + 1;
    let ow = (wd + 2 * geo.padding - k) / geo.stride + 1;
    let cin_g = cin / geo.groups;
    let cout_g = cout / geo.groups;
    let mut out = vec![0f64; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = f64::from(b[co]);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                                let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + g * cin_g + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin_g + ci) * k + ky) * k + kx;
                                acc += f64::from(x[xi]) * f64::from(w[wi]);
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let cin = groups * rng.random_range(1..4);
        let cout = groups * rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let h = rng.random_range(k..k + 7);
        let wd = rng.random_range(k..k + 7);
        let n = rng.random_range(1..3);
        let geo = ConvGeometry {
            stride: rng.random_range(1..3),
            padding: rng.random_range(0..k / 2 + 1),
            groups,
        };
        let x: Vec<f32> = (0..n * cin * h * wd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..cout * (cin / groups) * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xt = Tensor::from_f32(&[n, cin, h, wd], x.clone()).unwrap();
        let wt = Tensor::from_f32(&[cout, cin / groups, k, k], w.clone()).unwrap();
        let got = conv2d_f32(&xt, &wt, Some(&b), geo).unwrap();
        let (want, oh, ow) = naive_conv(&x, &w, &b, n, cin, h, wd, cout, k, geo);
        assert_eq!(got.shape(), &[n, cout, oh, ow]);
        for (g, e) in got.as_f32().unwrap().iter().zip(&want) {
            assert!((f64::from(*g) - e).abs() < 1e-4, "{g} vs {e}");
        }
    }
}
