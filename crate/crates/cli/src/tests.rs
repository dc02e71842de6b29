use ffabic::Tensor;

use crate::bdrate::{bd_rate, Pchip, RdCurve, RdPoint};
use crate::error::CliError;
use crate::imageio::{from_rgb8, quantize_8bit, read_png, to_rgb8, write_png};
use crate::metrics::{ms_ssim, ms_ssim_scales, psnr, psnr_from_mse};

/// Noisy pair from a 64-bit LCG; the reference scores were computed from the same bytes.
fn lcg_pair(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        s >> 56
    };
    let mut a = vec![0.0; 3 * h * w];
    let mut b = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let r = next();
                let va = ((x * 3 + y * 5 + c * 40 + ((x * y) >> 3) + (r % 32) as usize) & 255) as i64;
                let n = (next() % 161) as i64;
                let vb = (va + n - 80).clamp(0, 255);
                let i = (c * h + y) * w + x;
                a[i] = va as f64 / 255.0;
                b[i] = vb as f64 / 255.0;
            }
        }
    }
    (Tensor::new(&[3, h, w], a).unwrap(), Tensor::new(&[3, h, w], b).unwrap())
}

#[test]
fn ms_ssim_matches_reference_scores() {
    for (seed, h, w, scales, want) in
        [(1, 192, 176, 5, 0.9443991184234619), (2, 171, 165, 5, 0.9438445568084717), (3, 64, 80, 3, 0.8979275822639465)]
    {
        let (a, b) = lcg_pair(seed, h, w);
        assert_eq!(ms_ssim_scales(h, w), scales);
        let ab = ms_ssim(&a, &b).unwrap();
        let ba = ms_ssim(&b, &a).unwrap();
        assert!((ab - want).abs() < 1e-4, "seed {seed}: {ab} vs {want}");
        assert!((ab - ba).abs() < 1e-12);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ms_ssim_input_errors() {
    let (a, b) = lcg_pair(4, 10, 40);
    assert_eq!(ms_ssim_scales(10, 40), 0);
    assert!(matches!(ms_ssim(&a, &b), Err(CliError::Core(ffabic::Error::Input(_)))));
    let (c, _) = lcg_pair(4, 12, 40);
    assert!(ms_ssim(&c, &a).is_err());
    assert_eq!(ms_ssim_scales(160, 400), 4);
    assert_eq!(ms_ssim_scales(161, 161), 5);
    assert_eq!(ms_ssim_scales(11, 11), 1);
}

#[test]
fn psnr_reference_points() {
    let a = Tensor::<f64>::from_fn(&[3, 4, 4], |i| (i % 7) as f64 / 7.0);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    let b = a.map(|v| v - 0.01);
    assert!((psnr(&a, &b).unwrap() - 40.0).abs() < 1e-9);
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    assert_eq!(psnr_from_mse(1e-30), 100.0);
    assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5])).is_err());
}

fn curve(label: &str, pts: &[(f64, f64)]) -> RdCurve {
    RdCurve::new(label, pts.iter().map(|&(bpp, quality)| RdPoint { bpp, quality, metric: "psnr".into() }).collect()).unwrap()
}

#[test]
fn pchip_reproduces_cubics_of_its_data_and_stays_monotone() {
    // linear data is interpolated exactly
    let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]);
    assert!((p.eval(2.0) - 5.0).abs() < 1e-12);
    assert!((p.integrate(0.0, 4.0) - 20.0).abs() < 1e-12);
    assert!((p.integrate(0.5, 3.5) - (3.5f64.powi(2) - 0.25 + 3.0)).abs() < 1e-12);
    // monotone data yields a monotone interpolant
    let p = Pchip::new(vec![0.0, 1.0, 2.0, 5.0], vec![0.0, 0.1, 3.0, 3.1]);
    let vals: Vec<f64> = (0..=500).map(|i| p.eval(i as f64 / 100.0)).collect();
    assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    // two points interpolate linearly
    let p = Pchip::new(vec![1.0, 3.0], vec![2.0, 6.0]);
    assert!((p.eval(2.0) - 4.0).abs() < 1e-12);
}

#[test]
fn bd_rate_synthetic_curves() {
    let anchor = curve("a", &[(0.1, 26.0), (0.2, 29.0), (0.4, 31.5), (0.8, 33.0)]);
    assert!(bd_rate(&anchor, &anchor).unwrap().abs() < 1e-12);
    let doubled = curve("b", &[(0.2, 26.0), (0.4, 29.0), (0.8, 31.5), (1.6, 33.0)]);
    assert!((bd_rate(&anchor, &doubled).unwrap() - 100.0).abs() < 0.1);
    assert!((bd_rate(&doubled, &anchor).unwrap() + 50.0).abs() < 0.05);
    let disjoint = curve("c", &[(0.1, 40.0), (0.2, 42.0)]);
    assert!(matches!(bd_rate(&anchor, &disjoint), Err(CliError::Range(_))));
    assert!(RdCurve::new("bad", vec![RdPoint { bpp: 0.0, quality: 1.0, metric: "psnr".into() }]).is_err());
    assert!(bd_rate(&anchor, &curve("one", &[(0.3, 30.0)])).is_err());
}

#[test]
fn png_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let x: Tensor<f32> = Tensor::from_fn(&[3, 7, 5], |i| ((i * 37) % 256) as f32 / 255.0);
    write_png(&path, &x).unwrap();
    let y: Tensor<f32> = read_png(&path).unwrap();
    assert_eq!(x, y);
    assert_eq!(quantize_8bit(&y), y);
    let img = to_rgb8(&x);
    assert_eq!(img.get_pixel(1, 0).0, [37, (37 + 35 * 37) % 256, (37 + 70 * 37) % 256].map(|v| v as u8));
    assert_eq!(from_rgb8::<f32>(&img), x);
    assert!(matches!(read_png::<f32>(&dir.path().join("missing.png")), Err(CliError::Image { .. })));
}
