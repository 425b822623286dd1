use hg3nerf::evalio::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_data(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
}

fn constant(h: usize, w: usize, v: f64) -> ImageBuffer {
    ImageBuffer::from_data(h, w, vec![v; h * w * 3]).unwrap()
}

/// Direct 2-D windowed SSIM, written independently of the separable filter.
fn ssim_oracle(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        let mut count = 0;
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / total;
                        let x = a.get(r + i, c + j)[ch];
                        let y = b.get(r + i, c + j)[ch];
                        mx += k * x;
                        my += k * y;
                        sxx += k * x * x;
                        syy += k * y * y;
                        sxy += k * x * y;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / 3.0
}

#[test]
fn psnr_of_known_error() {
    let a = constant(8, 8, 0.5);
    let b = constant(8, 8, 0.6);
    let want = 10.0 * (1.0 / (0.1f64 * 0.1)).log10();
    assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!(psnr(&a, &constant(8, 7, 0.5)).is_err());
}

#[test]
fn ssim_matches_direct_oracle() {
    let a = random_image(20, 17, 1);
    let mut b = a.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for r in 0..20 {
        for c in 0..17 {
            let p = b.get(r, c);
            b.set(r, c, p.map(|v| v + rng.gen_range(-0.1..0.1)));
        }
    }
    let got = ssim(&a, &b).unwrap();
    let want = ssim_oracle(&a, &b);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    assert!(got < 1.0 && got > 0.0);
}

#[test]
fn ssim_of_constant_images() {
    let (x, y) = (0.3, 0.7);
    let c1 = 0.01f64.powi(2);
    let want = (2.0 * x * y + c1) / (x * x + y * y + c1);
    let got = ssim(&constant(12, 12, x), &constant(12, 12, y)).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((ssim(&constant(12, 12, x), &constant(12, 12, x)).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_needs_a_full_window() {
    assert!(matches!(
        ssim(&constant(10, 30, 0.1), &constant(10, 30, 0.1)),
        Err(EvalError::TooSmall { .. })
    ));
}

#[test]
fn depth_rmse_over_mask() {
    let pred = [1.0, 2.0, 3.0, 4.0];
    let gt = [1.5, 2.0, 0.0, 3.0];
    let mask = [true, true, false, true];
    let want = ((0.25 + 0.0 + 1.0) / 3.0f64).sqrt();
    assert!((depth_rmse(&pred, &gt, &mask).unwrap() - want).abs() < 1e-15);
    assert!(matches!(depth_rmse(&pred, &gt, &[false; 4]), Err(EvalError::EmptyMask)));
    assert!(depth_rmse(&pred, &gt, &[true; 3]).is_err());
}

#[test]
fn png_round_trip_is_lossless_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    let img = random_image(9, 13, 4).quantized();
    write_png(&path, &img).unwrap();
    let back = read_png(&path).unwrap();
    assert_eq!(back, img);
}

#[test]
fn png_gray_and_alpha_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    {
        let file = std::fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(file, 2, 1);
        enc.set_color(png::ColorType::GrayscaleAlpha);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0, 255, 255, 0]).unwrap();
    }
    let img = read_png(&path).unwrap();
    assert_eq!(img.get(0, 0), [0.0; 3]);
    assert_eq!(img.get(0, 1), [1.0; 3]);
}

#[test]
fn pfm_round_trip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pfm");
    let data: Vec<f64> = (0..12).map(|i| f64::from(i as f32 * 0.25 + 2.0)).collect();
    let map = DepthMap::new(3, 4, data).unwrap();
    write_pfm(&path, &map).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
    // the first stored row is the bottom one
    let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    assert_eq!(f64::from(first), map.get(2, 0));
    assert_eq!(read_pfm(&path).unwrap(), map);
}

#[test]
fn big_endian_pfm_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("be.pfm");
    let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
    bytes.extend_from_slice(&1.5f32.to_be_bytes());
    bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
    std::fs::write(&path, bytes).unwrap();
    let map = read_pfm(&path).unwrap();
    assert_eq!(map.data, vec![1.5, -2.0]);
    std::fs::write(&path, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
    assert!(matches!(read_pfm(&path), Err(EvalError::Format { .. })));
}

#[test]
fn image_values_are_clamped() {
    let img = ImageBuffer::from_data(1, 2, vec![-1.0, 0.5, 2.0, f64::NAN, 0.25, 1.0]).unwrap();
    assert_eq!(img.data(), &[0.0, 0.5, 1.0, 0.0, 0.25, 1.0]);
    assert!(ImageBuffer::from_data(2, 2, vec![0.0; 3]).is_err());
}

proptest! {
    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let a = random_image(12, 14, seed);
        let b = random_image(12, 14, seed ^ 1);
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_resummed_mse(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let a = random_image(h, w, seed);
        let b = random_image(h, w, seed.wrapping_add(7));
        let mut m = 0.0;
        for r in 0..h {
            for c in 0..w {
                let (p, q) = (a.get(r, c), b.get(r, c));
                for k in 0..3 {
                    m += (p[k] - q[k]).powi(2);
                }
            }
        }
        m /= (h * w * 3) as f64;
        prop_assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    }

    #[test]
    fn quantization_is_idempotent(seed in any::<u64>()) {
        let q = random_image(4, 5, seed).quantized();
        prop_assert_eq!(q.quantized(), q);
    }
}
