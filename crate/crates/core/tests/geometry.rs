use hg3nerf::geometry::*;
use nalgebra::Rotation3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(eye: Vec3) -> Camera {
    Camera::look_at(
        Intrinsics::centered(64, 48, 60.0),
        eye,
        Vec3::zeros(),
        Vec3::new(0.0, 1.0, 0.0),
        1.0,
        9.0,
    )
    .unwrap()
}

/// Second camera pose relative to the first: translated by `baseline` along x
/// and turned slightly toward the scene.
fn pose(baseline: f64, yaw: f64) -> (Mat3, Vec3) {
    let r = Rotation3::from_axis_angle(&Vec3::y_axis(), yaw).into_inner();
    (r, Vec3::new(baseline, 0.0, 0.0))
}

/// Normalized keypoints of a camera-1 point in both views.
fn keypoints(x: &Vec3, r: &Mat3, t: &Vec3) -> (Vec3, Vec3) {
    let x2 = r.transpose() * (x - t);
    (x / x.z, x2 / x2.z)
}

fn random_point(rng: &mut impl Rng) -> Vec3 {
    let z = rng.gen_range(3.0..6.0);
    Vec3::new(rng.gen_range(-0.4..0.4) * z, rng.gen_range(-0.4..0.4) * z, z)
}

#[test]
fn clean_triangulation_recovers_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (r, t) = pose(rng.gen_range(0.2..1.5), rng.gen_range(-0.2..0.2));
        let x = random_point(&mut rng);
        let (p1, p2) = keypoints(&x, &r, &t);
        let tri = triangulate(&p1, &p2, &r, &t).unwrap();
        assert!((tri.s1 * p1.norm() - x.norm()).abs() < 1e-9);
        assert!((tri.point - x).norm() < 1e-9);
        assert!(tri.residual < 1e-9);
    }
}

/// Mean absolute depth error over `trials` noisy triangulations. The random
/// stream is shared between calls so sweeps compare like with like.
fn mean_error(delta: f64, baseline: f64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut total = 0.0;
    for _ in 0..trials {
        let (r, t) = pose(baseline, 0.05);
        let x = random_point(&mut rng);
        let (p1, p2) = keypoints(&x, &r, &t);
        let q1 = perturb_keypoint(&p1, delta, &mut rng);
        let q2 = perturb_keypoint(&p2, delta, &mut rng);
        let tri = triangulate(&q1, &q2, &r, &t).unwrap();
        total += (tri.s1 * q1.norm() - x.norm()).abs();
    }
    total / trials as f64
}

#[test]
fn error_grows_with_mismatch() {
    let errs: Vec<f64> = [0.0, 0.001, 0.005, 0.01].iter().map(|&d| mean_error(d, 1.0, 1000)).collect();
    assert!(errs[0] < 1e-9, "{errs:?}");
    assert!(errs.windows(2).all(|w| w[0] < w[1]), "{errs:?}");
}

#[test]
fn error_grows_as_baseline_shrinks() {
    let errs: Vec<f64> = [1.0, 0.5, 0.2, 0.1].iter().map(|&b| mean_error(0.005, b, 1000)).collect();
    assert!(errs.windows(2).all(|w| w[0] < w[1]), "{errs:?}");
}

#[test]
fn parallel_rays_are_degenerate() {
    let p = Vec3::new(0.1, 0.0, 1.0);
    let r = Mat3::identity();
    let err = triangulate(&p, &p, &r, &Vec3::new(1.0, 0.0, 0.0)).unwrap_err();
    assert!(matches!(err, GeometryError::Degenerate { .. }));
    // zero baseline
    let q = Vec3::new(0.0, 0.1, 1.0);
    assert!(triangulate(&p, &q, &r, &Vec3::zeros()).is_err());
}

#[test]
fn pixel_outside_image_is_rejected() {
    let cam = camera(Vec3::new(0.0, 0.0, -4.0));
    assert!(matches!(
        cam.make_ray(Pixel::new(64, 0)),
        Err(GeometryError::PixelOutOfBounds { .. })
    ));
    assert!(cam.make_ray(Pixel::new(63, 47)).is_ok());
}

#[test]
fn invalid_cameras_are_rejected() {
    let k = Intrinsics::centered(8, 8, 10.0);
    assert!(Camera::new(k, Mat3::identity(), Vec3::zeros(), 2.0, 1.0).is_err());
    assert!(Camera::new(k, Mat3::identity() * 2.0, Vec3::zeros(), 1.0, 2.0).is_err());
    let mut bad = k;
    bad.fx = 0.0;
    assert!(Camera::new(bad, Mat3::identity(), Vec3::zeros(), 1.0, 2.0).is_err());
}

#[test]
fn camera_record_round_trip() {
    let cam = camera(Vec3::new(1.3, -0.4, -3.7));
    let rec = CameraRecord::from_camera(2, Split::Test, "images/002.png".into(), &cam);
    let json = serde_json::to_string(&rec).unwrap();
    let back: CameraRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rec);
    assert_eq!(back.to_camera().unwrap(), cam);
}

proptest! {
    #[test]
    fn rays_are_unit_and_reproject(u in 0u32..64, v in 0u32..48, ex in -3.0f64..3.0, ey in -2.0f64..2.0) {
        let cam = camera(Vec3::new(ex, ey, -4.0));
        let ray = cam.make_ray(Pixel::new(u, v)).unwrap();
        prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
        let (x, y) = cam.project(&ray.at(3.0)).unwrap();
        prop_assert!((x - (u as f64 + 0.5)).abs() < 1e-9);
        prop_assert!((y - (v as f64 + 0.5)).abs() < 1e-9);
    }

    #[test]
    fn z_depth_converts_to_ray_distance(u in 0u32..64, v in 0u32..48, z in 1.0f64..8.0) {
        let cam = camera(Vec3::new(0.5, 0.2, -4.0));
        let px = Pixel::new(u, v);
        let ray = cam.make_ray(px).unwrap();
        let d = cam.z_to_ray_depth(px, z);
        let p = cam.world_to_camera(&ray.at(d));
        prop_assert!((p.z - z).abs() < 1e-9);
    }

    #[test]
    fn perturbation_has_exact_length(x in -1.0f64..1.0, y in -1.0f64..1.0, delta in 0.0f64..0.1, seed in any::<u64>()) {
        let p = Vec3::new(x, y, 1.0);
        let q = perturb_keypoint(&p, delta, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(((q - p).norm() - delta).abs() < 1e-12);
        prop_assert_eq!(q.z, 1.0);
    }

    #[test]
    fn relative_pose_maps_between_frames(bx in -2.0f64..2.0, by in -1.0f64..1.0) {
        let a = camera(Vec3::new(0.0, 0.0, -4.0));
        let b = camera(Vec3::new(bx, by, -3.5));
        let (r, t) = a.relative_pose(&b);
        let w = Vec3::new(0.3, -0.2, 0.7);
        let lhs = a.world_to_camera(&w);
        let rhs = r * b.world_to_camera(&w) + t;
        prop_assert!((lhs - rhs).norm() < 1e-12);
    }
}
