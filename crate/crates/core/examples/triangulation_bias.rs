//! Depth from two views and how keypoint mismatch turns into depth bias.
//!
//! Clean correspondences triangulate exactly. A small mismatch in normalized
//! image coordinates gives depth errors that grow as the baseline shrinks,
//! which is what makes triangulated priors unreliable for sparse views.
//!
//! ```text
//! cargo run --release --example triangulation_bias
//! ```

use hg3nerf::geometry::{perturb_keypoint, triangulate, Mat3, Vec3};
use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_error(delta: f64, baseline: f64, trials: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r: Mat3 = Rotation3::from_axis_angle(&Vec3::y_axis(), 0.05).into_inner();
    let t = Vec3::new(baseline, 0.0, 0.0);
    let (mut abs, mut signed) = (0.0, 0.0);
    for _ in 0..trials {
        let z = rng.gen_range(3.0..6.0);
        let x = Vec3::new(rng.gen_range(-0.4..0.4) * z, rng.gen_range(-0.4..0.4) * z, z);
        let x2 = r.transpose() * (x - t);
        let p1 = perturb_keypoint(&(x / x.z), delta, &mut rng);
        let p2 = perturb_keypoint(&(x2 / x2.z), delta, &mut rng);
        let tri = triangulate(&p1, &p2, &r, &t).unwrap();
        let err = tri.s1 * p1.norm() - x.norm();
        abs += err.abs();
        signed += err;
    }
    (abs / trials as f64, signed / trials as f64)
}

fn main() {
    println!("baseline 1.0");
    for delta in [0.0, 0.001, 0.005, 0.01] {
        let (abs, signed) = mean_error(delta, 1.0, 2000);
        println!("  mismatch {delta:<6} mean |error| {abs:.5}  mean error {signed:+.5}");
    }
    println!("mismatch 0.005");
    for baseline in [1.0, 0.5, 0.2, 0.1] {
        let (abs, _) = mean_error(0.005, baseline, 2000);
        println!("  baseline {baseline:<4} mean |error| {abs:.5}");
    }
}
