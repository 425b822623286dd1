//! Prior-guided sampling on a single ray: the coarse window around a depth
//! prior widens with gamma until it covers the whole near/far range.
//!
//! ```text
//! cargo run --release --example guided_rays
//! ```

use hg3nerf::field::{Aabb, FieldConfig, RadianceField};
use hg3nerf::geometry::{Camera, Intrinsics, Pixel, Vec3};
use hg3nerf::rendering::{render_rays, RenderConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let cfg = FieldConfig {
        density_bias: 0.5,
        ..FieldConfig::default()
    };
    let coarse = RadianceField::new(cfg, Aabb::cube(1.5), 0);
    let fine = RadianceField::new(cfg, Aabb::cube(1.5), 1);
    let cam = Camera::look_at(
        Intrinsics::centered(64, 64, 70.0),
        Vec3::new(0.3, 0.2, -4.0),
        Vec3::zeros(),
        Vec3::new(0.0, 1.0, 0.0),
        2.0,
        6.0,
    )?;
    let ray = cam.make_ray(Pixel::new(32, 32))?;
    let render = RenderConfig {
        n_coarse: 8,
        n_fine: 8,
        ..RenderConfig::default()
    };
    let prior = 3.8;
    println!("prior depth {prior}, bounds [{}, {}]", cam.near, cam.far);
    for gamma in [None, Some(0.05), Some(0.25), Some(0.5), Some(1.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = render_rays(&coarse, &fine, std::slice::from_ref(&ray), &[Some(prior)], gamma, &render, &mut rng)?;
        let r = &out[0];
        let (lo, hi) = r.coarse_samples.window;
        println!(
            "gamma {:>5}: window [{lo:.3}, {hi:.3}], coarse {:.2?}, fine opacity {:.3}, depth {:.3}",
            gamma.map_or("off".into(), |g| g.to_string()),
            r.coarse_samples.ts,
            r.fine.opacity,
            r.fine.depth
        );
    }
    Ok(())
}
