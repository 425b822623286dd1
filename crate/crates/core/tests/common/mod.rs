//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use diffcore::{Graph, Tensor, Var};
use hg3nerf::field::{Aabb, FieldConfig, RadianceField};
use hg3nerf::geometry::{Camera, Intrinsics, Pixel, Ray, Vec3};
use hg3nerf::rendering::{composite_graph, render_rays, FinalInterval, RenderConfig};
use hg3nerf::semantics::{grid_pixels, hsg_loss_graph, SemanticEncoder, ToyLinearEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    Hpg,
    Hsg,
    Total,
}

/// Rays with frozen sample locations, as the renderer places them for the
/// current parameters. Gradients do not flow through sample placement.
pub struct FrozenRays {
    pub rays: Vec<Ray>,
    pub coarse_ts: Vec<Vec<f64>>,
    pub fine_ts: Vec<Vec<f64>>,
    pub t_far: Vec<f64>,
}

/// A tiny float64 model with a ray batch and a semantic grid.
pub struct Pipeline {
    pub coarse: RadianceField,
    pub fine: RadianceField,
    pub batch: FrozenRays,
    pub gt: Vec<[f64; 3]>,
    pub grid: FrozenRays,
    pub grid_dims: (usize, usize),
    pub target: Vec<f64>,
    pub encoder: ToyLinearEncoder,
    pub lambda: f64,
}

fn freeze(coarse: &RadianceField, fine: &RadianceField, rays: Vec<Ray>, priors: &[Option<f64>], gamma: Option<f64>, seed: u64) -> FrozenRays {
    let cfg = RenderConfig {
        n_coarse: 6,
        n_fine: 6,
        ..RenderConfig::default()
    };
    let out = render_rays(coarse, fine, &rays, priors, gamma, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    FrozenRays {
        coarse_ts: out.iter().map(|r| r.coarse_samples.ts.clone()).collect(),
        fine_ts: out.iter().map(|r| r.fine_ts.clone()).collect(),
        t_far: out.iter().map(|r| r.coarse_samples.window.1).collect(),
        rays,
    }
}

impl Pipeline {
    pub fn new(seed: u64) -> Self {
        let cfg = FieldConfig {
            trunk_layers: 1,
            hidden: 6,
            color_hidden: 4,
            pos_freqs: 2,
            dir_freqs: 1,
            // start with some density so the compositing weights matter
            density_bias: 1.0,
        };
        let bounds = Aabb::cube(1.5);
        let coarse = RadianceField::new(cfg, bounds, seed);
        let fine = RadianceField::new(cfg, bounds, seed + 1);
        let cam = Camera::look_at(
            Intrinsics::centered(8, 8, 9.0),
            Vec3::new(0.4, 0.1, -4.0),
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            2.0,
            6.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rays: Vec<Ray> = (0..6)
            .map(|_| cam.make_ray(Pixel::new(rng.gen_range(0..8), rng.gen_range(0..8))).unwrap())
            .collect();
        let priors: Vec<Option<f64>> = (0..6).map(|k| (k % 2 == 0).then_some(4.0)).collect();
        let gt = (0..6).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let batch = freeze(&coarse, &fine, rays, &priors, Some(0.5), seed);

        let grid_rays: Vec<Ray> = grid_pixels(8, 8, 3).into_iter().map(|p| cam.make_ray(p).unwrap()).collect();
        let n = grid_rays.len();
        let grid = freeze(&coarse, &fine, grid_rays, &vec![None; n], None, seed + 7);
        let encoder = ToyLinearEncoder::new(seed);
        let img = hg3nerf::evalio::ImageBuffer::from_data(8, 8, (0..192).map(|_| rng.gen()).collect()).unwrap();
        let target = encoder.encode(&img, "").unwrap().as_slice().to_vec();
        Self {
            coarse,
            fine,
            batch,
            gt,
            grid,
            grid_dims: (3, 3),
            target,
            encoder,
            lambda: 0.2,
        }
    }

    fn render(field: &RadianceField, g: &mut Graph, vars: &[Var], rays: &FrozenRays, ts: &[Vec<f64>]) -> Var {
        let bound = hg3nerf::field::BoundField { vars: vars.to_vec() };
        let mut pts = Vec::new();
        let mut dirs = Vec::new();
        for (ray, row) in rays.rays.iter().zip(ts) {
            for &t in row {
                pts.push(ray.at(t));
                dirs.push(ray.direction);
            }
        }
        let out = field.forward(g, &bound, &pts, &dirs).unwrap();
        composite_graph(g, out.rgb, out.sigma, ts, &rays.t_far, FinalInterval::ToFar).unwrap().color
    }

    /// Records the chosen loss for the given parameter values.
    pub fn loss(&self, g: &mut Graph, coarse: &RadianceField, fine: &RadianceField, which: Loss) -> (Vec<Var>, Vec<Var>, Var) {
        let vc = coarse.params().bind(g);
        let vf = fine.params().bind(g);
        let hpg = (which != Loss::Hsg).then(|| {
            let c = Self::render(coarse, g, &vc, &self.batch, &self.batch.coarse_ts);
            let f = Self::render(fine, g, &vf, &self.batch, &self.batch.fine_ts);
            hg3nerf::training::hpg_loss_graph(g, c, f, &self.gt).unwrap()
        });
        let hsg = (which != Loss::Hpg).then(|| {
            let f = Self::render(fine, g, &vf, &self.grid, &self.grid.fine_ts);
            let (h, w) = self.grid_dims;
            let phi = self.encoder.encode_graph(g, f, h, w).unwrap();
            let t = g.constant(Tensor::matrix(1, self.target.len(), self.target.clone()));
            hsg_loss_graph(g, phi, t).unwrap()
        });
        let out = match (hpg, hsg) {
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (Some(a), Some(b)) => {
                let b = g.mul_scalar(b, self.lambda).unwrap();
                g.add(a, b).unwrap()
            }
            (None, None) => unreachable!(),
        };
        (vc, vf, out)
    }

    fn value(&self, coarse: &RadianceField, fine: &RadianceField, which: Loss) -> f64 {
        let mut g = Graph::new();
        let (_, _, l) = self.loss(&mut g, coarse, fine, which);
        g.value(l).item().unwrap()
    }

    /// Largest relative deviation between reverse-mode gradients and a
    /// fourth-order central difference over every parameter of both fields,
    /// with the relative error taken against `max(|a|, |fd|, floor)`.
    pub fn max_gradient_error(&self, which: Loss, floor: f64) -> f64 {
        let mut g = Graph::new();
        let (vc, vf, l) = self.loss(&mut g, &self.coarse, &self.fine, which);
        g.backward(l).unwrap();
        let analytic = [
            self.coarse.params().collect_grads(&g, &vc),
            self.fine.params().collect_grads(&g, &vf),
        ];
        let h = 2e-4;
        let mut worst = 0.0f64;
        for (which_field, grads) in analytic.iter().enumerate() {
            for (b, block) in grads.iter().enumerate() {
                for (k, &a) in block.iter().enumerate() {
                    let shifted = |delta: f64| {
                        let (mut c, mut f) = (self.coarse.clone(), self.fine.clone());
                        let field = if which_field == 0 { &mut c } else { &mut f };
                        field.params_mut().blocks_mut()[b].value.data_mut()[k] += delta;
                        self.value(&c, &f, which)
                    };
                    let fd = (8.0 * (shifted(h) - shifted(-h)) - (shifted(2.0 * h) - shifted(-2.0 * h))) / (12.0 * h);
                    let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
                    worst = worst.max(err);
                }
            }
        }
        worst
    }
}
