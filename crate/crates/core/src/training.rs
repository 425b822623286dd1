//! Loss assembly, the training loop, checkpoints and held-out evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use diffcore::checkpoint::{self, CheckpointError};
use diffcore::{accumulate_grads, lr_at, Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalio::{depth_rmse, psnr, psnr_from_mse, ssim, DepthMap, EvalError, ImageBuffer};
use crate::field::{Aabb, FieldConfig, FieldError, RadianceField};
use crate::geometry::{Camera, Pixel, Ray};
use crate::rendering::{render_batch, render_rays, RenderConfig, RenderError};
use crate::sampling::{hgg_gamma, HggSchedule, SamplingError};
use crate::scenes::{prepare_dir, write_json, SceneDataset, SceneError};
use crate::semantics::{
    hsg_loss_graph, hsg_stride, plan_hsg, EncoderChoice, GridImage, HsgPlan, HsgSchedule, Pairing,
    SemanticEncoder, SemanticsError, View,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iter}; batch written to {dump}")]
    NonFinite { iter: u64, dump: String },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Graph(#[from] diffcore::DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    pub hgg: bool,
    pub hsg: bool,
    pub direct_depth_baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub rays_per_batch: usize,
    pub render: RenderConfig,
    /// `N_hgg` as a fraction of the total.
    pub hgg_fraction: f64,
    /// `N_hsg` as a fraction of the total.
    pub hsg_fraction: f64,
    pub epsilon_hgg: f64,
    pub lambda: f64,
    /// Maximum stride; `None` means `0.1 * min(H, W)`.
    pub s_max: Option<f64>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub hsg_every: u64,
    pub seed: u64,
    pub flags: Flags,
    pub direct_depth_weight: f64,
    pub field: FieldConfig,
    /// Rays without a prior at their own pixel borrow the nearest prior of the
    /// same view within this many pixels. Zero disables the fallback.
    pub prior_radius: f64,
    /// Replaces the annealed window scale while HGG is on.
    pub gamma_override: Option<f64>,
    pub encoder: EncoderChoice,
    pub pairing: Pairing,
    /// Rays per chunk when rendering the semantic grid.
    pub hsg_chunk: usize,
    pub metrics_every: u64,
    /// Zero writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Worker threads; zero uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 20_000,
            rays_per_batch: 1024,
            render: RenderConfig::default(),
            hgg_fraction: 0.1,
            hsg_fraction: 0.5,
            epsilon_hgg: 0.2,
            lambda: 0.2,
            s_max: None,
            lr_start: 1e-3,
            lr_end: 1e-5,
            hsg_every: 1,
            seed: 0,
            flags: Flags::default(),
            direct_depth_weight: 0.1,
            field: FieldConfig::default(),
            prior_radius: 0.0,
            gamma_override: None,
            encoder: EncoderChoice::default(),
            pairing: Pairing::SameView,
            hsg_chunk: 512,
            metrics_every: 100,
            checkpoint_every: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    /// Small network and batch that train on a single CPU core in minutes.
    pub fn toy() -> Self {
        Self {
            total_iterations: 20_000,
            rays_per_batch: 32,
            render: RenderConfig {
                n_coarse: 16,
                n_fine: 16,
                ..RenderConfig::default()
            },
            field: FieldConfig {
                trunk_layers: 2,
                hidden: 32,
                color_hidden: 16,
                pos_freqs: 5,
                dir_freqs: 1,
                density_bias: 0.0,
            },
            lr_start: 5e-3,
            lr_end: 1e-4,
            hsg_every: 50,
            prior_radius: 6.0,
            ..Self::default()
        }
    }

    pub fn n_hgg(&self) -> u64 {
        ((self.hgg_fraction * self.total_iterations as f64).round() as u64).max(1)
    }

    pub fn n_hsg(&self) -> u64 {
        ((self.hsg_fraction * self.total_iterations as f64).round() as u64).max(1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.rays_per_batch == 0 || self.render.n_coarse == 0 {
            return bad("rays_per_batch and render.n_coarse must be positive");
        }
        if !(self.hgg_fraction > 0.0 && self.hgg_fraction <= 1.0) || !(self.hsg_fraction > 0.0 && self.hsg_fraction <= 1.0) {
            return bad("hgg_fraction and hsg_fraction must be in (0, 1]");
        }
        if self.total_iterations > 0 && (self.n_hgg() > self.total_iterations || self.n_hsg() > self.total_iterations) {
            return bad("schedule lengths exceed total_iterations");
        }
        if !(self.epsilon_hgg > 0.0 && self.epsilon_hgg <= 1.0) {
            return bad("epsilon_hgg must be in (0, 1]");
        }
        if !(self.lambda >= 0.0) || !(self.direct_depth_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.hsg_every == 0 || self.hsg_chunk == 0 || self.metrics_every == 0 {
            return bad("hsg_every, hsg_chunk and metrics_every must be positive");
        }
        if let Some(g) = self.gamma_override {
            if !(g > 0.0 && g <= 1.0) {
                return bad("gamma_override must be in (0, 1]");
            }
        }
        if self.s_max.is_some_and(|s| !(s > 0.0)) {
            return bad("s_max must be positive");
        }
        if !(self.prior_radius >= 0.0) {
            return bad("prior_radius must be non-negative");
        }
        Ok(())
    }
}

// ----- losses ------------------------------------------------------------

fn sq_err(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Batch mean of `||C - C_coarse||^2 + ||C - C_fine||^2`.
pub fn hpg_loss(coarse: &[[f64; 3]], fine: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let n = gt.len().max(1) as f64;
    gt.iter()
        .zip(coarse)
        .zip(fine)
        .map(|((g, c), f)| sq_err(g, c) + sq_err(g, f))
        .sum::<f64>()
        / n
}

/// Graph form of [`hpg_loss`] for colors `[r, 3]`.
pub fn hpg_loss_graph(g: &mut Graph, coarse: Var, fine: Var, gt: &[[f64; 3]]) -> Result<Var, diffcore::DiffError> {
    let target = g.constant(Tensor::matrix(gt.len(), 3, gt.iter().flatten().copied().collect()));
    let mut total = None;
    for c in [coarse, fine] {
        let d = g.sub(c, target)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    g.mul_scalar(total.expect("two terms"), 1.0 / gt.len().max(1) as f64)
}

/// Mean squared error between rendered depth and the prior, over rays that carry one.
pub fn direct_depth_loss(depths: &[f64], priors: &[Option<f64>]) -> f64 {
    let (sum, n) = depths
        .iter()
        .zip(priors)
        .filter_map(|(d, p)| p.map(|p| (d - p) * (d - p)))
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Graph form of [`direct_depth_loss`] for depths `[r]`; `None` without prior rays.
pub fn direct_depth_loss_graph(
    g: &mut Graph,
    depth: Var,
    priors: &[Option<f64>],
) -> Result<Option<Var>, diffcore::DiffError> {
    let n = priors.iter().filter(|p| p.is_some()).count();
    if n == 0 {
        return Ok(None);
    }
    let target = g.constant(Tensor::vector(priors.iter().map(|p| p.unwrap_or(0.0)).collect()));
    let mask = g.constant(Tensor::vector(
        priors.iter().map(|p| if p.is_some() { 1.0 } else { 0.0 }).collect(),
    ));
    let d = g.sub(depth, target)?;
    let d = g.mul(d, mask)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    Ok(Some(g.mul_scalar(s, 1.0 / n as f64)?))
}

/// `hpg + lambda * hsg`.
pub fn total_loss(hpg: f64, hsg: f64, lambda: f64) -> f64 {
    hpg + lambda * hsg
}

// ----- priors ------------------------------------------------------------

/// Per-pixel prior depth for every training view.
#[derive(Clone, Debug)]
pub struct PriorLookup {
    width: usize,
    /// Indexed by position in the training list, then `row * width + col`.
    maps: Vec<Vec<Option<f64>>>,
}

impl PriorLookup {
    /// Exact-pixel priors, plus the nearest prior within `radius` pixels elsewhere.
    pub fn build(ds: &SceneDataset, train: &[usize], radius: f64) -> Self {
        let width = train.first().map_or(0, |&v| ds.cameras[v].width() as usize);
        let maps = train
            .iter()
            .map(|&view| {
                let cam = &ds.cameras[view];
                let (w, h) = (cam.width() as usize, cam.height() as usize);
                let own: Vec<_> = ds.priors.iter().filter(|p| p.image_id == view).collect();
                let mut map = vec![None; w * h];
                for p in &own {
                    map[p.v as usize * w + p.u as usize] = Some(p.depth);
                }
                if radius > 0.0 {
                    for (i, slot) in map.iter_mut().enumerate() {
                        if slot.is_some() {
                            continue;
                        }
                        let (r, c) = ((i / w) as f64, (i % w) as f64);
                        *slot = own
                            .iter()
                            .map(|p| ((p.v as f64 - r).hypot(p.u as f64 - c), p.depth))
                            .filter(|(d, _)| *d <= radius)
                            .min_by(|a, b| a.0.total_cmp(&b.0))
                            .map(|(_, depth)| depth);
                    }
                }
                map
            })
            .collect();
        Self { width, maps }
    }

    pub fn get(&self, train_slot: usize, pixel: Pixel) -> Option<f64> {
        self.maps[train_slot][pixel.v as usize * self.width + pixel.u as usize]
    }

    /// Fraction of training pixels that have a prior.
    pub fn coverage(&self) -> f64 {
        let total: usize = self.maps.iter().map(Vec::len).sum();
        let hit: usize = self.maps.iter().flatten().filter(|p| p.is_some()).count();
        hit as f64 / total.max(1) as f64
    }
}

// ----- state and records -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub lr: f64,
    pub gamma: Option<f64>,
    pub stride: Option<u32>,
    pub hpg: f64,
    pub hsg: Option<f64>,
    pub total: f64,
    pub psnr_train: f64,
}

/// Counters and per-iteration schedule values, for checking the wiring.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    /// Iterations whose coarse pass used a prior-guided window.
    pub hgg_iterations: u64,
    pub guided_rays: u64,
    /// Iterations that ran the semantic step.
    pub hsg_iterations: u64,
    pub gammas: Vec<(u64, f64)>,
    pub strides: Vec<(u64, u32)>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub coarse: RadianceField,
    pub fine: RadianceField,
    pub coarse_opt: Adam,
    pub fine_opt: Adam,
    pub metrics: Vec<MetricsRecord>,
    pub trace: Trace,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, bounds: Aabb) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let coarse = RadianceField::new(cfg.field, bounds, rng.gen());
        let fine = RadianceField::new(cfg.field, bounds, rng.gen());
        Self {
            iteration: 0,
            coarse_opt: Adam::new(coarse.params(), AdamConfig::default()),
            fine_opt: Adam::new(fine.params(), AdamConfig::default()),
            coarse,
            fine,
            metrics: Vec::new(),
            trace: Trace::default(),
        }
    }

    /// Both fields as one set with `coarse/` and `fine/` block prefixes.
    pub fn checkpoint_params(&self) -> ParamSet {
        model_params(&self.coarse, &self.fine)
    }
}

pub fn model_params(coarse: &RadianceField, fine: &RadianceField) -> ParamSet {
    let mut p = coarse.params().prefixed("coarse");
    p.extend(fine.params().prefixed("fine"));
    p
}

/// Restores both fields from a checkpoint.
pub fn load_model(path: &Path, bounds: Aabb) -> Result<(RadianceField, RadianceField), TrainError> {
    let params = checkpoint::load(path)?;
    let coarse = RadianceField::from_params(params.strip_prefix("coarse"), bounds)?;
    let fine = RadianceField::from_params(params.strip_prefix("fine"), bounds)?;
    Ok((coarse, fine))
}

// ----- the loop ----------------------------------------------------------

/// Where a run writes its files.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.ndjson")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn checkpoint(&self, iter: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("iter_{iter:07}.ckpt"))
    }
}

/// Per-block gradients of the coarse and fine fields.
type FieldGrads = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// `((color, depth), opacity)` of one rendered pixel.
type PixelRender = (([f64; 3], f64), f64);

struct Batch {
    rays: Vec<Ray>,
    priors: Vec<Option<f64>>,
    colors: Vec<[f64; 3]>,
}

fn sample_batch<R: Rng + ?Sized>(
    ds: &SceneDataset,
    train: &[usize],
    lookup: &PriorLookup,
    n: usize,
    rng: &mut R,
) -> Result<Batch, TrainError> {
    let mut batch = Batch {
        rays: Vec::with_capacity(n),
        priors: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let slot = rng.gen_range(0..train.len());
        let view = train[slot];
        let cam = &ds.cameras[view];
        let pixel = Pixel::new(rng.gen_range(0..cam.width()), rng.gen_range(0..cam.height()));
        let ray = cam.make_ray(pixel).map_err(|e| TrainError::Config(e.to_string()))?;
        batch.rays.push(ray.with_image(view));
        batch.priors.push(lookup.get(slot, pixel));
        batch.colors.push(ds.images[view].get(pixel.v as usize, pixel.u as usize));
    }
    Ok(batch)
}

fn chunk_seed(seed: u64, iter: u64, chunk: usize) -> u64 {
    let mut s = ChaCha8Rng::seed_from_u64(seed ^ 0x48_53_47);
    s.set_stream(iter.wrapping_mul(1 << 20).wrapping_add(chunk as u64));
    s.gen()
}

/// Semantic step: loss value and parameter gradients (coarse, fine).
///
/// The grid is first rendered without a tape, the encoder's gradient with
/// respect to the rendered pixels is taken, and each chunk is then re-rendered
/// on its own tape with the same random stream to push that gradient into the
/// fields.
#[allow(clippy::too_many_arguments)]
fn hsg_step(
    state: &TrainState,
    plan: &HsgPlan,
    encoder: &dyn SemanticEncoder,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<(f64, Option<FieldGrads>), TrainError> {
    let chunks: Vec<&[Ray]> = plan.rays.chunks(cfg.hsg_chunk).collect();
    let rendered: Vec<Vec<[f64; 3]>> = chunks
        .par_iter()
        .enumerate()
        .map(|(k, rays)| {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(cfg.seed, iter, k));
            let out = render_rays(&state.coarse, &state.fine, rays, &vec![None; rays.len()], None, &cfg.render, &mut rng)?;
            Ok(out.into_iter().map(|r| r.fine.color).collect())
        })
        .collect::<Result<_, RenderError>>()?;
    let colors: Vec<[f64; 3]> = rendered.into_iter().flatten().collect();
    let (h, w) = (plan.camera.height() as usize, plan.camera.width() as usize);
    let grid = GridImage::from_colors(h, w, plan.stride, &colors)?;
    let (gh, gw) = (grid.image.height(), grid.image.width());

    if !encoder.differentiable() {
        let a = encoder.encode(&grid.image, &format!("render/{}/{}", plan.view, plan.stride));
        let b = encoder.encode(&plan.target.image, &format!("view/{}/{}", plan.view, plan.stride));
        return Ok(match (a, b) {
            (Ok(a), Ok(b)) => (-a.cosine(&b), None),
            (Err(e), _) | (_, Err(e)) => {
                log::debug!("semantic loss skipped: {e}");
                (0.0, None)
            }
        });
    }

    let target = encoder.encode(&plan.target.image, "")?;
    let mut g = Graph::new();
    let pix = g.parameter(Tensor::matrix(gh * gw, 3, colors.iter().flatten().copied().collect()));
    let phi_sem = encoder.encode_graph(&mut g, pix, gh, gw)?;
    let phi_i = g.constant(Tensor::matrix(1, target.as_slice().len(), target.as_slice().to_vec()));
    let loss = hsg_loss_graph(&mut g, phi_sem, phi_i)?;
    g.backward(loss)?;
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    let pixel_grad = g.grad(pix).map(<[f64]>::to_vec).unwrap_or_default();

    let per_chunk: Vec<FieldGrads> = chunks
        .par_iter()
        .enumerate()
        .map(|(k, rays)| {
            let start = k * cfg.hsg_chunk * 3;
            let upstream: Vec<f64> = pixel_grad[start..start + rays.len() * 3]
                .iter()
                .map(|v| v * cfg.lambda)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(cfg.seed, iter, k));
            let mut g = Graph::new();
            let bc = state.coarse.bind(&mut g);
            let bf = state.fine.bind(&mut g);
            let out = render_batch(
                &mut g,
                (&state.coarse, &bc),
                (&state.fine, &bf),
                rays,
                &vec![None; rays.len()],
                None,
                &cfg.render,
                &mut rng,
            )?;
            let up = g.constant(Tensor::matrix(rays.len(), 3, upstream));
            let prod = g.mul(out.fine.color, up)?;
            let s = g.sum(prod)?;
            g.backward(s)?;
            Ok((
                state.coarse.params().collect_grads(&g, &bc.vars),
                state.fine.params().collect_grads(&g, &bf.vars),
            ))
        })
        .collect::<Result<_, TrainError>>()?;

    let mut gc = diffcore::zero_grads(state.coarse.params());
    let mut gf = diffcore::zero_grads(state.fine.params());
    for (c, f) in &per_chunk {
        accumulate_grads(&mut gc, c);
        accumulate_grads(&mut gf, f);
    }
    Ok((value, Some((gc, gf))))
}

fn finite_grads(grads: &[Vec<f64>]) -> bool {
    grads.iter().flatten().all(|g| g.is_finite())
}

fn dump_batch(dir: Option<&Path>, iter: u64, batch: &Batch, values: &serde_json::Value) -> String {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    let path = dir.join(format!("nonfinite_iter_{iter}.json"));
    let rays: Vec<_> = batch
        .rays
        .iter()
        .zip(&batch.priors)
        .zip(&batch.colors)
        .map(|((r, p), c)| {
            serde_json::json!({
                "view": r.image, "u": r.pixel.u, "v": r.pixel.v,
                "origin": [r.origin.x, r.origin.y, r.origin.z],
                "direction": [r.direction.x, r.direction.y, r.direction.z],
                "prior": p, "color": c,
            })
        })
        .collect();
    let doc = serde_json::json!({ "iter": iter, "losses": values, "rays": rays });
    match fs::write(&path, serde_json::to_string_pretty(&doc).unwrap_or_default()) {
        Ok(()) => path.display().to_string(),
        Err(e) => format!("<unwritable: {e}>"),
    }
}

fn append_metrics(path: &Path, rec: &MetricsRecord) -> Result<(), TrainError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    let line = serde_json::to_string(rec).map_err(|e| TrainError::Io(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

/// Trains coarse and fine fields on the dataset's training views.
///
/// With `files` set, the metrics log and checkpoints are written there; the
/// metrics log is started fresh.
pub fn train(ds: &SceneDataset, cfg: &TrainConfig, files: Option<&RunFiles>) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    pool.install(|| train_inner(ds, cfg, files))
}

fn train_inner(ds: &SceneDataset, cfg: &TrainConfig, files: Option<&RunFiles>) -> Result<TrainState, TrainError> {
    let train_views = ds.train();
    if train_views.is_empty() {
        return Err(TrainError::Config("dataset has no training views".into()));
    }
    let mut state = TrainState::new(cfg, ds.bounds());
    if let Some(f) = files {
        fs::create_dir_all(&f.dir).map_err(|e| TrainError::Io(format!("{}: {e}", f.dir.display())))?;
        let _ = fs::remove_file(f.metrics());
        if cfg.checkpoint_every > 0 {
            fs::create_dir_all(f.dir.join("checkpoints")).map_err(|e| TrainError::Io(e.to_string()))?;
        }
    }
    let total = cfg.total_iterations;
    if total == 0 {
        if let Some(f) = files {
            checkpoint::save(&f.model(), &state.checkpoint_params())?;
        }
        return Ok(state);
    }

    let lookup = PriorLookup::build(ds, &train_views, cfg.prior_radius);
    let hgg = HggSchedule::new(cfg.n_hgg(), cfg.epsilon_hgg)?;
    let cam0: &Camera = &ds.cameras[train_views[0]];
    let s_max = cfg
        .s_max
        .unwrap_or_else(|| HsgSchedule::default_s_max(cam0.height() as usize, cam0.width() as usize));
    let hsg = HsgSchedule::new(cfg.n_hsg(), s_max)?;
    let encoder = if cfg.flags.hsg { Some(cfg.encoder.build()?) } else { None };
    let views: Vec<View<'_>> = train_views
        .iter()
        .map(|&v| View {
            camera: &ds.cameras[v],
            image: &ds.images[v],
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7241_494E));
    let mut hsg_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x4853_4721));

    for i in 0..total {
        let lr = lr_at(i, total, cfg.lr_start, cfg.lr_end)?;
        let gamma = if cfg.flags.hgg {
            Some(cfg.gamma_override.unwrap_or_else(|| hgg_gamma(i, &hgg)))
        } else {
            None
        };
        let batch = sample_batch(ds, &train_views, &lookup, cfg.rays_per_batch, &mut rng)?;

        let mut g = Graph::new();
        let bc = state.coarse.bind(&mut g);
        let bf = state.fine.bind(&mut g);
        let out = render_batch(
            &mut g,
            (&state.coarse, &bc),
            (&state.fine, &bf),
            &batch.rays,
            &batch.priors,
            gamma,
            &cfg.render,
            &mut rng,
        )?;
        if let Some(gm) = gamma {
            state.trace.gammas.push((i, gm));
            if out.guided_rays > 0 {
                state.trace.hgg_iterations += 1;
                state.trace.guided_rays += out.guided_rays as u64;
            }
        }
        let hpg = hpg_loss_graph(&mut g, out.coarse.color, out.fine.color, &batch.colors)?;
        let mut objective = hpg;
        let mut depth_value = None;
        if cfg.flags.direct_depth_baseline {
            let mut terms = Vec::new();
            for d in [out.coarse.depth, out.fine.depth] {
                if let Some(l) = direct_depth_loss_graph(&mut g, d, &batch.priors)? {
                    terms.push(l);
                }
            }
            for t in terms {
                depth_value = Some(depth_value.unwrap_or(0.0) + g.value(t).item().unwrap_or(f64::NAN));
                let weighted = g.mul_scalar(t, cfg.direct_depth_weight)?;
                objective = g.add(objective, weighted)?;
            }
        }
        g.backward(objective)?;
        let hpg_value = g.value(hpg).item().unwrap_or(f64::NAN);
        let objective_value = g.value(objective).item().unwrap_or(f64::NAN);
        let mut gc = state.coarse.params().collect_grads(&g, &bc.vars);
        let mut gf = state.fine.params().collect_grads(&g, &bf.vars);
        let fine_colors: Vec<[f64; 3]> = g
            .value(out.fine.color)
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        drop(g);

        let mut stride = None;
        let mut hsg_value = None;
        if let Some(enc) = encoder.as_deref() {
            let s = hsg_stride(i, &hsg);
            stride = Some(s);
            state.trace.strides.push((i, s));
            if i % cfg.hsg_every == 0 {
                state.trace.hsg_iterations += 1;
                let plan = plan_hsg(i, &hsg, &views, cfg.pairing, &mut hsg_rng)?;
                let (value, grads) = hsg_step(&state, &plan, enc, cfg, i)?;
                hsg_value = Some(value);
                if let Some((c, f)) = grads {
                    accumulate_grads(&mut gc, &c);
                    accumulate_grads(&mut gf, &f);
                }
            }
        }
        let total_value = objective_value + cfg.lambda * hsg_value.unwrap_or(0.0);

        if !total_value.is_finite() || !finite_grads(&gc) || !finite_grads(&gf) {
            let values = serde_json::json!({
                "hpg": hpg_value, "direct_depth": depth_value, "hsg": hsg_value, "total": total_value,
            });
            let dump = dump_batch(files.map(|f| f.dir.as_path()), i, &batch, &values);
            return Err(TrainError::NonFinite { iter: i, dump });
        }
        state.coarse_opt.step(state.coarse.params_mut(), &gc, lr)?;
        state.fine_opt.step(state.fine.params_mut(), &gf, lr)?;
        state.iteration = i + 1;

        if i % cfg.metrics_every == 0 || i + 1 == total {
            let mse = fine_colors
                .iter()
                .zip(&batch.colors)
                .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / (3 * fine_colors.len()) as f64;
            let rec = MetricsRecord {
                iter: i,
                lr,
                gamma: Some(gamma.unwrap_or(1.0)),
                stride,
                hpg: hpg_value,
                hsg: hsg_value,
                total: total_value,
                psnr_train: psnr_from_mse(mse),
            };
            log::info!(
                "iter {i} lr {lr:.2e} hpg {:.5} hsg {:?} psnr {:.2}",
                rec.hpg,
                rec.hsg,
                rec.psnr_train
            );
            if let Some(f) = files {
                append_metrics(&f.metrics(), &rec)?;
            }
            state.metrics.push(rec);
        }
        if let Some(f) = files {
            if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save(&f.checkpoint(i + 1), &state.checkpoint_params())?;
            }
        }
    }
    if let Some(f) = files {
        checkpoint::save(&f.model(), &state.checkpoint_params())?;
    }
    Ok(state)
}

// ----- evaluation --------------------------------------------------------

/// Rendered fine color, depth and opacity for a whole view.
#[derive(Clone, Debug)]
pub struct ViewRender {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub opacity: DepthMap,
}

/// Renders every pixel of `camera` with midpoint coarse samples.
pub fn render_view(
    coarse: &RadianceField,
    fine: &RadianceField,
    camera: &Camera,
    render: &RenderConfig,
    seed: u64,
) -> Result<ViewRender, TrainError> {
    let (w, h) = (camera.width(), camera.height());
    let rays: Vec<Ray> = (0..h)
        .flat_map(|v| (0..w).map(move |u| Pixel::new(u, v)))
        .map(|p| camera.make_ray(p).expect("pixel inside image"))
        .collect();
    let cfg = RenderConfig { jitter: false, ..*render };
    let chunk = 256;
    let parts: Vec<Vec<PixelRender>> = rays
        .par_chunks(chunk)
        .enumerate()
        .map(|(k, rs)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let out = render_rays(coarse, fine, rs, &vec![None; rs.len()], None, &cfg, &mut rng)?;
            Ok(out
                .into_iter()
                .map(|r| ((r.fine.color, r.fine.depth), r.fine.opacity))
                .collect())
        })
        .collect::<Result<_, RenderError>>()?;
    let flat: Vec<_> = parts.into_iter().flatten().collect();
    let (h, w) = (h as usize, w as usize);
    let colors: Vec<[f64; 3]> = flat.iter().map(|x| x.0 .0).collect();
    Ok(ViewRender {
        image: ImageBuffer::from_pixels(h, w, &colors)?,
        depth: DepthMap::new(h, w, flat.iter().map(|x| x.0 .1).collect())?,
        opacity: DepthMap::new(h, w, flat.iter().map(|x| x.1).collect())?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean over views that have at least one opaque ground-truth pixel.
    pub depth_rmse: Option<f64>,
    pub views: Vec<ViewMetrics>,
}

/// Metrics of 8-bit renders against the stored images of `views`.
pub fn evaluate(
    ds: &SceneDataset,
    views: &[usize],
    coarse: &RadianceField,
    fine: &RadianceField,
    render: &RenderConfig,
    out_dir: Option<&Path>,
) -> Result<EvalReport, TrainError> {
    if views.is_empty() {
        return Err(TrainError::Config("split has no views".into()));
    }
    let mut per = Vec::new();
    for &v in views {
        let r = render_view(coarse, fine, &ds.cameras[v], render, v as u64)?;
        let img = r.image.quantized();
        let mask: Vec<bool> = ds.opacities[v].data.iter().map(|&a| a > 0.5).collect();
        let rmse = match depth_rmse(&r.depth.data, &ds.depths[v].data, &mask) {
            Ok(x) => Some(x),
            Err(EvalError::EmptyMask) => None,
            Err(e) => return Err(e.into()),
        };
        if let Some(dir) = out_dir {
            let name = &ds.records[v].image;
            crate::evalio::write_png(&dir.join(format!("{name}.png")), &img)?;
            crate::evalio::write_pfm(&dir.join(format!("{name}_depth.pfm")), &r.depth)?;
        }
        per.push(ViewMetrics {
            view: v,
            psnr: psnr(&img, &ds.images[v])?,
            ssim: ssim(&img, &ds.images[v])?,
            depth_rmse: rmse,
        });
    }
    let n = per.len() as f64;
    let depths: Vec<f64> = per.iter().filter_map(|m| m.depth_rmse).collect();
    Ok(EvalReport {
        psnr: per.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n,
        depth_rmse: (!depths.is_empty()).then(|| depths.iter().sum::<f64>() / depths.len() as f64),
        views: per,
    })
}

// ----- ablation ----------------------------------------------------------

/// The five comparison rows: plain NeRF, each guidance alone, both, and the
/// direct depth-supervision baseline.
pub fn ablation_rows(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |hgg, hsg, dd| TrainConfig {
        flags: Flags {
            hgg,
            hsg,
            direct_depth_baseline: dd,
        },
        ..base.clone()
    };
    vec![
        ("nerf", with(false, false, false)),
        ("hgg", with(true, false, false)),
        ("hsg", with(false, true, false)),
        ("hgg+hsg", with(true, true, false)),
        ("direct-depth", with(false, false, true)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_rmse: Option<f64>,
}

/// Writes `rows` as a JSON table and a Markdown table.
pub fn write_table(dir: &Path, rows: &[AblationRow]) -> Result<(), TrainError> {
    write_json(&dir.join("ablation.json"), &rows)?;
    let path = dir.join("ablation.md");
    let file = File::create(&path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let mut text = String::from("| run | psnr | ssim | depth_rmse |\n|---|---|---|---|\n");
    for r in rows {
        let d = r.depth_rmse.map_or("-".to_string(), |d| format!("{d:.4}"));
        text.push_str(&format!("| {} | {:.3} | {:.4} | {} |\n", r.name, r.psnr, r.ssim, d));
    }
    w.write_all(text.as_bytes()).map_err(|e| TrainError::Io(e.to_string()))
}

/// Prepares an output directory, honoring `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<(), TrainError> {
    Ok(prepare_dir(dir, force)?)
}
