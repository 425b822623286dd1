//! Coarse-to-fine grid sampling, the stride schedule, image encoders and the
//! semantic consistency loss.

use std::collections::HashMap;
use std::path::Path;

use diffcore::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evalio::ImageBuffer;
use crate::field::RadianceField;
use crate::geometry::{Camera, Pixel, Ray, Vec3};
use crate::rendering::{render_rays, RenderConfig, RenderError};

/// Side length of the toy encoder's resized image.
pub const TOY_RESOLUTION: usize = 16;
/// Output dimension of the toy encoder.
pub const TOY_DIM: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum SemanticsError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("cannot encode an empty image")]
    EmptyImage,
    #[error("feature has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("no embedding stored for {0:?}")]
    MissingEmbedding(String),
    #[error("no training views")]
    NoViews,
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Graph(#[from] diffcore::DiffError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Cosine stride annealing from `ceil(s_max)` down to 1 over `n_hsg` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsgSchedule {
    pub n_hsg: u64,
    pub s_max: f64,
}

impl HsgSchedule {
    pub fn new(n_hsg: u64, s_max: f64) -> Result<Self, SemanticsError> {
        if n_hsg == 0 {
            return Err(SemanticsError::Schedule("n_hsg must be at least 1".into()));
        }
        if !(s_max > 0.0 && s_max.is_finite()) {
            return Err(SemanticsError::Schedule(format!("s_max must be positive, got {s_max}")));
        }
        Ok(Self { n_hsg, s_max })
    }

    /// `0.1 * min(H, W)`.
    pub fn default_s_max(height: usize, width: usize) -> f64 {
        0.1 * height.min(width) as f64
    }
}

/// `max(ceil(s_max (1 + cos(pi min(i / N, 1))) / 2), 1)`.
pub fn hsg_stride(i: u64, schedule: &HsgSchedule) -> u32 {
    let frac = (i as f64 / schedule.n_hsg as f64).min(1.0);
    let s = (schedule.s_max * (1.0 + (frac * std::f64::consts::PI).cos()) / 2.0).ceil();
    s.max(1.0) as u32
}

/// Pixels on the stride-`s` grid anchored at the origin, row-major.
pub fn grid_pixels(height: u32, width: u32, stride: u32) -> Vec<Pixel> {
    let s = stride.max(1) as usize;
    let (gh, gw) = grid_dims(height as usize, width as usize, stride);
    let mut out = Vec::with_capacity(gh * gw);
    for row in (0..height).step_by(s) {
        for col in (0..width).step_by(s) {
            out.push(Pixel::new(col, row));
        }
    }
    out
}

/// `(ceil(H / s), ceil(W / s))`.
pub fn grid_dims(height: usize, width: usize, stride: u32) -> (usize, usize) {
    let s = stride.max(1) as usize;
    (height.div_ceil(s), width.div_ceil(s))
}

/// Pixels sampled on a grid and packed into a small image.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    pub stride: u32,
    /// Source pixel of grid cell `(0, 0)`, as `(row, col)`.
    pub origin: (u32, u32),
    pub image: ImageBuffer,
}

impl GridImage {
    pub fn sample(source: &ImageBuffer, stride: u32) -> Self {
        let (gh, gw) = grid_dims(source.height(), source.width(), stride);
        let pixels: Vec<[f64; 3]> = grid_pixels(source.height() as u32, source.width() as u32, stride)
            .iter()
            .map(|p| source.get(p.v as usize, p.u as usize))
            .collect();
        Self {
            stride,
            origin: (0, 0),
            image: ImageBuffer::from_pixels(gh, gw, &pixels).expect("grid dimensions match pixel count"),
        }
    }

    /// Packs rendered colors, given in [`grid_pixels`] order.
    pub fn from_colors(height: usize, width: usize, stride: u32, colors: &[[f64; 3]]) -> Result<Self, SemanticsError> {
        let (gh, gw) = grid_dims(height, width, stride);
        let image = ImageBuffer::from_pixels(gh, gw, colors).map_err(|_| SemanticsError::EmptyImage)?;
        Ok(Self {
            stride,
            origin: (0, 0),
            image,
        })
    }
}

/// Unit-norm feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Normalizes `v`; a zero vector stays zero.
    pub fn normalized(v: Vec<f64>) -> Self {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            Self(v.into_iter().map(|x| x / n).collect())
        } else {
            Self(v)
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Image-to-feature encoder.
pub trait SemanticEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Whether [`SemanticEncoder::encode_graph`] is available.
    fn differentiable(&self) -> bool {
        true
    }

    /// Records the encoding of `pixels [h*w, 3]` and returns a unit `[1, dim]` row.
    fn encode_graph(&self, g: &mut Graph, pixels: Var, height: usize, width: usize) -> Result<Var, SemanticsError>;

    /// Value-only encoding, keyed by `tag` for encoders that look features up.
    fn encode(&self, image: &ImageBuffer, tag: &str) -> Result<FeatureVector, SemanticsError> {
        let _ = tag;
        let mut g = Graph::new();
        let px = g.constant(Tensor::matrix(image.height() * image.width(), 3, image.data().to_vec()));
        let f = self.encode_graph(&mut g, px, image.height(), image.width())?;
        Ok(FeatureVector(g.value(f).data().to_vec()))
    }
}

/// Area-average resize to 16x16, a seeded linear projection, then normalization.
#[derive(Clone, Debug)]
pub struct ToyLinearEncoder {
    seed: u64,
    projection: Tensor,
}

impl ToyLinearEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = TOY_RESOLUTION * TOY_RESOLUTION * 3;
        let bound = (3.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * TOY_DIM).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            seed,
            projection: Tensor::matrix(fan_in, TOY_DIM, data),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Overlap of `[a0, a1)` and `[b0, b1)`.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// 1-D area-averaging weights `[out, n]`: output cell `i` covers
/// `[i n / out, (i + 1) n / out)` of the input.
fn area_weights(n: usize, out: usize) -> Vec<f64> {
    let scale = n as f64 / out as f64;
    let mut w = vec![0.0; out * n];
    for i in 0..out {
        let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
        for j in (lo.floor() as usize)..(hi.ceil() as usize).min(n) {
            w[i * n + j] = overlap(lo, hi, j as f64, j as f64 + 1.0) / scale;
        }
    }
    w
}

/// Dense `[out*out, h*w]` resize matrix.
pub fn area_resize_matrix(height: usize, width: usize, out: usize) -> Tensor {
    let wr = area_weights(height, out);
    let wc = area_weights(width, out);
    let mut m = vec![0.0; out * out * height * width];
    for i in 0..out {
        for r in 0..height {
            let a = wr[i * height + r];
            if a == 0.0 {
                continue;
            }
            for j in 0..out {
                let row = (i * out + j) * height * width + r * width;
                for c in 0..width {
                    m[row + c] = a * wc[j * width + c];
                }
            }
        }
    }
    Tensor::matrix(out * out, height * width, m)
}

/// `v / sqrt(sum v^2)` on a graph.
pub fn normalize_graph(g: &mut Graph, v: Var) -> Result<Var, SemanticsError> {
    let sq = g.square(v)?;
    let s = g.sum(sq)?;
    let n = g.sqrt(s)?;
    Ok(g.div(v, n)?)
}

impl SemanticEncoder for ToyLinearEncoder {
    fn dim(&self) -> usize {
        TOY_DIM
    }

    fn encode_graph(&self, g: &mut Graph, pixels: Var, height: usize, width: usize) -> Result<Var, SemanticsError> {
        if height == 0 || width == 0 {
            return Err(SemanticsError::EmptyImage);
        }
        let resize = g.constant(area_resize_matrix(height, width, TOY_RESOLUTION));
        let small = g.matmul(resize, pixels)?;
        let flat = g.reshape(small, &[1, TOY_RESOLUTION * TOY_RESOLUTION * 3])?;
        let proj = g.constant(self.projection.clone());
        let f = g.matmul(flat, proj)?;
        normalize_graph(g, f)
    }
}

/// Precomputed embeddings looked up by tag; has no gradients.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExternalEncoder {
    pub dim: usize,
    pub embeddings: HashMap<String, Vec<f64>>,
}

impl ExternalEncoder {
    /// Reads `{"dim": D, "embeddings": {"tag": [..], ..}}`.
    pub fn load(path: &Path) -> Result<Self, SemanticsError> {
        let text = std::fs::read_to_string(path).map_err(|e| SemanticsError::Io(format!("{}: {e}", path.display())))?;
        let enc: Self =
            serde_json::from_str(&text).map_err(|e| SemanticsError::Io(format!("{}: {e}", path.display())))?;
        if let Some(bad) = enc.embeddings.values().find(|v| v.len() != enc.dim) {
            return Err(SemanticsError::Dimension {
                expected: enc.dim,
                got: bad.len(),
            });
        }
        Ok(enc)
    }
}

impl SemanticEncoder for ExternalEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn differentiable(&self) -> bool {
        false
    }

    fn encode_graph(&self, _: &mut Graph, _: Var, _: usize, _: usize) -> Result<Var, SemanticsError> {
        Err(SemanticsError::MissingEmbedding("external encoder has no graph form".into()))
    }

    fn encode(&self, _image: &ImageBuffer, tag: &str) -> Result<FeatureVector, SemanticsError> {
        self.embeddings
            .get(tag)
            .map(|v| FeatureVector::normalized(v.clone()))
            .ok_or_else(|| SemanticsError::MissingEmbedding(tag.to_owned()))
    }
}

/// Encoder selection by config key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "encoder")]
pub enum EncoderChoice {
    ToyLinear { seed: u64 },
    External { path: String },
}

impl Default for EncoderChoice {
    fn default() -> Self {
        Self::ToyLinear { seed: 0 }
    }
}

impl EncoderChoice {
    pub fn build(&self) -> Result<Box<dyn SemanticEncoder>, SemanticsError> {
        Ok(match self {
            Self::ToyLinear { seed } => Box::new(ToyLinearEncoder::new(*seed)),
            Self::External { path } => Box::new(ExternalEncoder::load(Path::new(path))?),
        })
    }
}

fn renormalize(v: &FeatureVector, which: &str) -> FeatureVector {
    let n = v.norm();
    if (n - 1.0).abs() > 1e-9 {
        log::warn!("{which} has norm {n}; renormalizing");
        FeatureVector::normalized(v.0.clone())
    } else {
        v.clone()
    }
}

/// Negated cosine similarity, so minimizing it pulls the features together.
pub fn hsg_loss(phi_sem: &FeatureVector, phi_i: &FeatureVector) -> Result<f64, SemanticsError> {
    if phi_sem.0.len() != phi_i.0.len() {
        return Err(SemanticsError::Dimension {
            expected: phi_i.0.len(),
            got: phi_sem.0.len(),
        });
    }
    let a = renormalize(phi_sem, "rendered feature");
    let b = renormalize(phi_i, "reference feature");
    Ok(-a.cosine(&b))
}

/// `-sum(a * b)` on a graph, for unit rows `a` and `b`.
pub fn hsg_loss_graph(g: &mut Graph, phi_sem: Var, phi_i: Var) -> Result<Var, SemanticsError> {
    let p = g.mul(phi_sem, phi_i)?;
    let s = g.sum(p)?;
    Ok(g.neg(s)?)
}

/// Which pose the rendered grid comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Render at the training pose of the reference image.
    #[default]
    SameView,
    /// Render at a random pose between two training cameras.
    CrossView,
}

/// A training view: camera and its ground-truth image.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageBuffer,
}

/// What one semantic step renders and compares against.
#[derive(Clone, Debug)]
pub struct HsgPlan {
    pub view: usize,
    pub stride: u32,
    pub camera: Camera,
    pub rays: Vec<Ray>,
    pub target: GridImage,
}

/// A pose on the segment between two training cameras, aimed where the first looks.
pub fn interpolated_camera<R: Rng + ?Sized>(a: &Camera, b: &Camera, rng: &mut R) -> Camera {
    let t: f64 = rng.gen_range(0.0..1.0);
    let eye = a.center * (1.0 - t) + b.center * t;
    let forward_a = a.rotation.column(2).into_owned();
    let target = a.center + forward_a * (0.5 * (a.near + a.far));
    let up: Vec3 = -(a.rotation.column(1).into_owned() * (1.0 - t) + b.rotation.column(1).into_owned() * t);
    Camera::look_at(a.intrinsics, eye, target, up, a.near, a.far).unwrap_or_else(|_| a.clone())
}

/// Picks a view uniformly and lays out the stride-`s_i` grid.
pub fn plan_hsg<R: Rng + ?Sized>(
    i: u64,
    schedule: &HsgSchedule,
    views: &[View<'_>],
    pairing: Pairing,
    rng: &mut R,
) -> Result<HsgPlan, SemanticsError> {
    if views.is_empty() {
        return Err(SemanticsError::NoViews);
    }
    let stride = hsg_stride(i, schedule);
    let view = rng.gen_range(0..views.len());
    let camera = match pairing {
        Pairing::SameView => views[view].camera.clone(),
        Pairing::CrossView => {
            let other = rng.gen_range(0..views.len());
            interpolated_camera(views[view].camera, views[other].camera, rng)
        }
    };
    let rays = grid_pixels(camera.height(), camera.width(), stride)
        .into_iter()
        .map(|p| camera.make_ray(p).expect("grid pixel inside image"))
        .collect();
    Ok(HsgPlan {
        view,
        stride,
        target: GridImage::sample(views[view].image, stride),
        camera,
        rays,
    })
}

/// Renders a ray list through the fine model, `chunk` rays at a time.
#[allow(clippy::too_many_arguments)]
pub fn render_colors<R: Rng + ?Sized>(
    coarse: &RadianceField,
    fine: &RadianceField,
    rays: &[Ray],
    priors: &[Option<f64>],
    gamma: Option<f64>,
    cfg: &RenderConfig,
    chunk: usize,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>, RenderError> {
    let mut colors = Vec::with_capacity(rays.len());
    for (rs, ps) in rays.chunks(chunk.max(1)).zip(priors.chunks(chunk.max(1))) {
        colors.extend(render_rays(coarse, fine, rs, ps, gamma, cfg, rng)?.into_iter().map(|r| r.fine.color));
    }
    Ok(colors)
}

/// Feature pair for the semantic loss at iteration `i` (value-only).
#[allow(clippy::too_many_arguments)]
pub fn hsg_pair<R: Rng + ?Sized>(
    i: u64,
    schedule: &HsgSchedule,
    views: &[View<'_>],
    coarse: &RadianceField,
    fine: &RadianceField,
    cfg: &RenderConfig,
    encoder: &dyn SemanticEncoder,
    pairing: Pairing,
    rng: &mut R,
) -> Result<(FeatureVector, FeatureVector), SemanticsError> {
    let plan = plan_hsg(i, schedule, views, pairing, rng)?;
    let priors = vec![None; plan.rays.len()];
    let colors = render_colors(coarse, fine, &plan.rays, &priors, None, cfg, 256, rng)?;
    let cam = &plan.camera;
    let rendered = GridImage::from_colors(cam.height() as usize, cam.width() as usize, plan.stride, &colors)?;
    let phi_sem = encoder.encode(&rendered.image, &format!("render/{}/{}", plan.view, plan.stride))?;
    let phi_i = encoder.encode(&plan.target.image, &format!("view/{}/{}", plan.view, plan.stride))?;
    Ok((phi_sem, phi_i))
}
