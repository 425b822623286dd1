//! Procedural constant-density scenes, their ground-truth renders, camera
//! rigs, simulated structure-from-motion depth priors and the on-disk dataset.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evalio::{read_pfm, read_png, write_pfm, write_png, DepthMap, EvalError, ImageBuffer};
use crate::field::Aabb;
use crate::geometry::{
    perturb_keypoint, triangulate, Camera, CameraFile, CameraRecord, GeometryError, Intrinsics, Pixel, Ray,
    SparseDepthPrior, Split, Vec3,
};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place {0} non-overlapping primitives")]
    Placement(usize),
    #[error("invalid prior settings: {0}")]
    Prior(String),
    #[error("output directory {0} is not empty (use force to overwrite)")]
    NotEmpty(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("dataset is inconsistent: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    /// Parameter interval `(t0, t1)` where the ray is inside the shape.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        match self {
            Shape::Sphere { center, radius } => {
                let oc = origin - Vec3::from(*center);
                let a = dir.dot(dir);
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some(((-b - s) / a, (-b + s) / a))
            }
            Shape::Box { min, max } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[k] - origin[k]) / dir[k];
                    let b = (max[k] - origin[k]) / dir[k];
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
                (hi > lo).then_some((lo, hi))
            }
        }
    }

    /// Axis-aligned bounding box.
    pub fn aabb(&self) -> Aabb {
        match self {
            Shape::Sphere { center, radius } => Aabb {
                min: center.map(|c| c - radius),
                max: center.map(|c| c + radius),
            },
            Shape::Box { min, max } => Aabb { min: *min, max: *max },
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Shape::Sphere { center, radius } => (p - Vec3::from(*center)).norm() <= *radius,
            Shape::Box { min, max } => (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub bounds: Aabb,
    pub seed: u64,
}

/// Closed interval of reals used for random ranges.
pub type Range = [f64; 2];

/// A slab across the whole scene, behind the sampled primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backdrop {
    /// Front face position along +z.
    pub z: f64,
    pub thickness: f64,
    pub density: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub spheres: [usize; 2],
    pub boxes: [usize; 2],
    pub radius: Range,
    pub box_half: Range,
    pub density: Range,
    pub albedo: Range,
    /// Half-size of the cubic world bounds.
    pub bounds_half: f64,
    pub backdrop: Option<Backdrop>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            spheres: [2, 3],
            boxes: [1, 2],
            radius: [0.25, 0.45],
            box_half: [0.2, 0.35],
            density: [15.0, 30.0],
            albedo: [0.15, 0.95],
            bounds_half: 1.5,
            backdrop: Some(Backdrop {
                z: 1.0,
                thickness: 0.3,
                density: 30.0,
                albedo: [0.55, 0.5, 0.45],
            }),
        }
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: Range) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn disjoint(a: &Aabb, b: &Aabb) -> bool {
    (0..3).any(|k| a.max[k] <= b.min[k] || b.max[k] <= a.min[k])
}

fn inside(inner: &Aabb, outer: &Aabb) -> bool {
    (0..3).all(|k| inner.min[k] >= outer.min[k] && inner.max[k] <= outer.max[k])
}

/// Deterministic scene for `(spec, seed)` with pairwise disjoint primitives.
pub fn make_scene(spec: &SceneSpec, seed: u64) -> Result<AnalyticScene, SceneError> {
    let count_ok = |r: [usize; 2]| r[0] <= r[1];
    if !count_ok(spec.spheres) || !count_ok(spec.boxes) {
        return Err(SceneError::Spec("count ranges must satisfy min <= max".into()));
    }
    if spec.spheres[1] + spec.boxes[1] == 0 && spec.backdrop.is_none() {
        return Err(SceneError::Spec("spec produces no primitives".into()));
    }
    let ranges = [spec.radius, spec.box_half, spec.density, spec.albedo];
    if ranges.iter().any(|r| !(r[0] >= 0.0 && r[0] <= r[1])) || !(spec.bounds_half > 0.0) {
        return Err(SceneError::Spec("ranges must be non-negative and ordered".into()));
    }
    let bounds = Aabb::cube(spec.bounds_half);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::new();
    let mut placement = bounds;
    if let Some(b) = &spec.backdrop {
        let h = spec.bounds_half;
        let shape = Shape::Box {
            min: [-h, -h, b.z],
            max: [h, h, (b.z + b.thickness).min(h)],
        };
        primitives.push(Primitive {
            shape,
            density: b.density,
            albedo: b.albedo,
        });
        placement.max[2] = b.z;
    }
    let n_spheres = rng.gen_range(spec.spheres[0]..=spec.spheres[1]);
    let n_boxes = rng.gen_range(spec.boxes[0]..=spec.boxes[1]);
    for k in 0..n_spheres + n_boxes {
        let mut placed = false;
        for _ in 0..1000 {
            let center: [f64; 3] = std::array::from_fn(|i| rng.gen_range(placement.min[i]..placement.max[i]));
            let shape = if k < n_spheres {
                Shape::Sphere {
                    center,
                    radius: draw(&mut rng, spec.radius),
                }
            } else {
                let half: [f64; 3] = std::array::from_fn(|_| draw(&mut rng, spec.box_half));
                Shape::Box {
                    min: std::array::from_fn(|i| center[i] - half[i]),
                    max: std::array::from_fn(|i| center[i] + half[i]),
                }
            };
            let bb = shape.aabb();
            if inside(&bb, &placement) && primitives.iter().all(|p: &Primitive| disjoint(&p.shape.aabb(), &bb)) {
                let density = draw(&mut rng, spec.density);
                let albedo = std::array::from_fn(|_| draw(&mut rng, spec.albedo));
                primitives.push(Primitive { shape, density, albedo });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::Placement(n_spheres + n_boxes));
        }
    }
    Ok(AnalyticScene {
        primitives,
        bounds,
        seed,
    })
}

/// Ground truth for one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayTruth {
    pub color: [f64; 3],
    /// `integral T(t) sigma(t) t dt`, not normalized by opacity.
    pub depth: f64,
    pub opacity: f64,
}

impl RayTruth {
    /// Distance to the (soft) surface: `depth / opacity`, if anything was hit.
    pub fn surface_distance(&self) -> Option<f64> {
        (self.opacity > 0.0).then(|| self.depth / self.opacity)
    }
}

/// Sorted, clipped segments `(t0, t1, primitive)` where the ray is inside a primitive.
fn segments(scene: &AnalyticScene, ray: &Ray) -> Vec<(f64, f64, usize)> {
    let mut segs: Vec<(f64, f64, usize)> = scene
        .primitives
        .iter()
        .enumerate()
        .filter(|(_, p)| p.density > 0.0)
        .filter_map(|(i, p)| {
            let (a, b) = p.shape.intersect(&ray.origin, &ray.direction)?;
            let (a, b) = (a.max(ray.near), b.min(ray.far));
            (b > a).then_some((a, b, i))
        })
        .collect();
    segs.sort_by(|x, y| x.0.total_cmp(&y.0));
    segs
}

/// Closed-form transmittance integral over the disjoint constant-density segments.
pub fn exact_ray(scene: &AnalyticScene, ray: &Ray) -> RayTruth {
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for (t0, t1, i) in segments(scene, ray) {
        let p = &scene.primitives[i];
        let len = t1 - t0;
        let e = (-p.density * len).exp();
        let absorbed = trans * (1.0 - e);
        for k in 0..3 {
            color[k] += absorbed * p.albedo[k];
        }
        depth += trans * (t0 * (1.0 - e) - len * e + (1.0 - e) / p.density);
        trans *= e;
    }
    RayTruth {
        color,
        depth,
        opacity: 1.0 - trans,
    }
}

/// Midpoint quadrature with `n` equal cells over `[near, far]`; each cell's
/// optical depth is its exact overlap with the primitives.
pub fn quadrature_ray(scene: &AnalyticScene, ray: &Ray, n: usize) -> RayTruth {
    let segs = segments(scene, ray);
    let h = (ray.far - ray.near) / n as f64;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut first = 0;
    for c in 0..n {
        let lo = ray.near + c as f64 * h;
        let hi = lo + h;
        while first < segs.len() && segs[first].1 <= lo {
            first += 1;
        }
        let mut tau = 0.0;
        let mut tint = [0.0; 3];
        for &(t0, t1, i) in segs[first..].iter().take_while(|s| s.0 < hi) {
            let p = &scene.primitives[i];
            let part = p.density * (t1.min(hi) - t0.max(lo)).max(0.0);
            tau += part;
            for k in 0..3 {
                tint[k] += part * p.albedo[k];
            }
        }
        if tau == 0.0 {
            continue;
        }
        let w = trans * (1.0 - (-tau).exp());
        for k in 0..3 {
            color[k] += w * tint[k] / tau;
        }
        depth += w * (lo + 0.5 * h);
        trans *= (-tau).exp();
    }
    RayTruth {
        color,
        depth,
        opacity: 1.0 - trans,
    }
}

/// Ground-truth maps for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub opacity: DepthMap,
}

pub fn render_ground_truth(scene: &AnalyticScene, camera: &Camera, quadrature_n: usize) -> GroundTruth {
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let mut colors = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut opacity = Vec::with_capacity(w * h);
    for v in 0..h as u32 {
        for u in 0..w as u32 {
            let ray = camera.make_ray(Pixel::new(u, v)).expect("pixel in bounds");
            let t = quadrature_ray(scene, &ray, quadrature_n);
            colors.push(t.color);
            depth.push(t.depth);
            opacity.push(t.opacity);
        }
    }
    GroundTruth {
        image: ImageBuffer::from_pixels(h, w, &colors).expect("sizes agree"),
        depth: DepthMap::new(h, w, depth).expect("sizes agree"),
        opacity: DepthMap::new(h, w, opacity).expect("sizes agree"),
    }
}

/// Camera placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum RigKind {
    /// Cameras on a small disk facing +z toward the origin.
    Forward { spread: f64 },
    /// Cameras on a horizontal circle arc around the origin.
    Orbit { arc_degrees: f64, elevation_degrees: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSpec {
    pub kind: RigKind,
    pub n_train: usize,
    pub n_test: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Distance from the cameras to the origin.
    pub distance: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            kind: RigKind::Forward { spread: 0.6 },
            n_train: 3,
            n_test: 8,
            width: 64,
            height: 64,
            focal: 70.0,
            distance: 4.0,
            near: 2.0,
            far: 6.0,
        }
    }
}

fn rig_eye(spec: &RigSpec, angle: f64, radius_frac: f64) -> Vec3 {
    match spec.kind {
        RigKind::Forward { spread } => {
            let r = spread * radius_frac;
            Vec3::new(r * angle.cos(), r * angle.sin(), -spec.distance)
        }
        RigKind::Orbit {
            arc_degrees,
            elevation_degrees,
        } => {
            let az = (angle / std::f64::consts::TAU - 0.5) * arc_degrees.to_radians();
            let el = elevation_degrees.to_radians() * radius_frac;
            let d = spec.distance;
            Vec3::new(d * el.cos() * az.sin(), d * el.sin(), -d * el.cos() * az.cos())
        }
    }
}

/// Train cameras evenly spread over the rig, test cameras at random rig positions.
pub fn make_cameras<R: Rng + ?Sized>(spec: &RigSpec, rng: &mut R) -> Result<(Vec<Camera>, Vec<Camera>), SceneError> {
    if spec.n_train == 0 {
        return Err(SceneError::Spec("rig needs at least one training view".into()));
    }
    let k = Intrinsics::centered(spec.width, spec.height, spec.focal);
    let up = Vec3::new(0.0, 1.0, 0.0);
    let at = |eye: Vec3| Camera::look_at(k, eye, Vec3::zeros(), up, spec.near, spec.far);
    let offset = rng.gen_range(0.0..std::f64::consts::TAU);
    let train = (0..spec.n_train)
        .map(|i| at(rig_eye(spec, offset + std::f64::consts::TAU * i as f64 / spec.n_train as f64, 1.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let test = (0..spec.n_test)
        .map(|_| {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(0.0f64..1.0).sqrt();
            at(rig_eye(spec, a, r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    /// Fraction of pixels per training image that receive a keypoint.
    pub density_fraction: f64,
    /// Keypoint mismatch in the second view, in normalized image units.
    pub mismatch_delta: f64,
    /// Relative depth tolerance of the visibility test in the second view.
    pub occlusion_tolerance: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            density_fraction: 0.01,
            mismatch_delta: 0.0,
            occlusion_tolerance: 0.02,
        }
    }
}

/// Index of the training camera with the closest center, other than `i`.
pub fn nearest_camera(cameras: &[Camera], i: usize) -> Option<usize> {
    (0..cameras.len())
        .filter(|&j| j != i)
        .min_by(|&a, &b| {
            let da = (cameras[a].center - cameras[i].center).norm();
            let db = (cameras[b].center - cameras[i].center).norm();
            da.total_cmp(&db)
        })
}

/// Simulated triangulated priors for every training view.
///
/// A surface point is taken from the ground-truth maps at a random pixel,
/// projected into the nearest other camera, the second keypoint is shifted by
/// `mismatch_delta`, and the depth along the first ray is re-triangulated.
pub fn generate_depth_prior<R: Rng + ?Sized>(
    scene: &AnalyticScene,
    cameras: &[Camera],
    truths: &[GroundTruth],
    spec: &PriorSpec,
    rng: &mut R,
) -> Result<Vec<SparseDepthPrior>, SceneError> {
    if !(spec.density_fraction > 0.0 && spec.density_fraction <= 0.2) {
        return Err(SceneError::Prior(format!(
            "density_fraction must be in (0, 0.2], got {}",
            spec.density_fraction
        )));
    }
    if !(spec.mismatch_delta >= 0.0) {
        return Err(SceneError::Prior("mismatch_delta must be non-negative".into()));
    }
    let mut priors = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let Some(j) = nearest_camera(cameras, i) else {
            log::warn!("view {i}: no second camera for triangulation");
            continue;
        };
        let other = &cameras[j];
        let (w, h) = (cam.width() as usize, cam.height() as usize);
        let n = ((spec.density_fraction * (w * h) as f64).round() as usize).max(1);
        let (r, t) = cam.relative_pose(other);
        let mut picks = sample(rng, w * h, n).into_vec();
        picks.sort_unstable();
        for idx in picks {
            let (row, col) = (idx / w, idx % w);
            let truth = &truths[i];
            let acc = truth.opacity.get(row, col);
            if acc <= 0.5 {
                continue;
            }
            let dist = truth.depth.get(row, col) / acc;
            let pixel = Pixel::new(col as u32, row as u32);
            let ray = cam.make_ray(pixel)?;
            let point = ray.at(dist);
            let Some((x2, y2)) = other.project(&point) else { continue };
            if !(x2 >= 0.0 && y2 >= 0.0 && x2 < other.width() as f64 && y2 < other.height() as f64) {
                continue;
            }
            let seen = exact_ray(scene, &other.ray_through(x2, y2));
            let expected = (point - other.center).norm();
            match seen.surface_distance() {
                Some(d) if seen.opacity > 0.5 && (d - expected).abs() <= spec.occlusion_tolerance * expected => {}
                _ => continue,
            }
            let p1 = cam.normalized(col as f64 + 0.5, row as f64 + 0.5);
            let p2 = perturb_keypoint(&other.normalized(x2, y2), spec.mismatch_delta, rng);
            let Ok(tri) = triangulate(&p1, &p2, &r, &t) else { continue };
            if !(tri.s1 > 0.0) {
                continue;
            }
            priors.push(SparseDepthPrior {
                image_id: i,
                u: pixel.u,
                v: pixel.v,
                depth: tri.s1 * p1.norm(),
                weight: None,
            });
        }
    }
    Ok(priors)
}

/// Everything `gen` needs, stored as `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub scene: SceneSpec,
    pub rig: RigSpec,
    pub priors: PriorSpec,
    pub quadrature: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            rig: RigSpec::default(),
            priors: PriorSpec::default(),
            quadrature: 2048,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorFile {
    pub priors: Vec<SparseDepthPrior>,
}

/// Images, maps, cameras and priors of one generated (or loaded) scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub meta: GenConfig,
    pub records: Vec<CameraRecord>,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    pub depths: Vec<DepthMap>,
    pub opacities: Vec<DepthMap>,
    /// `image_id` is a view index; training views come first.
    pub priors: Vec<SparseDepthPrior>,
}

/// Rounds a map to what the 32-bit PFM file stores.
fn as_stored(map: DepthMap) -> DepthMap {
    DepthMap {
        data: map.data.iter().map(|&x| x as f32 as f64).collect(),
        ..map
    }
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<SceneDataset, SceneError> {
    if cfg.quadrature < 1024 {
        return Err(SceneError::Spec("quadrature must be at least 1024".into()));
    }
    let scene = make_scene(&cfg.scene, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_CA3E);
    let (train, test) = make_cameras(&cfg.rig, &mut rng)?;
    let truths: Vec<GroundTruth> = train.iter().map(|c| render_ground_truth(&scene, c, cfg.quadrature)).collect();
    let priors = generate_depth_prior(&scene, &train, &truths, &cfg.priors, &mut rng)?;
    let test_truths: Vec<GroundTruth> = test.iter().map(|c| render_ground_truth(&scene, c, cfg.quadrature)).collect();

    let mut ds = SceneDataset {
        meta: cfg.clone(),
        records: Vec::new(),
        cameras: Vec::new(),
        images: Vec::new(),
        depths: Vec::new(),
        opacities: Vec::new(),
        priors,
    };
    let all = train
        .into_iter()
        .zip(truths)
        .map(|x| (Split::Train, x))
        .chain(test.into_iter().zip(test_truths).map(|x| (Split::Test, x)));
    for (id, (split, (cam, gt))) in all.enumerate() {
        ds.records.push(CameraRecord::from_camera(id, split, format!("{id:03}"), &cam));
        ds.cameras.push(cam);
        ds.images.push(gt.image.quantized());
        ds.depths.push(as_stored(gt.depth));
        ds.opacities.push(as_stored(gt.opacity));
    }
    ds.validate()?;
    Ok(ds)
}

impl SceneDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    pub fn scene(&self) -> Result<AnalyticScene, SceneError> {
        make_scene(&self.meta.scene, self.meta.seed)
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::cube(self.meta.scene.bounds_half)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let n = self.records.len();
        if [self.cameras.len(), self.images.len(), self.depths.len(), self.opacities.len()]
            .iter()
            .any(|&m| m != n)
        {
            return Err(SceneError::Invalid("per-view arrays differ in length".into()));
        }
        let train = self.train();
        for (cam, img) in self.cameras.iter().zip(&self.images) {
            if cam.width() as usize != img.width() || cam.height() as usize != img.height() {
                return Err(SceneError::Invalid("image size differs from camera".into()));
            }
        }
        for p in &self.priors {
            if !train.contains(&p.image_id) {
                return Err(SceneError::Invalid(format!("prior references non-training view {}", p.image_id)));
            }
            let cam = &self.cameras[p.image_id];
            if p.u >= cam.width() || p.v >= cam.height() {
                return Err(SceneError::Invalid(format!("prior pixel ({}, {}) out of bounds", p.u, p.v)));
            }
        }
        Ok(())
    }

    /// Writes the dataset directory; refuses a non-empty `dir` unless `force`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<(), SceneError> {
        prepare_dir(dir, force)?;
        for sub in ["images", "depth", "opacity"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(dir, e))?;
        }
        for (i, r) in self.records.iter().enumerate() {
            write_png(&dir.join("images").join(format!("{}.png", r.image)), &self.images[i])?;
            write_pfm(&dir.join("depth").join(format!("{}.pfm", r.image)), &self.depths[i])?;
            write_pfm(&dir.join("opacity").join(format!("{}.pfm", r.image)), &self.opacities[i])?;
        }
        write_json(
            &dir.join("cameras.json"),
            &CameraFile {
                cameras: self.records.clone(),
            },
        )?;
        write_json(
            &dir.join("priors.json"),
            &PriorFile {
                priors: self.priors.clone(),
            },
        )?;
        write_json(&dir.join("meta.json"), &self.meta)
    }

    /// Reads a dataset directory. Missing opacity maps default to one
    /// wherever depth is positive.
    pub fn load(dir: &Path) -> Result<Self, SceneError> {
        let cams: CameraFile = read_json(&dir.join("cameras.json"))?;
        let priors: PriorFile = read_json(&dir.join("priors.json"))?;
        let meta: GenConfig = read_json(&dir.join("meta.json"))?;
        let mut ds = SceneDataset {
            meta,
            records: cams.cameras.clone(),
            cameras: Vec::new(),
            images: Vec::new(),
            depths: Vec::new(),
            opacities: Vec::new(),
            priors: priors.priors,
        };
        for r in &cams.cameras {
            ds.cameras.push(r.to_camera()?);
            ds.images.push(read_png(&dir.join("images").join(format!("{}.png", r.image)))?);
            let depth = read_pfm(&dir.join("depth").join(format!("{}.pfm", r.image)))?;
            let opacity_path = dir.join("opacity").join(format!("{}.pfm", r.image));
            let opacity = if opacity_path.exists() {
                read_pfm(&opacity_path)?
            } else {
                DepthMap {
                    data: depth.data.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect(),
                    ..depth.clone()
                }
            };
            ds.depths.push(depth);
            ds.opacities.push(opacity);
        }
        ds.validate()?;
        Ok(ds)
    }
}

pub fn prepare_dir(dir: &Path, force: bool) -> Result<(), SceneError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(SceneError::NotEmpty(dir.display().to_string()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SceneError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SceneError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray_z(x: f64, y: f64) -> Ray {
        Ray {
            origin: Vec3::new(x, y, -4.0),
            direction: Vec3::new(0.0, 0.0, 1.0),
            near: 2.0,
            far: 6.0,
            image: None,
            pixel: Pixel::new(0, 0),
        }
    }

    #[test]
    fn sphere_and_box_intervals() {
        let s = Shape::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        };
        let (a, b) = s.intersect(&Vec3::new(0.0, 0.0, -4.0), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((a - 3.0).abs() < 1e-12 && (b - 5.0).abs() < 1e-12);
        let bx = Shape::Box {
            min: [-1.0; 3],
            max: [1.0; 3],
        };
        assert_eq!(bx.intersect(&Vec3::new(2.0, 0.0, -4.0), &Vec3::new(0.0, 0.0, 1.0)), None);
    }

    #[test]
    fn slab_closed_form() {
        let scene = AnalyticScene {
            primitives: vec![Primitive {
                shape: Shape::Box {
                    min: [-1.0, -1.0, -0.25],
                    max: [1.0, 1.0, 0.25],
                },
                density: 3.0,
                albedo: [0.2, 0.6, 1.0],
            }],
            bounds: Aabb::cube(1.5),
            seed: 0,
        };
        let t = exact_ray(&scene, &ray_z(0.0, 0.0));
        let expect = 1.0 - (-3.0f64 * 0.5).exp();
        assert!((t.color[1] - 0.6 * expect).abs() < 1e-12);
        assert!((t.opacity - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = SceneSpec {
            spheres: [0, 0],
            boxes: [0, 0],
            backdrop: None,
            ..SceneSpec::default()
        };
        assert!(matches!(make_scene(&spec, 1), Err(SceneError::Spec(_))));
    }
}
