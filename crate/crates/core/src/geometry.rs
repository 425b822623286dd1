//! Pinhole cameras, rays, two-view triangulation and keypoint perturbation.
//!
//! Conventions: poses are camera-to-world, the camera frame is x right,
//! y down, z forward, and pixel `(u, v)` (column, row) has its center at
//! continuous image coordinates `(u + 0.5, v + 0.5)`.

use nalgebra::{Matrix3, Matrix3x2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rays closer to parallel than this are rejected by [`triangulate`].
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds {
        u: u32,
        v: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate triangulation geometry (condition number {condition:e})")]
    Degenerate { condition: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub u: u32,
    pub v: u32,
}

impl Pixel {
    pub fn new(u: u32, v: u32) -> Self {
        Self { u, v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn centered(width: u32, height: u32, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Camera-to-world rotation; its columns are the camera axes in world space.
    pub rotation: Mat3,
    /// Camera center in world space.
    pub center: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Mat3,
        center: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            intrinsics,
            rotation,
            center,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// A camera at `eye` looking at `target`, with `up` roughly world-up.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(GeometryError::InvalidCamera(
                "viewing direction parallel to up vector".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Self::new(intrinsics, rotation, eye, near, far)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx {}, fy {})",
                k.fx, k.fy
            )));
        }
        if k.width == 0 || k.height == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(GeometryError::InvalidCamera(format!(
                "bounds must satisfy 0 < near < far (near {}, far {})",
                self.near, self.far
            )));
        }
        let r = &self.rotation;
        let orth = (r.transpose() * r - Mat3::identity()).abs().max();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera(
                "rotation is not a proper orthonormal matrix".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Normalized camera coordinates (z = 1) of a continuous image point.
    pub fn normalized(&self, x: f64, y: f64) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0)
    }

    /// Unit ray through the center of `pixel`.
    pub fn make_ray(&self, pixel: Pixel) -> Result<Ray, GeometryError> {
        if pixel.u >= self.width() || pixel.v >= self.height() {
            return Err(GeometryError::PixelOutOfBounds {
                u: pixel.u,
                v: pixel.v,
                width: self.width(),
                height: self.height(),
            });
        }
        let mut ray = self.ray_through(pixel.u as f64 + 0.5, pixel.v as f64 + 0.5);
        ray.pixel = pixel;
        Ok(ray)
    }

    /// Unit ray through a continuous image point; no bounds check.
    pub fn ray_through(&self, x: f64, y: f64) -> Ray {
        let direction = (self.rotation * self.normalized(x, y)).normalize();
        Ray {
            origin: self.center,
            direction,
            near: self.near,
            far: self.far,
            image: None,
            pixel: Pixel::new(x.max(0.0) as u32, y.max(0.0) as u32),
        }
    }

    pub fn world_to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (world - self.center)
    }

    /// Continuous image coordinates of a world point, `None` if it is behind
    /// the camera.
    pub fn project(&self, world: &Vec3) -> Option<(f64, f64)> {
        let c = self.world_to_camera(world);
        if c.z <= 1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    }

    /// Pose `(R, t)` mapping `other`'s camera coordinates into this camera's:
    /// `X_self = R * X_other + t`.
    pub fn relative_pose(&self, other: &Camera) -> (Mat3, Vec3) {
        let rt = self.rotation.transpose();
        (rt * other.rotation, rt * (other.center - self.center))
    }

    /// Converts a z-depth at `pixel` into distance along the unit ray.
    pub fn z_to_ray_depth(&self, pixel: Pixel, z: f64) -> f64 {
        z * self
            .normalized(pixel.u as f64 + 0.5, pixel.v as f64 + 0.5)
            .norm()
    }
}

/// `r(t) = origin + t * direction` for `t` in `[near, far]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
    pub image: Option<usize>,
    pub pixel: Pixel,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_image(mut self, image: usize) -> Self {
        self.image = Some(image);
        self
    }
}

/// Depth of one pixel estimated by (simulated) structure from motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseDepthPrior {
    pub image_id: usize,
    pub u: u32,
    pub v: u32,
    /// Distance along the unit-norm ray through the pixel center.
    pub depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

/// Result of [`triangulate`], expressed in the first camera's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Triangulation {
    pub s1: f64,
    pub s2: f64,
    /// Midpoint of the closest points on the two rays.
    pub point: Vec3,
    /// `|| s1 p1 - (s2 R p2 + t) ||`.
    pub residual: f64,
}

/// Least-squares solution of `s1 p1 = s2 R p2 + t`.
///
/// `p1`, `p2` are normalized keypoints (z = 1) and `(R, t)` maps the second
/// camera's frame into the first one's.
pub fn triangulate(p1: &Vec3, p2: &Vec3, r: &Mat3, t: &Vec3) -> Result<Triangulation, GeometryError> {
    let rp2 = r * p2;
    let a = Matrix3x2::from_columns(&[*p1, -rp2]);
    let svd = a.svd(true, true);
    let (smax, smin) = {
        let s = svd.singular_values;
        (s[0].max(s[1]), s[0].min(s[1]))
    };
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) || t.norm() < 1e-12 {
        return Err(GeometryError::Degenerate { condition });
    }
    let s = svd
        .solve(t, 0.0)
        .map_err(|_| GeometryError::Degenerate { condition })?;
    let (s1, s2) = (s[0], s[1]);
    let x1 = p1 * s1;
    let x2 = rp2 * s2 + t;
    Ok(Triangulation {
        s1,
        s2,
        point: (x1 + x2) * 0.5,
        residual: (x1 - x2).norm(),
    })
}

/// Shifts a normalized keypoint by `delta` in a uniformly random in-plane
/// direction; z is left untouched.
pub fn perturb_keypoint<R: Rng + ?Sized>(p: &Vec3, delta: f64, rng: &mut R) -> Vec3 {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    Vec3::new(p.x + delta * theta.cos(), p.y + delta * theta.sin(), p.z)
}

// ----- camera and prior files ------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One entry of `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: usize,
    pub split: Split,
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 3x4 camera-to-world matrix `[R | center]`.
    pub c2w: [[f64; 4]; 3],
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub cameras: Vec<CameraRecord>,
}

impl CameraRecord {
    pub fn from_camera(id: usize, split: Split, image: String, cam: &Camera) -> Self {
        let r = &cam.rotation;
        let c = &cam.center;
        let k = &cam.intrinsics;
        Self {
            id,
            split,
            image,
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            c2w: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)], c.x],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)], c.y],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)], c.z],
            ],
            near: cam.near,
            far: cam.far,
        }
    }

    pub fn to_camera(&self) -> Result<Camera, GeometryError> {
        let m = &self.c2w;
        let rotation = Mat3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let center = Vec3::new(m[0][3], m[1][3], m[2][3]);
        let intrinsics = Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        Camera::new(intrinsics, rotation, center, self.near, self.far)
    }
}
