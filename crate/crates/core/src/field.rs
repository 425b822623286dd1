//! Positional-encoded MLP radiance field `(x, d) -> (c, sigma)`.
//!
//! Positions are mapped into `[-1, 1]^3` by the scene bounding box before
//! encoding. The density head sees only the position trunk, so density is
//! independent of the viewing direction by construction.

use diffcore::{Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("non-finite field input at index {0}")]
    NonFiniteInput(usize),
    #[error("position and direction batches differ ({0} vs {1})")]
    BatchMismatch(usize, usize),
    #[error("parameter layout not recognized: {0}")]
    Layout(String),
    #[error(transparent)]
    Graph(#[from] diffcore::DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Number of ReLU layers in the position trunk.
    pub trunk_layers: usize,
    pub hidden: usize,
    /// Width of the hidden layer in the color head.
    pub color_hidden: usize,
    /// Positional encoding frequencies for positions.
    pub pos_freqs: usize,
    /// Positional encoding frequencies for directions.
    pub dir_freqs: usize,
    /// Initial bias of the density head.
    pub density_bias: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            trunk_layers: 4,
            hidden: 64,
            color_hidden: 32,
            pos_freqs: 6,
            dir_freqs: 2,
            density_bias: 0.0,
        }
    }
}

impl FieldConfig {
    pub fn pos_dim(&self) -> usize {
        3 * (2 * self.pos_freqs + 1)
    }

    pub fn dir_dim(&self) -> usize {
        3 * (2 * self.dir_freqs + 1)
    }
}

/// Axis-aligned box used to normalize positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn normalize(&self, p: &Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = 2.0 * (p[k] - self.min[k]) / (self.max[k] - self.min[k]) - 1.0;
        }
        out
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// `[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]`.
pub fn positional_encoding(v: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * (2 * freqs + 1));
    encode_into(v, freqs, &mut out);
    out
}

fn encode_into(v: &[f64], freqs: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(v);
    let mut scale = std::f64::consts::PI;
    for _ in 0..freqs {
        out.extend(v.iter().map(|x| (scale * x).sin()));
        out.extend(v.iter().map(|x| (scale * x).cos()));
        scale *= 2.0;
    }
}

/// Parameter vars of one field recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundField {
    pub vars: Vec<Var>,
}

/// Field outputs for a batch of `n` points: `rgb [n, 3]`, `sigma [n, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    pub rgb: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    bounds: Aabb,
    params: ParamSet,
}

impl RadianceField {
    /// Glorot-uniform weights from `seed`, zero biases.
    pub fn new(config: FieldConfig, bounds: Aabb, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut dense = |params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: f64| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            params.push(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w));
            params.push(format!("{name}.bias"), Tensor::full([fan_out], bias));
        };
        let mut fan_in = config.pos_dim();
        for layer in 0..config.trunk_layers {
            dense(&mut params, &format!("trunk.{layer}"), fan_in, config.hidden, 0.0);
            fan_in = config.hidden;
        }
        dense(&mut params, "density", fan_in, 1, config.density_bias);
        dense(&mut params, "color.0", fan_in + config.dir_dim(), config.color_hidden, 0.0);
        dense(&mut params, "color.1", config.color_hidden, 3, 0.0);
        Self {
            config,
            bounds,
            params,
        }
    }

    /// Rebuilds a field from stored parameters, inferring the architecture
    /// from block shapes.
    pub fn from_params(params: ParamSet, bounds: Aabb) -> Result<Self, FieldError> {
        let shape = |name: &str| -> Result<Vec<usize>, FieldError> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| FieldError::Layout(format!("missing block `{name}`")))
        };
        let trunk_layers = (0..)
            .take_while(|l| params.get(&format!("trunk.{l}.weight")).is_some())
            .count();
        let first = shape(if trunk_layers > 0 { "trunk.0.weight" } else { "density.weight" })?;
        let hidden = if trunk_layers > 0 { first[1] } else { first[0] };
        let pos_in = first[0];
        let color0 = shape("color.0.weight")?;
        let dir_in = color0[0]
            .checked_sub(hidden)
            .ok_or_else(|| FieldError::Layout("color head narrower than trunk".into()))?;
        let freqs = |dim: usize| -> Result<usize, FieldError> {
            if !dim.is_multiple_of(3) || (dim / 3) % 2 != 1 {
                return Err(FieldError::Layout(format!("encoding width {dim}")));
            }
            Ok((dim / 3 - 1) / 2)
        };
        let density_bias = params
            .get("density.bias")
            .and_then(|t| t.data().first().copied())
            .unwrap_or(0.0);
        let config = FieldConfig {
            trunk_layers,
            hidden,
            color_hidden: color0[1],
            pos_freqs: freqs(pos_in)?,
            dir_freqs: freqs(dir_in)?,
            density_bias,
        };
        let reference = RadianceField::new(config, bounds, 0);
        for (a, b) in reference.params.blocks().iter().zip(params.blocks()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(FieldError::Layout(format!(
                    "block `{}` {:?} does not match expected `{}` {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        if reference.params.len() != params.len() {
            return Err(FieldError::Layout("unexpected block count".into()));
        }
        Ok(Self {
            config,
            bounds,
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundField {
        BoundField {
            vars: self.params.bind(g),
        }
    }

    /// Builds the encoded input matrices for a batch of points.
    pub fn encode_inputs(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Tensor, Tensor), FieldError> {
        if points.len() != dirs.len() {
            return Err(FieldError::BatchMismatch(points.len(), dirs.len()));
        }
        let n = points.len();
        let (pd, dd) = (self.config.pos_dim(), self.config.dir_dim());
        let mut pos = Vec::with_capacity(n * pd);
        let mut dir = Vec::with_capacity(n * dd);
        for (i, (p, d)) in points.iter().zip(dirs).enumerate() {
            if !(p.iter().all(|x| x.is_finite()) && d.iter().all(|x| x.is_finite())) {
                return Err(FieldError::NonFiniteInput(i));
            }
            encode_into(&self.bounds.normalize(p), self.config.pos_freqs, &mut pos);
            encode_into(&[d.x, d.y, d.z], self.config.dir_freqs, &mut dir);
        }
        Ok((Tensor::matrix(n, pd, pos), Tensor::matrix(n, dd, dir)))
    }

    /// Differentiable evaluation of a batch of `(x, d)` pairs.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundField,
        points: &[Vec3],
        dirs: &[Vec3],
    ) -> Result<FieldOutput, FieldError> {
        let (pos, dir) = self.encode_inputs(points, dirs)?;
        let pos = g.constant(pos);
        let dir = g.constant(dir);
        self.forward_encoded(g, bound, pos, dir)
    }

    pub fn forward_encoded(
        &self,
        g: &mut Graph,
        bound: &BoundField,
        pos: Var,
        dir: Var,
    ) -> Result<FieldOutput, FieldError> {
        let v = &bound.vars;
        let mut h = pos;
        let mut k = 0;
        for _ in 0..self.config.trunk_layers {
            let z = g.matmul(h, v[k])?;
            let z = g.add(z, v[k + 1])?;
            h = g.relu(z)?;
            k += 2;
        }
        let s = g.matmul(h, v[k])?;
        let s = g.add(s, v[k + 1])?;
        let sigma = g.softplus(s)?;
        k += 2;
        let feat = g.concat(&[h, dir])?;
        let c = g.matmul(feat, v[k])?;
        let c = g.add(c, v[k + 1])?;
        let c = g.relu(c)?;
        let c = g.matmul(c, v[k + 2])?;
        let c = g.add(c, v[k + 3])?;
        let rgb = g.sigmoid(c)?;
        Ok(FieldOutput { rgb, sigma })
    }

    /// Non-differentiable batched query returning colors and densities.
    pub fn query(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<[f64; 3]>, Vec<f64>), FieldError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, points, dirs)?;
        let rgb = g
            .value(out.rgb)
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok((rgb, g.value(out.sigma).data().to_vec()))
    }
}

/// Single-point convenience wrapper around [`RadianceField::query`].
pub fn query_field(field: &RadianceField, x: &Vec3, d: &Vec3) -> Result<([f64; 3], f64), FieldError> {
    let (c, s) = field.query(std::slice::from_ref(x), std::slice::from_ref(d))?;
    Ok((c[0], s[0]))
}
