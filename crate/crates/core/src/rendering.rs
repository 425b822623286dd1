//! Volume compositing and the coarse/fine ray rendering pipeline.
//!
//! Two routes compute the same quadrature: [`composite`] works on plain
//! values and returns the full per-sample breakdown, while
//! [`composite_graph`] records the batch on a [`Graph`] for training.

use diffcore::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::{BoundField, FieldError, RadianceField};
use crate::geometry::{Ray, Vec3};
use crate::sampling::{
    hgg_window, inverse_transform_samples, merge_sorted, stratified_samples, SampleSet, SamplingError,
};

/// Length used for the last interval under [`FinalInterval::Huge`].
pub const HUGE_INTERVAL: f64 = 1e10;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("sample locations are not sorted at index {0}")]
    Unsorted(usize),
    #[error("negative density {value} at sample {index}")]
    NegativeDensity { index: usize, value: f64 },
    #[error("array lengths differ: {0}")]
    Length(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Graph(#[from] diffcore::DiffError),
}

/// How the interval after the last sample is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalInterval {
    /// `t_far - t_N`.
    #[default]
    ToFar,
    /// A practically infinite interval.
    Huge,
}

/// Per-ray compositing outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    /// Expected depth `sum_i w_i t_i` (not normalized by opacity).
    pub depth: f64,
    pub weights: Vec<f64>,
    /// `T_i` for every sample; `T_1 = 1`.
    pub transmittance: Vec<f64>,
    /// `T_{N+1}`, the light passing the whole segment.
    pub residual: f64,
    /// `sum_i w_i`.
    pub opacity: f64,
}

/// Interval lengths `delta_i = t_{i+1} - t_i`, with the last one set by `final_interval`.
pub fn deltas(ts: &[f64], t_far: f64, final_interval: FinalInterval) -> Vec<f64> {
    let n = ts.len();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                ts[i + 1] - ts[i]
            } else {
                match final_interval {
                    FinalInterval::ToFar => (t_far - ts[i]).max(0.0),
                    FinalInterval::Huge => HUGE_INTERVAL,
                }
            }
        })
        .collect()
}

fn check_sorted(ts: &[f64]) -> Result<(), RenderError> {
    match ts.windows(2).position(|w| !(w[0] <= w[1])) {
        Some(i) => Err(RenderError::Unsorted(i + 1)),
        None => Ok(()),
    }
}

/// `C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i` with
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn composite(colors: &[[f64; 3]], sigmas: &[f64], ts: &[f64], t_far: f64) -> Result<RenderResult, RenderError> {
    composite_with(colors, sigmas, ts, t_far, FinalInterval::ToFar)
}

pub fn composite_with(
    colors: &[[f64; 3]],
    sigmas: &[f64],
    ts: &[f64],
    t_far: f64,
    final_interval: FinalInterval,
) -> Result<RenderResult, RenderError> {
    if colors.len() != sigmas.len() || sigmas.len() != ts.len() {
        return Err(RenderError::Length(format!(
            "{} colors, {} densities, {} samples",
            colors.len(),
            sigmas.len(),
            ts.len()
        )));
    }
    check_sorted(ts)?;
    if let Some((index, &value)) = sigmas.iter().enumerate().find(|(_, s)| !(**s >= 0.0)) {
        return Err(RenderError::NegativeDensity { index, value });
    }
    let delta = deltas(ts, t_far, final_interval);
    let n = ts.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut optical = 0.0f64;
    let mut color = [0.0; 3];
    for i in 0..n {
        let t_i = (-optical).exp();
        let tau = sigmas[i] * delta[i];
        let w = t_i * (1.0 - (-tau).exp());
        transmittance.push(t_i);
        weights.push(w);
        for k in 0..3 {
            color[k] += w * colors[i][k];
        }
        optical += tau;
    }
    let depth = render_depth(&weights, ts);
    let opacity = weights.iter().sum();
    Ok(RenderResult {
        color,
        depth,
        weights,
        transmittance,
        residual: (-optical).exp(),
        opacity,
    })
}

/// `sum_i w_i t_i`.
pub fn render_depth(weights: &[f64], ts: &[f64]) -> f64 {
    weights.iter().zip(ts).map(|(w, t)| w * t).sum()
}

/// Graph handles for a composited batch of `r` rays with `s` samples each.
#[derive(Clone, Copy, Debug)]
pub struct CompositeVars {
    /// `[r, 3]`
    pub color: Var,
    /// `[r]`
    pub depth: Var,
    /// `[r, s]`
    pub weights: Var,
    /// `[r]`
    pub opacity: Var,
}

/// Differentiable compositing of `rgb [r*s, 3]` and `sigma [r*s, 1]`.
///
/// Every row of `ts` must hold the same number of sorted samples.
pub fn composite_graph(
    g: &mut Graph,
    rgb: Var,
    sigma: Var,
    ts: &[Vec<f64>],
    t_far: &[f64],
    final_interval: FinalInterval,
) -> Result<CompositeVars, RenderError> {
    let r = ts.len();
    let s = ts.first().map_or(0, Vec::len);
    if ts.iter().any(|row| row.len() != s) || t_far.len() != r {
        return Err(RenderError::Length("ragged sample rows".into()));
    }
    let mut delta = Vec::with_capacity(r * s);
    let mut locs = Vec::with_capacity(r * s);
    for (row, &far) in ts.iter().zip(t_far) {
        check_sorted(row)?;
        delta.extend(deltas(row, far, final_interval));
        locs.extend_from_slice(row);
    }
    let delta = g.constant(Tensor::matrix(r, s, delta));
    let locs = g.constant(Tensor::matrix(r, s, locs));

    let sigma = g.reshape(sigma, &[r, s])?;
    let tau = g.mul(sigma, delta)?;
    let optical = g.cumsum_exclusive(tau)?;
    let neg = g.neg(optical)?;
    let trans = g.exp(neg)?;
    let neg_tau = g.neg(tau)?;
    let survive = g.exp(neg_tau)?;
    let absorbed = g.neg(survive)?;
    let alpha = g.add_scalar(absorbed, 1.0)?;
    let weights = g.mul(trans, alpha)?;
    let rgb = g.reshape(rgb, &[r, s, 3])?;
    let color = g.weighted_sum(weights, rgb)?;
    let wt = g.mul(weights, locs)?;
    let depth = g.sum_last(wt)?;
    let opacity = g.sum_last(weights)?;
    Ok(CompositeVars {
        color,
        depth,
        weights,
        opacity,
    })
}

/// Sample counts and options for [`render_batch`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub final_interval: FinalInterval,
    /// Jitter coarse samples inside their strata.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 128,
            final_interval: FinalInterval::ToFar,
            jitter: true,
        }
    }
}

/// Coarse window for one ray: guided by the prior when `gamma` is given.
pub fn coarse_window(ray: &Ray, prior: Option<f64>, gamma: Option<f64>) -> Result<(f64, f64), RenderError> {
    match (prior, gamma) {
        (Some(depth), Some(gamma)) => Ok(hgg_window(depth, ray.near, ray.far, gamma)?),
        _ => Ok((ray.near, ray.far)),
    }
}

/// Bins for fine sampling: `[t_i, t_{i+1})` and `[t_N, t_far)`, weighted by
/// the coarse weights. Zero-width bins are folded into a neighbour.
fn fine_bins(ts: &[f64], weights: &[f64], t_far: f64) -> (Vec<f64>, Vec<f64>) {
    let mut edges = vec![ts[0]];
    let mut w = Vec::with_capacity(weights.len());
    let mut carry = 0.0;
    for i in 0..ts.len() {
        let hi = if i + 1 < ts.len() { ts[i + 1] } else { t_far };
        if hi > *edges.last().unwrap() {
            edges.push(hi);
            w.push(carry + weights[i]);
            carry = 0.0;
        } else if let Some(last) = w.last_mut() {
            *last += weights[i];
        } else {
            carry += weights[i];
        }
    }
    (edges, w)
}

/// Fine sample locations (union of coarse and fine draws) for one ray.
pub fn fine_samples<R: Rng + ?Sized>(
    coarse: &SampleSet,
    coarse_weights: &[f64],
    n_fine: usize,
    rng: &mut R,
) -> Result<Vec<f64>, RenderError> {
    if n_fine == 0 {
        return Ok(coarse.ts.clone());
    }
    let (edges, w) = fine_bins(&coarse.ts, coarse_weights, coarse.window.1);
    if coarse.degenerate || w.is_empty() {
        let mid = 0.5 * (coarse.window.0 + coarse.window.1);
        return Ok(merge_sorted(&coarse.ts, &vec![mid; n_fine]));
    }
    let fine = inverse_transform_samples(&edges, &w, n_fine, rng)?;
    Ok(merge_sorted(&coarse.ts, &fine.ts))
}

/// A batch recorded on a graph.
#[derive(Clone, Debug)]
pub struct BatchRender {
    pub coarse: CompositeVars,
    pub fine: CompositeVars,
    pub coarse_samples: Vec<SampleSet>,
    pub fine_ts: Vec<Vec<f64>>,
    /// Rays whose coarse window came from a depth prior.
    pub guided_rays: usize,
}

/// A field together with its parameters bound on the current graph.
pub type BoundRef<'a> = (&'a RadianceField, &'a BoundField);

fn sample_points(rays: &[Ray], ts: &[Vec<f64>]) -> (Vec<Vec3>, Vec<Vec3>) {
    let total = ts.iter().map(Vec::len).sum();
    let mut pts = Vec::with_capacity(total);
    let mut dirs = Vec::with_capacity(total);
    for (ray, row) in rays.iter().zip(ts) {
        for &t in row {
            pts.push(ray.at(t));
            dirs.push(ray.direction);
        }
    }
    (pts, dirs)
}

/// Coarse pass in the (optional) guided window, then the fine pass over the
/// union of coarse and inverse-transform samples.
#[allow(clippy::too_many_arguments)]
pub fn render_batch<R: Rng + ?Sized>(
    g: &mut Graph,
    coarse: BoundRef<'_>,
    fine: BoundRef<'_>,
    rays: &[Ray],
    priors: &[Option<f64>],
    gamma: Option<f64>,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<BatchRender, RenderError> {
    if priors.len() != rays.len() {
        return Err(RenderError::Length("one prior slot per ray".into()));
    }
    let mut guided_rays = 0;
    let mut coarse_samples = Vec::with_capacity(rays.len());
    for (ray, prior) in rays.iter().zip(priors) {
        if prior.is_some() && gamma.is_some() {
            guided_rays += 1;
        }
        let (lo, hi) = coarse_window(ray, *prior, gamma)?;
        coarse_samples.push(stratified_samples(lo, hi, cfg.n_coarse, cfg.jitter, rng)?);
    }
    let coarse_ts: Vec<Vec<f64>> = coarse_samples.iter().map(|s| s.ts.clone()).collect();
    let fars: Vec<f64> = coarse_samples.iter().map(|s| s.window.1).collect();

    let (pts, dirs) = sample_points(rays, &coarse_ts);
    let out = coarse.0.forward(g, coarse.1, &pts, &dirs)?;
    let coarse_vars = composite_graph(g, out.rgb, out.sigma, &coarse_ts, &fars, cfg.final_interval)?;

    let s = cfg.n_coarse;
    let fine_ts = {
        let w = g.value(coarse_vars.weights).data();
        coarse_samples
            .iter()
            .enumerate()
            .map(|(i, set)| fine_samples(set, &w[i * s..(i + 1) * s], cfg.n_fine, rng))
            .collect::<Result<Vec<_>, _>>()?
    };
    let (pts, dirs) = sample_points(rays, &fine_ts);
    let out = fine.0.forward(g, fine.1, &pts, &dirs)?;
    let fine_vars = composite_graph(g, out.rgb, out.sigma, &fine_ts, &fars, cfg.final_interval)?;

    Ok(BatchRender {
        coarse: coarse_vars,
        fine: fine_vars,
        coarse_samples,
        fine_ts,
        guided_rays,
    })
}

/// Coarse and fine results for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRender {
    pub coarse: RenderResult,
    pub fine: RenderResult,
    pub coarse_samples: SampleSet,
    pub fine_ts: Vec<f64>,
}

/// Value-only rendering of many rays (no gradient tape is kept).
#[allow(clippy::too_many_arguments)]
pub fn render_rays<R: Rng + ?Sized>(
    coarse: &RadianceField,
    fine: &RadianceField,
    rays: &[Ray],
    priors: &[Option<f64>],
    gamma: Option<f64>,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<Vec<RayRender>, RenderError> {
    if priors.len() != rays.len() {
        return Err(RenderError::Length("one prior slot per ray".into()));
    }
    let mut coarse_samples = Vec::with_capacity(rays.len());
    for (ray, prior) in rays.iter().zip(priors) {
        let (lo, hi) = coarse_window(ray, *prior, gamma)?;
        coarse_samples.push(stratified_samples(lo, hi, cfg.n_coarse, cfg.jitter, rng)?);
    }
    let coarse_ts: Vec<Vec<f64>> = coarse_samples.iter().map(|s| s.ts.clone()).collect();
    let (pts, dirs) = sample_points(rays, &coarse_ts);
    let (rgb, sigma) = coarse.query(&pts, &dirs)?;

    let mut coarse_results = Vec::with_capacity(rays.len());
    let mut fine_ts = Vec::with_capacity(rays.len());
    let s = cfg.n_coarse;
    for (i, set) in coarse_samples.iter().enumerate() {
        let res = composite_with(
            &rgb[i * s..(i + 1) * s],
            &sigma[i * s..(i + 1) * s],
            &set.ts,
            set.window.1,
            cfg.final_interval,
        )?;
        fine_ts.push(fine_samples(set, &res.weights, cfg.n_fine, rng)?);
        coarse_results.push(res);
    }

    let (pts, dirs) = sample_points(rays, &fine_ts);
    let (rgb, sigma) = fine.query(&pts, &dirs)?;
    let mut out = Vec::with_capacity(rays.len());
    let mut offset = 0;
    for (((set, cres), ts), _ray) in coarse_samples.into_iter().zip(coarse_results).zip(fine_ts).zip(rays) {
        let n = ts.len();
        let fres = composite_with(
            &rgb[offset..offset + n],
            &sigma[offset..offset + n],
            &ts,
            set.window.1,
            cfg.final_interval,
        )?;
        offset += n;
        out.push(RayRender {
            coarse: cres,
            fine: fres,
            coarse_samples: set,
            fine_ts: ts,
        });
    }
    Ok(out)
}

/// One ray through the coarse/fine pipeline.
pub fn render_ray<R: Rng + ?Sized>(
    coarse: &RadianceField,
    fine: &RadianceField,
    ray: &Ray,
    prior: Option<f64>,
    gamma: Option<f64>,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<RayRender, RenderError> {
    let mut out = render_rays(coarse, fine, std::slice::from_ref(ray), &[prior], gamma, cfg, rng)?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_space() {
        let r = composite(&[[1.0, 1.0, 1.0]; 4], &[0.0; 4], &[1.0, 2.0, 3.0, 4.0], 5.0).unwrap();
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.opacity, 0.0);
        assert_eq!(r.residual, 1.0);
        assert_eq!(r.depth, 0.0);
    }

    #[test]
    fn half_absorbed_single_sample() {
        let r = composite(&[[1.0, 0.0, 0.0]], &[2f64.ln()], &[1.0], 2.0).unwrap();
        assert!((r.color[0] - 0.5).abs() < 1e-15);
        assert_eq!(r.color[1], 0.0);
        assert!((r.residual - 0.5).abs() < 1e-15);
    }

    #[test]
    fn opaque_sample_depth() {
        let r = composite(&[[0.2; 3]], &[1e6], &[3.0], 4.0).unwrap();
        assert!((r.depth - 3.0).abs() < 1e-12);
        assert_eq!(render_depth(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            composite(&[[0.0; 3]; 2], &[1.0, 1.0], &[2.0, 1.0], 3.0),
            Err(RenderError::Unsorted(1))
        ));
        assert!(matches!(
            composite(&[[0.0; 3]; 2], &[1.0, -1.0], &[1.0, 2.0], 3.0),
            Err(RenderError::NegativeDensity { index: 1, .. })
        ));
    }

    #[test]
    fn huge_final_interval_absorbs_everything() {
        let r = composite_with(&[[1.0; 3]], &[0.5], &[1.0], 1.5, FinalInterval::Huge).unwrap();
        assert!((r.opacity - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fine_bins_fold_empty_intervals() {
        let (e, w) = fine_bins(&[1.0, 1.0, 2.0], &[0.1, 0.2, 0.3], 3.0);
        assert_eq!(e, vec![1.0, 2.0, 3.0]);
        assert_eq!(w, vec![0.1 + 0.2, 0.3]);
    }
}
