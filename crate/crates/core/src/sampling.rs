//! Volume sample placement along rays.
//!
//! Coarse samples are stratified inside a window of the ray. When a pixel
//! carries a depth prior the window starts narrow around the prior and is
//! widened to the full scene bounds by [`HggSchedule::gamma`]. Fine samples
//! are drawn from the coarse weights by inverting their piecewise-constant CDF.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Windows narrower than this collapse to their midpoint.
pub const DEGENERATE_WIDTH: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplingError {
    #[error("invalid bounds: near {near} must be below far {far}")]
    InvalidBounds { near: f64, far: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("need at least one sample")]
    NoSamples,
    #[error("bin edges must be strictly increasing and match the weights")]
    InvalidBins,
    #[error("negative or non-finite weight {0}")]
    InvalidWeight(f64),
}

/// Local-to-global window schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HggSchedule {
    /// Iterations until the window reaches the full scene bounds.
    pub n_hgg: u64,
    /// Minimum adjusting rate, in `(0, 1]`.
    pub epsilon: f64,
}

impl HggSchedule {
    pub fn new(n_hgg: u64, epsilon: f64) -> Result<Self, SamplingError> {
        if n_hgg == 0 {
            return Err(SamplingError::InvalidSchedule("n_hgg must be >= 1".into()));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(SamplingError::InvalidSchedule(format!(
                "epsilon_hgg must lie in (0, 1], got {epsilon}"
            )));
        }
        Ok(Self { n_hgg, epsilon })
    }

    /// Region adjustment rate at iteration `i`.
    pub fn gamma(&self, i: u64) -> f64 {
        let progress = (i as f64 / self.n_hgg as f64).max(self.epsilon).min(1.0);
        half_cosine(progress)
    }

    /// Smallest value [`HggSchedule::gamma`] can return.
    pub fn min_gamma(&self) -> f64 {
        half_cosine(self.epsilon)
    }
}

/// `(1 - cos(pi x)) / 2`, written with a sine so that x = 0, 1/2 and 1 map
/// to exactly 0, 1/2 and 1.
fn half_cosine(x: f64) -> f64 {
    (1.0 - ((0.5 - x) * PI).sin()) / 2.0
}

pub fn hgg_gamma(i: u64, schedule: &HggSchedule) -> f64 {
    schedule.gamma(i)
}

/// Sampling window around a depth prior:
/// `[t_d + (t_n - t_d) gamma, t_d + (t_f - t_d) gamma]`.
///
/// The prior is clamped into `[t_n, t_f]` (with a warning) and `gamma >= 1`
/// returns the scene bounds exactly.
pub fn hgg_window(t_depth: f64, near: f64, far: f64, gamma: f64) -> Result<(f64, f64), SamplingError> {
    if !(near < far) {
        return Err(SamplingError::InvalidBounds { near, far });
    }
    let gamma = gamma.clamp(0.0, 1.0);
    if gamma >= 1.0 {
        return Ok((near, far));
    }
    let depth = if t_depth < near || t_depth > far {
        log::warn!("depth prior {t_depth} outside scene bounds [{near}, {far}], clamping");
        t_depth.clamp(near, far)
    } else {
        t_depth
    };
    let lo = (depth + (near - depth) * gamma).clamp(near, depth);
    let hi = (depth + (far - depth) * gamma).clamp(depth, far);
    Ok((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Coarse,
    Fine,
}

/// Sorted sample locations along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub ts: Vec<f64>,
    pub kind: SampleKind,
    /// The window the samples were drawn from.
    pub window: (f64, f64),
    /// Set when the samples are a fallback rather than a regular draw.
    pub degenerate: bool,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// One uniform draw per equal-width bin of `[near, far]`; with `jitter`
/// off every sample sits at its bin center.
pub fn stratified_samples<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    jitter: bool,
    rng: &mut R,
) -> Result<SampleSet, SamplingError> {
    if n == 0 {
        return Err(SamplingError::NoSamples);
    }
    if !(near <= far) {
        return Err(SamplingError::InvalidBounds { near, far });
    }
    let width = far - near;
    if width < DEGENERATE_WIDTH {
        return Ok(SampleSet {
            ts: vec![0.5 * (near + far); n],
            kind: SampleKind::Coarse,
            window: (near, far),
            degenerate: true,
        });
    }
    let step = width / n as f64;
    let ts = (0..n)
        .map(|k| {
            let u: f64 = if jitter { rng.gen() } else { 0.5 };
            (near + (k as f64 + u) * step).min(far)
        })
        .collect();
    Ok(SampleSet {
        ts,
        kind: SampleKind::Coarse,
        window: (near, far),
        degenerate: false,
    })
}

/// `n` draws from the piecewise-constant density proportional to `weights`
/// over bins `[edges[k], edges[k + 1])`, sorted ascending.
///
/// All-zero weights fall back to a uniform density over the edges' span and
/// flag the result as degenerate.
pub fn inverse_transform_samples<R: Rng + ?Sized>(
    edges: &[f64],
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<SampleSet, SamplingError> {
    if n == 0 {
        return Err(SamplingError::NoSamples);
    }
    if edges.len() != weights.len() + 1 || weights.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(SamplingError::InvalidBins);
    }
    if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(SamplingError::InvalidWeight(w));
    }
    let total: f64 = weights.iter().sum();
    let window = (edges[0], *edges.last().unwrap());
    let degenerate = total <= 0.0;

    // cdf[k] = P(bin < k)
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += if degenerate { edges[k + 1] - edges[k] } else { w };
        cdf.push(acc);
    }
    let norm = acc;
    cdf.iter_mut().for_each(|c| *c /= norm);
    *cdf.last_mut().unwrap() = 1.0;

    let mut ts: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            // first bin whose upper cdf exceeds u, skipping empty bins
            let k = cdf[1..].partition_point(|&c| c <= u).min(weights.len() - 1);
            let (c0, c1) = (cdf[k], cdf[k + 1]);
            let frac = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.5 };
            let t = edges[k] + frac * (edges[k + 1] - edges[k]);
            t.min(edges[k + 1])
        })
        .collect();
    ts.sort_by(f64::total_cmp);
    Ok(SampleSet {
        ts,
        kind: SampleKind::Fine,
        window,
        degenerate,
    })
}

/// Merges two sorted sample lists into one sorted list.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}
