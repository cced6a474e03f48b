//! Lorentz (hyperboloid) model of hyperbolic space.
//!
//! Points live in Minkowski space `R^{d+1}` with the time coordinate stored
//! first, on the upper sheet `{x : <x,x>_L = -1/c, x_time > 0}`, where
//! `<u,v>_L = -u_time v_time + u_spatial . v_spatial`.
//!
//! This module holds the exact `f64` geometry. [`diff`] has the same
//! operations recorded on an autodiff [`Tape`](crate::autodiff::Tape).

pub mod diff;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Margin applied when clamping arguments of `asin`/`acos`/`arccosh`.
pub const CLAMP_EPS: f64 = 1e-7;

/// Entailment cone boundary constant.
pub const CONE_K: f64 = 0.1;

/// Range a learnable curvature is clamped to.
pub const LEARNABLE_CURVATURE: (f64, f64) = (0.1, 10.0);

/// Positive curvature parameter `c`; the manifold has sectional curvature `-c`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            bail!(Usage, "curvature must be positive and finite, got {}", c);
        }
        Ok(Self(c))
    }

    /// Curvature clamped into the learnable range.
    pub fn learnable(c: f64) -> Result<Self> {
        let (lo, hi) = LEARNABLE_CURVATURE;
        Self::new(c.clamp(lo, hi))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }
}

/// A point on the hyperboloid, split into time and spatial parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    pub time: f64,
    pub spatial: Vec<f64>,
}

impl LorentzPoint {
    /// Builds a point from ambient coordinates `(time, spatial...)`.
    pub fn from_ambient(ambient: &[f64]) -> Result<Self> {
        if ambient.len() < 2 {
            bail!(Dimension, "ambient vector needs length >= 2, got {}", ambient.len());
        }
        Ok(Self {
            time: ambient[0],
            spatial: ambient[1..].to_vec(),
        })
    }

    pub fn ambient(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.spatial.len() + 1);
        v.push(self.time);
        v.extend_from_slice(&self.spatial);
        v
    }

    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial_norm(&self) -> f64 {
        norm(&self.spatial)
    }

    /// `|c <x,x>_L + 1|`, zero for a point exactly on the manifold.
    pub fn residual(&self, c: Curvature) -> f64 {
        let ss: f64 = self.spatial.iter().map(|s| s * s).sum();
        (c.get() * (ss - self.time * self.time) + 1.0).abs()
    }
}

/// A batch of points sharing one curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzBatch {
    pub points: Vec<LorentzPoint>,
}

impl LorentzBatch {
    pub fn new(points: Vec<LorentzPoint>) -> Self {
        Self { points }
    }

    /// Rows of a `[n, d+1]` row-major buffer.
    pub fn from_rows(data: &[f64], width: usize) -> Result<Self> {
        if width < 2 || !data.len().is_multiple_of(width) {
            bail!(Dimension, "{} values do not form rows of width {}", data.len(), width);
        }
        let points = data
            .chunks(width)
            .map(LorentzPoint::from_ambient)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points })
    }

    pub fn to_rows(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.ambient()).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Tangent vector stored in ambient coordinates at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: LorentzPoint,
    pub components: Vec<f64>,
}

/// Tolerance for `<base, v>_L = 0`, scaled by the magnitudes involved.
pub const TANGENT_TOL: f64 = 1e-6;

impl TangentVector {
    pub fn new(base: LorentzPoint, components: Vec<f64>) -> Result<Self> {
        let amb = base.ambient();
        let ip = lorentz_inner(&amb, &components)?;
        let scale = 1.0 + norm(&amb) * norm(&components);
        if ip.abs() > TANGENT_TOL * scale {
            bail!(Usage, "vector is not tangent: <x, v>_L = {:e}", ip);
        }
        Ok(Self { base, components })
    }

    pub fn zero(base: LorentzPoint) -> Self {
        let n = base.dim() + 1;
        Self {
            base,
            components: vec![0.0; n],
        }
    }

    /// `sqrt(<v,v>_L)`; tangent vectors are space-like so this is real.
    pub fn lorentz_norm(&self) -> f64 {
        lorentz_inner(&self.components, &self.components)
            .unwrap_or(0.0)
            .max(0.0)
            .sqrt()
    }
}

/// Entailment cone rooted at `apex`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntailmentCone {
    pub apex: LorentzPoint,
    pub k: f64,
}

impl EntailmentCone {
    pub fn new(apex: LorentzPoint) -> Self {
        Self { apex, k: CONE_K }
    }

    pub fn aperture(&self, c: Curvature) -> f64 {
        aperture(&self.apex, c, self.k)
    }

    /// Whether `y` lies inside the cone (exterior angle at most the aperture).
    pub fn contains(&self, y: &LorentzPoint, c: Curvature) -> Result<bool> {
        Ok(exterior_angle(&self.apex, y, c)? <= self.aperture(c))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `-u_time v_time + u_spatial . v_spatial`.
pub fn lorentz_inner(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        bail!(Dimension, "inner product of lengths {} and {}", u.len(), v.len());
    }
    if u.len() < 2 {
        bail!(Dimension, "ambient vectors need length >= 2, got {}", u.len());
    }
    let spatial: f64 = u[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
    Ok(-u[0] * v[0] + spatial)
}

/// Places `spatial` on the manifold by solving for the time coordinate.
pub fn lift(spatial: &[f64], c: Curvature) -> Result<LorentzPoint> {
    if spatial.is_empty() {
        bail!(Dimension, "lift needs at least one spatial coordinate");
    }
    if let Some(bad) = spatial.iter().find(|s| !s.is_finite()) {
        bail!(Numeric, "non-finite spatial coordinate {}", bad);
    }
    let ss: f64 = spatial.iter().map(|s| s * s).sum();
    Ok(LorentzPoint {
        time: (1.0 / c.get() + ss).sqrt(),
        spatial: spatial.to_vec(),
    })
}

/// The manifold origin `(1/sqrt(c), 0, ..., 0)`.
pub fn origin(dim: usize, c: Curvature) -> LorentzPoint {
    LorentzPoint {
        time: 1.0 / c.sqrt(),
        spatial: vec![0.0; dim],
    }
}

/// Relative tolerance for `|c<x,x>_L + 1|` when checking inputs.
pub const RESIDENCY_TOL: f64 = 1e-6;

fn check_resident(x: &LorentzPoint, c: Curvature, what: &str) -> Result<()> {
    let scale = 1.0 + c.get() * x.time * x.time;
    if x.residual(c) > RESIDENCY_TOL * scale || x.time <= 0.0 {
        bail!(
            Usage,
            "{} is not on the manifold of curvature {} (residual {:e})",
            what,
            c.get(),
            x.residual(c)
        );
    }
    Ok(())
}

/// Geodesic distance `arccosh(max(1, -c <x,y>_L)) / sqrt(c)`.
///
/// Close pairs switch to the equivalent chord form
/// `2 asinh(sqrt(c) ||x - y||_L / 2) / sqrt(c)`, which stays exact at `x = y`.
pub fn distance(x: &LorentzPoint, y: &LorentzPoint, c: Curvature) -> Result<f64> {
    check_resident(x, c, "x")?;
    check_resident(y, c, "y")?;
    let (xa, ya) = (x.ambient(), y.ambient());
    let arg = -c.get() * lorentz_inner(&xa, &ya)?;
    if arg > 1.0 + 1e-3 {
        return Ok(arg.acosh() / c.sqrt());
    }
    let diff: Vec<f64> = xa.iter().zip(&ya).map(|(a, b)| a - b).collect();
    let chord = lorentz_inner(&diff, &diff)?.max(0.0).sqrt();
    Ok(2.0 * (c.sqrt() * chord / 2.0).asinh() / c.sqrt())
}

/// Geodesic distance from the origin.
pub fn radius(x: &LorentzPoint, c: Curvature) -> Result<f64> {
    distance(&origin(x.dim(), c), x, c)
}

/// Moves a point between manifolds by scaling with `sqrt(c_from / c_to)`.
pub fn rescale_curvature(x: &LorentzPoint, c_from: Curvature, c_to: Curvature) -> LorentzPoint {
    if c_from == c_to {
        return x.clone();
    }
    let f = (c_from.get() / c_to.get()).sqrt();
    LorentzPoint {
        time: x.time * f,
        spatial: x.spatial.iter().map(|s| s * f).collect(),
    }
}

/// Projects a time-like ambient vector onto the manifold by Lorentzian normalisation.
fn normalize(z: &[f64], c: Curvature) -> Result<LorentzPoint> {
    let zz = lorentz_inner(z, z)?;
    let n = zz.abs().sqrt();
    if n == 0.0 || !n.is_finite() {
        bail!(Degenerate, "ambient vector has zero Lorentzian norm");
    }
    let s = 1.0 / (c.sqrt() * n);
    LorentzPoint::from_ambient(&z.iter().map(|v| v * s).collect::<Vec<_>>())
}

/// Weighted Lorentz centroid `sum w_i x_i / (sqrt(c) ||sum w_i x_i||_L)`.
pub fn centroid(points: &[LorentzPoint], weights: &[f64], c: Curvature) -> Result<LorentzPoint> {
    if points.is_empty() || points.len() != weights.len() {
        bail!(
            Dimension,
            "{} points with {} weights",
            points.len(),
            weights.len()
        );
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        bail!(Usage, "centroid weights must be finite and non-negative");
    }
    if !weights.iter().any(|w| *w > 0.0) {
        bail!(Degenerate, "centroid needs at least one positive weight");
    }
    let d = points[0].dim();
    let mut acc = vec![0.0; d + 1];
    for (p, w) in points.iter().zip(weights) {
        if p.dim() != d {
            bail!(Dimension, "mixed point dimensions {} and {}", d, p.dim());
        }
        acc[0] += w * p.time;
        for (a, s) in acc[1..].iter_mut().zip(&p.spatial) {
            *a += w * s;
        }
    }
    normalize(&acc, c)
}

/// Half-aperture of the entailment cone at `x`,
/// `asin(clamp(2K / (sqrt(c) ||x_spatial||), 0, 1 - eps))`.
pub fn aperture(x: &LorentzPoint, c: Curvature, k: f64) -> f64 {
    let n = x.spatial_norm();
    let arg = if n > 0.0 {
        2.0 * k / (c.sqrt() * n)
    } else {
        f64::INFINITY
    };
    arg.clamp(0.0, 1.0 - CLAMP_EPS).asin()
}

/// Angle at `x` between the extension of the origin->x geodesic and the x->y geodesic.
pub fn exterior_angle(x: &LorentzPoint, y: &LorentzPoint, c: Curvature) -> Result<f64> {
    if x.dim() != y.dim() {
        bail!(Dimension, "points of dimension {} and {}", x.dim(), y.dim());
    }
    let xn = x.spatial_norm();
    if xn == 0.0 {
        bail!(Degenerate, "exterior angle undefined at the origin");
    }
    let cxy = c.get() * lorentz_inner(&x.ambient(), &y.ambient())?;
    let den_sq = cxy * cxy - 1.0;
    if den_sq <= 0.0 {
        bail!(Degenerate, "exterior angle undefined for coincident points");
    }
    let ratio = (y.time + x.time * cxy) / (xn * den_sq.sqrt());
    Ok(ratio.clamp(-1.0, 1.0).acos())
}

fn check_tangent(x: &LorentzPoint, v: &[f64]) -> Result<()> {
    TangentVector::new(x.clone(), v.to_vec()).map(|_| ())
}

/// Exponential map: follows the geodesic from `x` with initial velocity `v`.
pub fn exp_map(x: &LorentzPoint, v: &TangentVector, c: Curvature) -> Result<LorentzPoint> {
    check_tangent(x, &v.components)?;
    let vn = v.lorentz_norm();
    let theta = c.sqrt() * vn;
    if theta == 0.0 {
        return Ok(x.clone());
    }
    let (ch, sh) = (theta.cosh(), theta.sinh() / theta);
    let xa = x.ambient();
    let out: Vec<f64> = xa
        .iter()
        .zip(&v.components)
        .map(|(xi, vi)| ch * xi + sh * vi)
        .collect();
    // Recompute time so rounding never leaves the manifold.
    lift(&out[1..], c)
}

/// Logarithmic map: the tangent vector at `x` whose exponential reaches `y`.
pub fn log_map(x: &LorentzPoint, y: &LorentzPoint, c: Curvature) -> Result<TangentVector> {
    if x.dim() != y.dim() {
        bail!(Dimension, "points of dimension {} and {}", x.dim(), y.dim());
    }
    let (xa, ya) = (x.ambient(), y.ambient());
    let ip = lorentz_inner(&xa, &ya)?;
    let d = (-c.get() * ip).max(1.0).acosh() / c.sqrt();
    let u: Vec<f64> = xa.iter().zip(&ya).map(|(xi, yi)| yi + c.get() * ip * xi).collect();
    let un = lorentz_inner(&u, &u)?.max(0.0).sqrt();
    if d == 0.0 || un == 0.0 {
        return Ok(TangentVector::zero(x.clone()));
    }
    Ok(TangentVector {
        base: x.clone(),
        components: u.iter().map(|ui| d * ui / un).collect(),
    })
}

/// Parallel transport of `v` along the geodesic from its base to `y`.
pub fn transport(
    x: &LorentzPoint,
    y: &LorentzPoint,
    v: &TangentVector,
    c: Curvature,
) -> Result<TangentVector> {
    check_tangent(x, &v.components)?;
    let (xa, ya) = (x.ambient(), y.ambient());
    let cxy = c.get() * lorentz_inner(&xa, &ya)?;
    let coef = c.get() * lorentz_inner(&ya, &v.components)? / (1.0 - cxy);
    let components = v
        .components
        .iter()
        .zip(xa.iter().zip(&ya))
        .map(|(vi, (xi, yi))| vi + coef * (xi + yi))
        .collect();
    Ok(TangentVector {
        base: y.clone(),
        components,
    })
}

/// Orthogonal projection of an ambient vector onto the tangent space at `x`.
pub fn project_tangent(x: &LorentzPoint, u: &[f64], c: Curvature) -> Result<TangentVector> {
    let xa = x.ambient();
    let ip = lorentz_inner(&xa, u)?;
    let components = u.iter().zip(&xa).map(|(ui, xi)| ui + c.get() * ip * xi).collect();
    Ok(TangentVector {
        base: x.clone(),
        components,
    })
}

impl From<LorentzPoint> for Vec<f64> {
    fn from(p: LorentzPoint) -> Self {
        p.ambient()
    }
}

impl TryFrom<&[f64]> for LorentzPoint {
    type Error = Error;

    fn try_from(v: &[f64]) -> Result<Self> {
        LorentzPoint::from_ambient(v)
    }
}
