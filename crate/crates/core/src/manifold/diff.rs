//! Lorentz geometry recorded on a [`Tape`].
//!
//! Points are tensors whose last axis is `(time, spatial...)`. Curvatures and
//! the cone constant are rank-0 tensors so gradients reach them.

use super::CLAMP_EPS;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{bail, Result};

fn width(t: &Tape, x: Var) -> Result<usize> {
    match t.shape(x).last() {
        Some(&w) if w >= 2 => Ok(w),
        _ => bail!(Dimension, "expected ambient last axis >= 2, got {:?}", t.shape(x)),
    }
}

/// Constant `(-1, 1, ..., 1)` of the given width.
pub fn metric(t: &mut Tape, width: usize) -> Result<Var> {
    let mut m = vec![1.0; width];
    m[0] = -1.0;
    t.constant(&Tensor::vector(m))
}

pub fn time(t: &mut Tape, x: Var) -> Result<Var> {
    t.slice(x, 0, 1)
}

pub fn spatial(t: &mut Tape, x: Var) -> Result<Var> {
    let w = width(t, x)?;
    t.slice(x, 1, w)
}

/// `<x, y>_L` over the last axis, kept with size 1.
pub fn inner(t: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let w = width(t, x)?;
    let m = metric(t, w)?;
    let xm = t.mul(x, m)?;
    let p = t.mul(xm, y)?;
    t.sum_last(p)
}

/// `||s||^2` over the last axis, kept with size 1.
pub fn sq_norm(t: &mut Tape, s: Var) -> Result<Var> {
    let sq = t.square(s)?;
    t.sum_last(sq)
}

/// Prepends `sqrt(1/c + ||s||^2)` to spatial coordinates `s`.
pub fn lift(t: &mut Tape, s: Var, c: Var) -> Result<Var> {
    let one = t.scalar(1.0)?;
    let inv_c = t.div(one, c)?;
    let ss = sq_norm(t, s)?;
    let arg = t.add(ss, inv_c)?;
    let time = t.sqrt(arg)?;
    t.concat(&[time, s])
}

/// Multiplies by `sqrt(c_from / c_to)`; the identity when both are the same node.
pub fn rescale(t: &mut Tape, x: Var, c_from: Var, c_to: Var) -> Result<Var> {
    if c_from == c_to {
        return Ok(x);
    }
    let r = t.div(c_from, c_to)?;
    let f = t.sqrt(r)?;
    t.mul(x, f)
}

/// `z / (sqrt(c) sqrt(|<z,z>_L|))`.
pub fn normalize(t: &mut Tape, z: Var, c: Var) -> Result<Var> {
    let zz = inner(t, z, z)?;
    let a = t.abs(zz)?;
    let ca = t.mul(a, c)?;
    let den = t.sqrt(ca)?;
    t.div(z, den)
}

/// Equal-weight Lorentz centroid over the second-to-last axis.
pub fn centroid(t: &mut Tape, x: Var, c: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    if shape.len() < 2 {
        bail!(Dimension, "centroid needs [..., n, d+1], got {:?}", shape);
    }
    let s = t.sum_axis(x, shape.len() - 2)?;
    let mut out = shape.clone();
    out.remove(shape.len() - 2);
    let s = t.reshape(s, &out)?;
    normalize(t, s, c)
}

/// Geodesic distance between matching rows, kept with size 1 on the last axis.
pub fn distance(t: &mut Tape, x: Var, y: Var, c: Var) -> Result<Var> {
    let ip = inner(t, x, y)?;
    let arg = t.mul(ip, c)?;
    let arg = t.neg(arg)?;
    from_cosh_arg(t, arg, c)
}

fn from_cosh_arg(t: &mut Tape, arg: Var, c: Var) -> Result<Var> {
    let arg = t.clamp(arg, 1.0, f64::INFINITY)?;
    let ac = t.acosh(arg)?;
    let sc = t.sqrt(c)?;
    t.div(ac, sc)
}

/// All-pairs geodesic distances: `a` is `[n, d+1]`, `b` is `[m, d+1]`, result `[n, m]`.
pub fn pairwise_distance(t: &mut Tape, a: Var, b: Var, c: Var) -> Result<Var> {
    let w = width(t, a)?;
    let m = metric(t, w)?;
    let am = t.mul(a, m)?;
    let bt = t.transpose(b)?;
    let ip = t.matmul(am, bt)?;
    let arg = t.mul(ip, c)?;
    let arg = t.neg(arg)?;
    from_cosh_arg(t, arg, c)
}

/// Distance from the manifold origin, kept with size 1 on the last axis.
pub fn radius(t: &mut Tape, x: Var, c: Var) -> Result<Var> {
    let tm = time(t, x)?;
    let sc = t.sqrt(c)?;
    let arg = t.mul(tm, sc)?;
    from_cosh_arg(t, arg, c)
}

fn spatial_norm(t: &mut Tape, x: Var) -> Result<Var> {
    let s = spatial(t, x)?;
    let ss = sq_norm(t, s)?;
    let ss = t.clamp(ss, f64::MIN_POSITIVE, f64::INFINITY)?;
    t.sqrt(ss)
}

/// `asin(clamp(2K / (sqrt(c) ||x_spatial||), 0, 1 - eps))`.
pub fn aperture(t: &mut Tape, x: Var, c: Var, k: Var) -> Result<Var> {
    let n = spatial_norm(t, x)?;
    let sc = t.sqrt(c)?;
    let den = t.mul(n, sc)?;
    let num = t.mul_scalar(k, 2.0)?;
    let arg = t.div(num, den)?;
    let arg = t.clamp(arg, 0.0, 1.0 - CLAMP_EPS)?;
    t.asin(arg)
}

/// Exterior angle of `y` with respect to the apex `x`, row by row.
///
/// The `(c<x,y>)^2 - 1` factor is floored at `eps` so near-coincident pairs
/// keep finite gradients.
pub fn exterior_angle(t: &mut Tape, x: Var, y: Var, c: Var) -> Result<Var> {
    let ip = inner(t, x, y)?;
    let cxy = t.mul(ip, c)?;
    let xt = time(t, x)?;
    let yt = time(t, y)?;
    let prod = t.mul(xt, cxy)?;
    let num = t.add(yt, prod)?;
    let sq = t.square(cxy)?;
    let sq = t.add_scalar(sq, -1.0)?;
    let sq = t.clamp(sq, CLAMP_EPS, f64::INFINITY)?;
    let root = t.sqrt(sq)?;
    let xn = spatial_norm(t, x)?;
    let den = t.mul(xn, root)?;
    let ratio = t.div(num, den)?;
    let ratio = t.clamp(ratio, -1.0, 1.0)?;
    t.acos(ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DType};
    use crate::manifold::{self, Curvature, LorentzPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, c: f64) -> Tensor {
        let k = Curvature::new(c).unwrap();
        let mut rows = Vec::new();
        for _ in 0..n {
            let s: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            rows.extend(manifold::lift(&s, k).unwrap().ambient());
        }
        Tensor::new(&[n, d + 1], rows).unwrap()
    }

    #[test]
    fn tape_distance_agrees_with_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_rows(&mut rng, 6, 3, 1.7);
        let y = random_rows(&mut rng, 6, 3, 1.7);
        let mut t = Tape::new(DType::F64);
        let (xv, yv) = (t.leaf(&x).unwrap(), t.leaf(&y).unwrap());
        let c = t.scalar(1.7).unwrap();
        let d = distance(&mut t, xv, yv, c).unwrap();
        let pd = pairwise_distance(&mut t, xv, yv, c).unwrap();
        let k = Curvature::new(1.7).unwrap();
        for i in 0..6 {
            let a = LorentzPoint::from_ambient(x.row(i)).unwrap();
            let b = LorentzPoint::from_ambient(y.row(i)).unwrap();
            let exact = manifold::distance(&a, &b, k).unwrap();
            assert!((t.value(d).data()[i] - exact).abs() < 1e-12);
            assert!((t.value(pd).data()[i * 6 + i] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_cone_quantities_agree_with_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_rows(&mut rng, 8, 4, 0.8);
        let y = random_rows(&mut rng, 8, 4, 0.8);
        let mut t = Tape::new(DType::F64);
        let (xv, yv) = (t.leaf(&x).unwrap(), t.leaf(&y).unwrap());
        let c = t.scalar(0.8).unwrap();
        let k = t.scalar(manifold::CONE_K).unwrap();
        let ap = aperture(&mut t, xv, c, k).unwrap();
        let ext = exterior_angle(&mut t, xv, yv, c).unwrap();
        let curv = Curvature::new(0.8).unwrap();
        for i in 0..8 {
            let a = LorentzPoint::from_ambient(x.row(i)).unwrap();
            let b = LorentzPoint::from_ambient(y.row(i)).unwrap();
            let e_ap = manifold::aperture(&a, curv, manifold::CONE_K);
            let e_ext = manifold::exterior_angle(&a, &b, curv).unwrap();
            assert!((t.value(ap).data()[i] - e_ap).abs() < 1e-12);
            assert!((t.value(ext).data()[i] - e_ext).abs() < 1e-9);
        }
    }

    #[test]
    fn distance_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let c0: f64 = rng.random_range(0.3..3.0);
            let x = random_rows(&mut rng, 2, 3, c0);
            let y = random_rows(&mut rng, 2, 3, c0);
            let err = grad_check(
                |t, v| {
                    let d = distance(t, v[0], v[1], v[2])?;
                    t.sum(d)
                },
                &[x, y, Tensor::scalar(c0)],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "err {err}");
        }
    }

    #[test]
    fn centroid_is_resident_on_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_rows(&mut rng, 5, 3, 2.0);
        let mut t = Tape::new(DType::F64);
        let xv = t.leaf(&x).unwrap();
        let c = t.scalar(2.0).unwrap();
        let mu = centroid(&mut t, xv, c).unwrap();
        let p = LorentzPoint::from_ambient(t.value(mu).data()).unwrap();
        assert!(p.residual(Curvature::new(2.0).unwrap()) < 1e-12);
    }
}
