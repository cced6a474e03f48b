//! Hybrid optimizer: AdamW for Euclidean weights, Riemannian Adam for
//! manifold-valued rows, and Adam in log space for clamped scalars.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, Tensor};
use crate::error::{bail, Result};
use crate::manifold::{self, Curvature, LorentzPoint, RESIDENCY_TOL};
use crate::params::{log_scalar_store, log_scalar_value, ModelParams, Param, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be >= 0, got {}", self.weight_decay);
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bail!(Config, "{} must be in [0, 1), got {}", k, b);
            }
        }
        if !(self.eps > 0.0) {
            bail!(Config, "eps must be positive, got {}", self.eps);
        }
        Ok(())
    }
}

/// Adam moments for one parameter.
///
/// For manifold parameters `m` holds one ambient tangent vector per row and
/// `v` one scalar per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    state: HashMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: HashMap::new(),
        })
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// State entries sorted by name.
    pub fn state(&self) -> Vec<(&String, &Moments)> {
        let mut v: Vec<_> = self.state.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn set_state(&mut self, name: String, moments: Moments) {
        self.state.insert(name, moments);
    }

    /// Applies one update to every unfrozen parameter that has a gradient.
    /// Gradients for log scalars are taken with respect to the effective value.
    pub fn step(&mut self, params: &mut ModelParams, grads: &HashMap<String, Tensor>) -> Result<()> {
        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.value.shape() {
                bail!(Dimension, "{}: gradient {:?} for parameter {:?}", p.name, g.shape(), p.value.shape());
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                steps: 0,
                m: vec![0.0; p.value.numel()],
                v: Vec::new(),
            });
            match p.group {
                ParamGroup::Euclidean => adamw(&self.config, p, g.data(), st)?,
                ParamGroup::LogScalar { lo, hi } => scalar(&self.config, p, g.item(), lo, hi, st)?,
                ParamGroup::Manifold { c } => riemannian(&self.config, p, g.data(), c, st)?,
            }
        }
        Ok(())
    }
}

fn check_len(p: &Param, st: &Moments, v_len: usize) -> Result<()> {
    if st.m.len() != p.value.numel() || st.v.len() != v_len {
        bail!(Dimension, "{}: optimizer state does not match parameter shape", p.name);
    }
    Ok(())
}

fn adamw(cfg: &OptimConfig, p: &mut Param, g: &[f64], st: &mut Moments) -> Result<()> {
    if st.v.is_empty() {
        st.v = vec![0.0; g.len()];
    }
    check_len(p, st, g.len())?;
    st.steps += 1;
    let bc1 = 1.0 - cfg.beta1.powi(st.steps as i32);
    let bc2 = 1.0 - cfg.beta2.powi(st.steps as i32);
    let dtype = p.value.dtype();
    for (i, x) in p.value.data_mut().iter_mut().enumerate() {
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = st.m[i] / bc1;
        let vhat = st.v[i] / bc2;
        let decayed = *x * (1.0 - cfg.lr * cfg.weight_decay);
        *x = dtype.round(decayed - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
    }
    Ok(())
}

/// Adam on `log v` with `d/d(log v) = v d/dv`, no weight decay, then clamp.
fn scalar(cfg: &OptimConfig, p: &mut Param, g: f64, lo: f64, hi: f64, st: &mut Moments) -> Result<()> {
    if st.v.is_empty() {
        st.v = vec![0.0];
    }
    check_len(p, st, 1)?;
    st.steps += 1;
    let stored = p.value.item();
    let g = g * log_scalar_value(stored, lo, hi);
    st.m[0] = cfg.beta1 * st.m[0] + (1.0 - cfg.beta1) * g;
    st.v[0] = cfg.beta2 * st.v[0] + (1.0 - cfg.beta2) * g * g;
    let mhat = st.m[0] / (1.0 - cfg.beta1.powi(st.steps as i32));
    let vhat = st.v[0] / (1.0 - cfg.beta2.powi(st.steps as i32));
    let next = stored - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    let next = if next <= lo.ln() || next >= hi.ln() {
        log_scalar_store(next.exp(), lo, hi)
    } else {
        next
    };
    p.value = Tensor::scalar(next);
    Ok(())
}

fn riemannian(cfg: &OptimConfig, p: &mut Param, g: &[f64], c: f64, st: &mut Moments) -> Result<()> {
    let shape = p.value.shape().to_vec();
    if shape.len() != 2 {
        bail!(Dimension, "{}: manifold parameters are [rows, d+1], got {:?}", p.name, shape);
    }
    let (rows, w) = (shape[0], shape[1]);
    if st.v.is_empty() {
        st.v = vec![0.0; rows];
    }
    check_len(p, st, rows)?;
    let curv = Curvature::new(c)?;
    st.steps += 1;
    let bc1 = 1.0 - cfg.beta1.powi(st.steps as i32);
    let bc2 = 1.0 - cfg.beta2.powi(st.steps as i32);
    let dtype = p.value.dtype();
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        let x = LorentzPoint::from_ambient(p.value.row(r))?;
        let drift = x.residual(curv);
        let tol = match dtype {
            DType::F32 => 1e-5,
            DType::F64 => RESIDENCY_TOL,
        };
        if drift > tol {
            bail!(State, "{}: row {} is off the manifold (residual {:e})", p.name, r, drift);
        }
        let gr = &g[r * w..(r + 1) * w];
        // Metric-raised gradient, then tangent projection.
        let mut raised = gr.to_vec();
        raised[0] = -raised[0];
        let u = manifold::project_tangent(&x, &raised, curv)?;
        let m = &mut st.m[r * w..(r + 1) * w];
        for (mi, ui) in m.iter_mut().zip(&u.components) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * ui;
        }
        let uu = manifold::lorentz_inner(&u.components, &u.components)?.max(0.0);
        st.v[r] = cfg.beta2 * st.v[r] + (1.0 - cfg.beta2) * uu;
        let denom = (st.v[r] / bc2).sqrt() + cfg.eps;
        let dir: Vec<f64> = m.iter().map(|mi| -cfg.lr * mi / bc1 / denom).collect();
        let dir = manifold::project_tangent(&x, &dir, curv)?;
        let y = manifold::exp_map(&x, &dir, curv)?;
        let mt = manifold::project_tangent(&x, m, curv)?;
        let moved = manifold::transport(&x, &y, &mt, curv)?;
        m.copy_from_slice(&moved.components);
        let mut amb = y.ambient();
        dtype.round_slice(&mut amb);
        // Re-project after rounding.
        let y = manifold::lift(&amb[1..], curv)?;
        out.extend(y.ambient());
    }
    p.value = Tensor::with_dtype(&shape, out, dtype)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;

    fn one_param(value: Tensor, group: ParamGroup) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", value, group).unwrap();
        p
    }

    fn grads(g: Tensor) -> HashMap<String, Tensor> {
        HashMap::from([("w".to_string(), g)])
    }

    fn f64_vec(v: Vec<f64>) -> Tensor {
        Tensor::vector(v).to_dtype(DType::F64)
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut p = one_param(f64_vec(vec![1.0, -2.0]), ParamGroup::Euclidean);
        for _ in 0..10 {
            opt.step(&mut p, &grads(f64_vec(vec![0.0, 0.0]))).unwrap();
        }
        assert_eq!(p.get("w").unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let cfg = OptimConfig { weight_decay: 0.0, lr: 0.01, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut p = one_param(f64_vec(vec![0.5, 0.5]), ParamGroup::Euclidean);
        opt.step(&mut p, &grads(f64_vec(vec![3.0, -0.2]))).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let d = p.get("w").unwrap().value.data();
        assert!((d[0] - (0.5 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((d[1] - (0.5 + 0.01 * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        let mut p = one_param(f64_vec(vec![2.0]), ParamGroup::Euclidean);
        for _ in 0..5 {
            opt.step(&mut p, &grads(f64_vec(vec![0.0]))).unwrap();
        }
        let expect = 2.0 * (1.0 - 2e-4 * 0.1f64).powi(5);
        assert!((p.get("w").unwrap().value.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn gradient_shape_mismatch_is_rejected() {
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        let mut p = one_param(f64_vec(vec![2.0]), ParamGroup::Euclidean);
        let r = opt.step(&mut p, &grads(f64_vec(vec![0.0, 1.0])));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        let mut p = one_param(f64_vec(vec![2.0]), ParamGroup::Euclidean);
        p.get_mut("w").unwrap().frozen = true;
        opt.step(&mut p, &grads(f64_vec(vec![5.0]))).unwrap();
        assert_eq!(p.get("w").unwrap().value.item(), 2.0);
    }

    fn log_param(name: &str, init: f64, lo: f64, hi: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert_log_scalar(name, init, lo, hi).unwrap();
        p
    }

    #[test]
    fn scalars_clamp_exactly_at_bounds() {
        let cfg = OptimConfig { lr: 0.5, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut p = log_param("tau", 0.07, 0.01, f64::INFINITY);
        let mut q = log_param("c", 2.0, 0.1, 10.0);
        for _ in 0..50 {
            let g = HashMap::from([("tau".to_string(), Tensor::scalar(1.0))]);
            opt.step(&mut p, &g).unwrap();
            let g = HashMap::from([("c".to_string(), Tensor::scalar(-1.0))]);
            opt.step(&mut q, &g).unwrap();
            assert!(p.scalar_value("tau").unwrap() >= 0.01);
            assert!(q.scalar_value("c").unwrap() <= 10.0);
        }
        assert_eq!(p.scalar_value("tau").unwrap(), 0.01);
        assert_eq!(q.scalar_value("c").unwrap(), 10.0);

        // A reversed gradient moves the scalar back inside its range.
        let g = HashMap::from([("tau".to_string(), Tensor::scalar(-1.0))]);
        for _ in 0..200 {
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.scalar_value("tau").unwrap() > 0.01);
    }

    #[test]
    fn scalar_zero_gradient_is_noop() {
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        let mut p = log_param("tau", 0.07, 0.01, f64::INFINITY);
        let before = p.get("tau").unwrap().value.item();
        let g = HashMap::from([("tau".to_string(), Tensor::scalar(0.0))]);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get("tau").unwrap().value.item(), before);
        assert!((p.scalar_value("tau").unwrap() - 0.07).abs() < 1e-16);
    }

    fn manifold_param(rng: &mut ChaCha8Rng, rows: usize, d: usize, c: f64, dtype: DType) -> ModelParams {
        let k = Curvature::new(c).unwrap();
        let data: Vec<f64> = (0..rows)
            .flat_map(|_| {
                let s: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                manifold::lift(&s, k).unwrap().ambient()
            })
            .collect();
        // Round, then re-lift so the starting point is resident in `dtype`.
        let data: Vec<f64> = data
            .chunks(d + 1)
            .flat_map(|r| {
                let s: Vec<f64> = r[1..].iter().map(|v| dtype.round(*v)).collect();
                manifold::lift(&s, k).unwrap().ambient()
            })
            .collect();
        one_param(Tensor::with_dtype(&[rows, d + 1], data, DType::F64).unwrap(), ParamGroup::Manifold { c })
    }

    #[test]
    fn riemannian_zero_gradient_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = manifold_param(&mut rng, 3, 4, 1.5, DType::F64);
        let before = p.get("w").unwrap().value.clone();
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        opt.step(&mut p, &grads(Tensor::zeros(&[3, 5]))).unwrap();
        for (a, b) in p.get("w").unwrap().value.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn riemannian_steps_stay_resident() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = manifold_param(&mut rng, 4, 3, 0.7, DType::F64);
        let cfg = OptimConfig { lr: 0.05, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        let k = Curvature::new(0.7).unwrap();
        for _ in 0..1000 {
            let g = Tensor::new(&[4, 4], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            opt.step(&mut p, &grads(g)).unwrap();
            for r in p.get("w").unwrap().value.data().chunks(4) {
                assert!(LorentzPoint::from_ambient(r).unwrap().residual(k) < 1e-6);
            }
        }
    }

    #[test]
    fn riemannian_rejects_off_manifold_rows() {
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        let mut p = one_param(Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap(), ParamGroup::Manifold { c: 1.0 });
        let r = opt.step(&mut p, &grads(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap()));
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn riemannian_adam_minimises_squared_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 1.0;
        let k = Curvature::new(c).unwrap();
        let target = manifold::lift(&[0.8, -0.4, 0.3], k).unwrap();
        let mut p = manifold_param(&mut rng, 1, 3, c, DType::F64);
        let cfg = OptimConfig { lr: 0.05, weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        for _ in 0..500 {
            let x = LorentzPoint::from_ambient(p.get("w").unwrap().value.data()).unwrap();
            // Ambient gradient of d^2 = -2 log_x(target) lowered by the metric.
            let lg = manifold::log_map(&x, &target, k).unwrap();
            let mut g: Vec<f64> = lg.components.iter().map(|v| -2.0 * v).collect();
            g[0] = -g[0];
            opt.step(&mut p, &grads(Tensor::new(&[1, 4], g).unwrap())).unwrap();
        }
        let x = LorentzPoint::from_ambient(p.get("w").unwrap().value.data()).unwrap();
        let d = manifold::distance(&x, &target, k).unwrap();
        assert!(d < 1e-3, "d = {d}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = OptimConfig { lr: 0.0, ..OptimConfig::default() };
        assert!(matches!(Optimizer::new(cfg), Err(Error::Config(_))));
    }
}
