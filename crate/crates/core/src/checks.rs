//! Randomized numerical self-checks: manifold residency of layer chains and
//! finite-difference gradient checks of every layer and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, DType, Tape, Tensor, Var};
use crate::error::Result;
use crate::layers::{self, Classifier, EncoderBlock, EncoderKind, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::losses::{self, LossConfig};
use crate::manifold::{diff as geo, Curvature, LorentzPoint};
use crate::model::{Geometry, Model, ModelConfig};
use crate::params::{Binder, ModelParams, ParamGroup};

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const F32_RESIDENCY_TOL: f64 = 1e-5;
pub const F64_RESIDENCY_TOL: f64 = 1e-10;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

fn curvature(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.3..3.0)
}

/// Lorentz points `[shape.., d + 1]` at curvature `c`.
fn points(rng: &mut ChaCha8Rng, shape: &[usize], d: usize, c: f64, scale: f64) -> Tensor {
    let k = Curvature::new(c).expect("positive");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * (d + 1));
    for _ in 0..n {
        let s: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        data.extend(crate::manifold::lift(&s, k).expect("finite").ambient());
    }
    let mut full = shape.to_vec();
    full.push(d + 1);
    Tensor::new(&full, data).expect("shape matches")
}

/// Adds uniform noise to every Euclidean weight so checks see generic maps.
fn perturb(params: &mut ModelParams, rng: &mut ChaCha8Rng, scale: f64) {
    for p in params.iter_mut() {
        if p.group == ParamGroup::Euclidean {
            for v in p.value.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
        p.value = p.value.to_dtype(DType::F64);
    }
}

/// Runs a grad check over every parameter in `params` plus `extra` inputs.
/// `f` receives a binder over the parameter vars and the extra vars.
fn check<F>(params: &ModelParams, extra: Vec<Tensor>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &mut Binder, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut inputs: Vec<Tensor> = params.iter().map(|p| p.effective().to_dtype(DType::F64)).collect();
    let n = inputs.len();
    inputs.extend(extra);
    grad_check(
        |t, v| {
            let mut b = Binder::from_vars(names.iter().cloned().zip(v[..n].iter().copied()).collect());
            f(t, &mut b, &v[n..])
        },
        &inputs,
        GRAD_EPS,
    )
}

/// `sum(x * r)` for a fixed random `r`, so every output coordinate matters.
fn project(t: &mut Tape, x: Var, r: &Tensor) -> Result<Var> {
    let r = t.leaf(r)?;
    let y = t.mul(x, r)?;
    t.sum(y)
}

const D: usize = 4;
const TOKENS: usize = 3;
const BATCH: usize = 2;

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

fn lorentz_linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let lin = Linear::new("l", D, 3);
    let mut p = ModelParams::new();
    lin.init(&mut p, rng)?;
    perturb(&mut p, rng, 0.5);
    let (c_in, c_out) = (curvature(rng), curvature(rng));
    let r = uniform(rng, &[BATCH, 4], 1.0);
    let x = points(rng, &[BATCH], D, c_in, 1.0);
    check(&p, vec![x, Tensor::scalar(c_in), Tensor::scalar(c_out)], |t, b, v| {
        let y = lin.lorentz(t, b, v[0], v[1], v[2])?;
        project(t, y, &r)
    })
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let ln = LayerNorm::new("n", D);
    let mut p = ModelParams::new();
    ln.init(&mut p)?;
    perturb(&mut p, rng, 0.5);
    let c = curvature(rng);
    let r = uniform(rng, &[BATCH, D + 1], 1.0);
    let x = points(rng, &[BATCH], D, c, 1.5);
    check(&p, vec![x, Tensor::scalar(c)], |t, b, v| {
        let y = ln.lorentz(t, b, v[0], v[1])?;
        project(t, y, &r)
    })
}

fn attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let heads = if rng.random_bool(0.5) { 1 } else { 2 };
    let a = MultiHeadAttention::new("a", D, heads)?;
    let mut p = ModelParams::new();
    a.init(&mut p, rng)?;
    perturb(&mut p, rng, 0.5);
    let c = curvature(rng);
    let r = uniform(rng, &[BATCH, TOKENS, D + 1], 1.0);
    let x = points(rng, &[BATCH, TOKENS], D, c, 1.0);
    check(&p, vec![x, Tensor::scalar(c)], |t, b, v| {
        let y = a.lorentz(t, b, v[0], v[1])?.output;
        project(t, y, &r)
    })
}

fn residual(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = curvature(rng);
    let r = uniform(rng, &[BATCH, D + 1], 1.0);
    let x = points(rng, &[BATCH], D, c, 1.0);
    let y = points(rng, &[BATCH], D, c, 1.0);
    let raw = Tensor::scalar(rng.random_range(-1.0..1.0));
    check(&ModelParams::new(), vec![x, y, raw, Tensor::scalar(c)], |t, _, v| {
        let beta = t.softplus(v[2])?;
        let z = layers::lorentz_residual(t, v[0], v[1], beta, v[3])?;
        project(t, z, &r)
    })
}

fn mlp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = Mlp::new("m", D);
    let mut p = ModelParams::new();
    m.init(&mut p, rng)?;
    perturb(&mut p, rng, 0.3);
    let c = curvature(rng);
    let r = uniform(rng, &[BATCH, D + 1], 1.0);
    let x = points(rng, &[BATCH], D, c, 1.0);
    check(&p, vec![x, Tensor::scalar(c)], |t, b, v| {
        let y = m.lorentz(t, b, v[0], v[1])?;
        project(t, y, &r)
    })
}

fn block(kind: EncoderKind, rng: &mut ChaCha8Rng) -> Result<f64> {
    let blk = EncoderBlock::new("e", D, 2, kind)?;
    let mut p = ModelParams::new();
    blk.init(&mut p, rng)?;
    perturb(&mut p, rng, 0.3);
    let c = curvature(rng);
    let r = uniform(rng, &[BATCH, TOKENS, D + 1], 1.0);
    let x = points(rng, &[BATCH, TOKENS], D, c, 1.0);
    check(&p, vec![x, Tensor::scalar(c)], |t, b, v| {
        let y = blk.lorentz(t, b, v[0], v[1])?;
        project(t, y, &r)
    })
}

fn transformer_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    block(EncoderKind::Transformer, rng)
}

fn mlp_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    block(EncoderKind::Mlp, rng)
}

fn euclidean_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    let blk = EncoderBlock::new("e", D, 2, EncoderKind::Transformer)?;
    let cls = Classifier::new("cls", D, 3);
    let mut p = ModelParams::new();
    blk.init(&mut p, rng)?;
    cls.init(&mut p, rng)?;
    perturb(&mut p, rng, 0.3);
    let r = uniform(rng, &[BATCH, TOKENS, 3], 1.0);
    let x = uniform(rng, &[BATCH, TOKENS, D], 1.0);
    check(&p, vec![x], |t, b, v| {
        let y = blk.euclidean(t, b, v[0])?;
        let l = cls.euclidean(t, b, y)?;
        project(t, l, &r)
    })
}

fn centroid_rescale(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, c2) = (curvature(rng), curvature(rng));
    let r = uniform(rng, &[BATCH, D + 1], 1.0);
    let x = points(rng, &[BATCH, TOKENS], D, c, 1.0);
    check(&ModelParams::new(), vec![x, Tensor::scalar(c), Tensor::scalar(c2)], |t, _, v| {
        let m = geo::centroid(t, v[0], v[1])?;
        let y = geo::rescale(t, m, v[1], v[2])?;
        project(t, y, &r)
    })
}

fn mlr(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cls = Classifier::new("cls", D, 3);
    let mut p = ModelParams::new();
    cls.init(&mut p, rng)?;
    perturb(&mut p, rng, 0.8);
    let c = curvature(rng);
    let r = uniform(rng, &[BATCH, 3], 1.0);
    let y = points(rng, &[BATCH], D, c, 1.5);
    check(&p, vec![y, Tensor::scalar(c)], |t, b, v| {
        let l = cls.lorentz(t, b, v[0], v[1])?;
        project(t, l, &r)
    })
}

fn pair_batch(rng: &mut ChaCha8Rng, c: f64) -> (Tensor, Tensor) {
    let n = rng.random_range(2..5);
    (points(rng, &[n], D, c, 1.0), points(rng, &[n], D, c, 1.0))
}

fn contrastive(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = curvature(rng);
    let (i, u) = pair_batch(rng, c);
    let tau = Tensor::scalar(rng.random_range(0.2..2.0));
    let strict = rng.random_bool(0.5);
    check(&ModelParams::new(), vec![i, u, tau, Tensor::scalar(c)], |t, _, v| {
        losses::contrastive(t, v[0], v[1], v[2], v[3], strict)
    })
}

fn contrastive_cosine(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(2..5);
    let (i, u) = (uniform(rng, &[n, D], 1.0), uniform(rng, &[n, D], 1.0));
    let tau = Tensor::scalar(rng.random_range(0.2..2.0));
    let strict = rng.random_bool(0.5);
    check(&ModelParams::new(), vec![i, u, tau], |t, _, v| {
        losses::contrastive_cosine(t, v[0], v[1], v[2], strict)
    })
}

fn entailment(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = curvature(rng);
    let (i, u) = pair_batch(rng, c);
    let k = Tensor::scalar(rng.random_range(0.05..0.5));
    check(&ModelParams::new(), vec![i, u, Tensor::scalar(c), k], |t, _, v| {
        losses::entailment(t, v[0], v[1], v[2], v[3])
    })
}

fn total(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = curvature(rng);
    let (i, u) = pair_batch(rng, c);
    let tau = Tensor::scalar(rng.random_range(0.2..2.0));
    let cfg = LossConfig {
        lambda: rng.random_range(0.01..1.0),
        exclude_positive: rng.random_bool(0.5),
        ..LossConfig::default()
    };
    check(&ModelParams::new(), vec![i, u, tau, Tensor::scalar(c)], |t, _, v| {
        Ok(losses::total(t, v[0], v[1], v[2], v[3], &cfg)?.total)
    })
}

fn bce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let logits = uniform(rng, &[BATCH, 3], 3.0);
    let y = Tensor::new(&[BATCH, 3], (0..BATCH * 3).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect())?;
    check(&ModelParams::new(), vec![logits], |t, _, v| losses::multilabel(t, v[0], &y))
}

fn model(geometry: Geometry, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = ModelConfig {
        v: 4,
        t: 2,
        d: 4,
        p: 3,
        heads: 2,
        depth: 1,
        classes: 2,
        geometry,
        subjects: vec!["s".into()],
        c_mid_init: rng.random_range(0.5..3.0),
        c_out_init: rng.random_range(0.5..3.0),
        ..ModelConfig::default()
    };
    let m = Model::new(cfg)?;
    let tau = rng.random_range(0.1..1.0);
    let mut p = m.init(rng, tau, 0.01)?;
    perturb(&mut p, rng, 0.5);
    let voxels = uniform(rng, &[2, 4], 1.0);
    let images = uniform(rng, &[2, 2, 3], 1.0);
    let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    check(&p, vec![voxels, images], |t, b, v| {
        let s = m.scalars(t, b)?;
        let u = m.encode_brain(t, b, &s, "s", v[0])?;
        let i = m.encode_image(t, b, &s, v[1])?;
        let align = match geometry {
            Geometry::Lorentz => losses::total(t, i.pooled, u.pooled, s.tau, s.c_mid, &LossConfig::default())?.total,
            Geometry::Euclidean => losses::contrastive_cosine(t, i.pooled, u.pooled, s.tau, false)?,
        };
        let logits = m.classify(t, b, &s, u.pooled)?;
        let ce = losses::multilabel(t, logits, &y)?;
        t.add(align, ce)
    })
}

fn lorentz_model(rng: &mut ChaCha8Rng) -> Result<f64> {
    model(Geometry::Lorentz, rng)
}

fn euclidean_model(rng: &mut ChaCha8Rng) -> Result<f64> {
    model(Geometry::Euclidean, rng)
}

/// Every registered check, by name.
pub const GRADIENT_CHECKS: &[(&str, CheckFn)] = &[
    ("lorentz_linear", lorentz_linear),
    ("layer_norm", layer_norm),
    ("attention", attention),
    ("residual", residual),
    ("mlp", mlp),
    ("transformer_block", transformer_block),
    ("mlp_block", mlp_block),
    ("euclidean_block", euclidean_block),
    ("centroid_rescale", centroid_rescale),
    ("mlr", mlr),
    ("contrastive", contrastive),
    ("contrastive_cosine", contrastive_cosine),
    ("entailment", entailment),
    ("total_loss", total),
    ("bce", bce),
    ("lorentz_model", lorentz_model),
    ("euclidean_model", euclidean_model),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub configs: usize,
    pub max_error: f64,
}

/// Runs each registered check on `configs` random configurations.
pub fn gradient_suite(configs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    GRADIENT_CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..configs {
                worst = worst.max(f(&mut rng)?);
            }
            Ok(CheckResult {
                name: name.to_string(),
                configs,
                max_error: worst,
            })
        })
        .collect()
}

/// Worst `|c <x,x>_L + 1|` seen per precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidencyReport {
    pub chains: usize,
    pub f32_max: f64,
    pub f64_max: f64,
}

fn max_residual(x: &Tensor, c: f64) -> Result<f64> {
    let w = *x.shape().last().expect("rank >= 1");
    let k = Curvature::new(c)?;
    x.data()
        .chunks(w)
        .map(|r| Ok(LorentzPoint::from_ambient(r)?.residual(k)))
        .try_fold(0.0f64, |m, r: Result<f64>| Ok(m.max(r?)))
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Linear,
    Norm,
    Attention,
    Residual,
    Mlp,
    Rescale,
}

/// One random chain: lift, 2-6 random steps, optionally a centroid.
/// Returns the worst residual over every intermediate output.
pub fn residency_chain(rng: &mut ChaCha8Rng, dtype: DType) -> Result<f64> {
    const STEPS: [Step; 6] = [Step::Linear, Step::Norm, Step::Attention, Step::Residual, Step::Mlp, Step::Rescale];
    let mut t = Tape::new(dtype);
    let mut params = ModelParams::new();
    let mut c = curvature(rng);
    let spatial = uniform(rng, &[BATCH, TOKENS, D], 2.0);
    let s = t.leaf(&spatial)?;
    let cv = t.scalar(c)?;
    let mut x = geo::lift(&mut t, s, cv)?;
    let mut cv = cv;
    let mut worst = max_residual(t.value(x), c)?;
    let n = rng.random_range(2..=6);
    for i in 0..n {
        let step = STEPS[rng.random_range(0..STEPS.len())];
        let name = format!("s{i}");
        let mut new_c = c;
        match step {
            Step::Linear => {
                let lin = Linear::new(&name, D, D);
                lin.init(&mut params, rng)?;
                new_c = curvature(rng);
            }
            Step::Norm => LayerNorm::new(&name, D).init(&mut params)?,
            Step::Attention => MultiHeadAttention::new(&name, D, 2)?.init(&mut params, rng)?,
            Step::Mlp => Mlp::new(&name, D).init(&mut params, rng)?,
            Step::Rescale => new_c = curvature(rng),
            Step::Residual => {}
        }
        perturb(&mut params, rng, 0.3);
        let residual_y = matches!(step, Step::Residual).then(|| points(rng, &[BATCH, TOKENS], D, c, 1.0));
        let beta = rng.random_range(0.1..2.0);
        let mut b = Binder::new(&params);
        let next_cv = t.scalar(new_c)?;
        x = match step {
            Step::Linear => Linear::new(&name, D, D).lorentz(&mut t, &mut b, x, cv, next_cv)?,
            Step::Norm => LayerNorm::new(&name, D).lorentz(&mut t, &mut b, x, cv)?,
            Step::Attention => MultiHeadAttention::new(&name, D, 2)?.lorentz(&mut t, &mut b, x, cv)?.output,
            Step::Mlp => Mlp::new(&name, D).lorentz(&mut t, &mut b, x, cv)?,
            Step::Rescale => geo::rescale(&mut t, x, cv, next_cv)?,
            Step::Residual => {
                let y = t.leaf(&residual_y.expect("drawn above"))?;
                let beta = t.scalar(beta)?;
                layers::lorentz_residual(&mut t, x, y, beta, cv)?
            }
        };
        c = new_c;
        cv = next_cv;
        worst = worst.max(max_residual(t.value(x), c)?);
    }
    if rng.random_bool(0.5) {
        x = geo::centroid(&mut t, x, cv)?;
        worst = worst.max(max_residual(t.value(x), c)?);
    }
    Ok(worst)
}

/// Runs `chains` random chains in each precision.
pub fn residency_suite(chains: usize, seed: u64) -> Result<ResidencyReport> {
    let mut report = ResidencyReport {
        chains,
        f32_max: 0.0,
        f64_max: 0.0,
    };
    for (dtype, stream) in [(DType::F32, 0), (DType::F64, 1)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        for _ in 0..chains {
            let r = residency_chain(&mut rng, dtype)?;
            match dtype {
                DType::F32 => report.f32_max = report.f32_max.max(r),
                DType::F64 => report.f64_max = report.f64_max.max(r),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_gradient_suite() {
        for r in gradient_suite(3, 1).unwrap() {
            assert!(r.max_error < GRAD_TOL, "{} {}", r.name, r.max_error);
        }
    }

    #[test]
    fn short_residency_suite() {
        let r = residency_suite(200, 1).unwrap();
        assert!(r.f32_max <= F32_RESIDENCY_TOL, "{r:?}");
        assert!(r.f64_max <= F64_RESIDENCY_TOL, "{r:?}");
    }
}

