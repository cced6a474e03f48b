//! Lorentz layers and their Euclidean twins.
//!
//! Every layer owns parameter *names*, not tensors. `init` registers the
//! tensors in a [`ModelParams`]; the forward passes fetch them through a
//! [`Binder`]. Each layer has a `lorentz` and a `euclidean` forward over the
//! same parameter set, so swapping geometry never changes parameter shapes.
//!
//! Lorentz inputs are tensors whose last axis is `(time, spatial...)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::manifold::diff as geo;
use crate::params::{Binder, ModelParams};


/// Standard deviation of every linear weight at initialisation.
pub const INIT_STD: f64 = 0.02;

/// Raw value whose softplus is 1, used for residual balance weights.
pub const BETA_RAW_INIT: f64 = 0.541_324_854_612_918_1;

/// Affine map on spatial coordinates: `s' = s W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        params.insert_normal(&self.w(), &[self.d_in, self.d_out], INIT_STD, rng)?;
        params.insert_const(&self.b(), &[self.d_out], 0.0)
    }

    /// Like [`Linear::init`] but with a random bias.
    pub fn init_random_bias(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        params.insert_normal(&self.w(), &[self.d_in, self.d_out], INIT_STD, rng)?;
        params.insert_normal(&self.b(), &[self.d_out], INIT_STD, rng)
    }

    pub fn euclidean(&self, t: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let w = p.var(t, &self.w())?;
        let b = p.var(t, &self.b())?;
        let y = t.matmul(x, w)?;
        t.add(y, b)
    }

    /// Lorentz linear layer: transform the spatial part, recompute time at
    /// `c_in`, then move to the manifold of curvature `c_out`.
    pub fn lorentz(&self, t: &mut Tape, p: &mut Binder, x: Var, c_in: Var, c_out: Var) -> Result<Var> {
        let s = geo::spatial(t, x)?;
        if t.shape(s).last() != Some(&self.d_in) {
            bail!(
                Dimension,
                "{}: expected spatial width {}, got {:?}",
                self.name,
                self.d_in,
                t.shape(s)
            );
        }
        let s = self.euclidean(t, p, s)?;
        let y = geo::lift(t, s, c_in)?;
        geo::rescale(t, y, c_in, c_out)
    }
}

const NORM_EPS: f64 = 1e-5;

/// Feature normalisation with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        Self { name: name.into(), d }
    }

    pub fn init(&self, params: &mut ModelParams) -> Result<()> {
        params.insert_const(&format!("{}.g", self.name), &[self.d], 1.0)?;
        params.insert_const(&format!("{}.b", self.name), &[self.d], 0.0)
    }

    pub fn euclidean(&self, t: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let d = self.d as f64;
        let mean = t.sum_last(x)?;
        let mean = t.mul_scalar(mean, 1.0 / d)?;
        let centered = t.sub(x, mean)?;
        let sq = t.square(centered)?;
        let var = t.sum_last(sq)?;
        let var = t.mul_scalar(var, 1.0 / d)?;
        let var = t.add_scalar(var, NORM_EPS)?;
        let sd = t.sqrt(var)?;
        let normed = t.div(centered, sd)?;
        let g = p.var(t, &format!("{}.g", self.name))?;
        let b = p.var(t, &format!("{}.b", self.name))?;
        let y = t.mul(normed, g)?;
        t.add(y, b)
    }

    /// Normalises the spatial part and recomputes time.
    pub fn lorentz(&self, t: &mut Tape, p: &mut Binder, x: Var, c: Var) -> Result<Var> {
        if self.d < 2 {
            bail!(Config, "{}: layer norm needs spatial dimension >= 2", self.name);
        }
        let s = geo::spatial(t, x)?;
        let s = self.euclidean(t, p, s)?;
        geo::lift(t, s, c)
    }
}

/// Multi-head self-attention over tokens on the second-to-last axis.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub d: usize,
    pub heads: usize,
    q: Vec<Linear>,
    k: Vec<Linear>,
    v: Vec<Linear>,
    out: Linear,
}

/// Attention output together with the per-head weight matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, d: usize, heads: usize) -> Result<Self> {
        let name = name.into();
        if heads == 0 || !d.is_multiple_of(heads) {
            bail!(Config, "{}: dimension {} not divisible by {} heads", name, d, heads);
        }
        let dh = d / heads;
        let proj = |kind: &str| -> Vec<Linear> {
            (0..heads)
                .map(|i| Linear::new(format!("{name}.{kind}{i}"), d, dh))
                .collect()
        };
        Ok(Self {
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
            out: Linear::new(format!("{name}.o"), d, d),
            name,
            d,
            heads,
        })
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        for i in 0..self.heads {
            self.q[i].init(params, rng)?;
            self.k[i].init(params, rng)?;
            self.v[i].init(params, rng)?;
        }
        self.out.init(params, rng)
    }

    /// Scaled dot-product attention; heads are concatenated then projected.
    pub fn euclidean(&self, t: &mut Tape, p: &mut Binder, x: Var) -> Result<AttentionOutput> {
        let scale = 1.0 / ((self.d / self.heads) as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = self.q[i].euclidean(t, p, x)?;
            let k = self.k[i].euclidean(t, p, x)?;
            let v = self.v[i].euclidean(t, p, x)?;
            let kt = t.transpose(k)?;
            let scores = t.matmul(q, kt)?;
            let scores = t.mul_scalar(scores, scale)?;
            let a = t.softmax(scores)?;
            heads.push(t.matmul(a, v)?);
            weights.push(a);
        }
        let merged = t.concat(&heads)?;
        let output = self.out.euclidean(t, p, merged)?;
        Ok(AttentionOutput { output, weights })
    }

    /// Lorentz attention: softmax over raw Lorentzian inner products, a
    /// Lorentz-normalised weighted sum of values per head, spatial concat and
    /// re-lift to merge heads, then an output Lorentz linear layer.
    pub fn lorentz(&self, t: &mut Tape, p: &mut Binder, x: Var, c: Var) -> Result<AttentionOutput> {
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = self.q[i].lorentz(t, p, x, c, c)?;
            let k = self.k[i].lorentz(t, p, x, c, c)?;
            let v = self.v[i].lorentz(t, p, x, c, c)?;
            let width = *t.shape(q).last().unwrap();
            let m = geo::metric(t, width)?;
            let qm = t.mul(q, m)?;
            let kt = t.transpose(k)?;
            let scores = t.matmul(qm, kt)?;
            let a = t.softmax(scores)?;
            let mix = t.matmul(a, v)?;
            let mix = geo::normalize(t, mix, c)?;
            heads.push(geo::spatial(t, mix)?);
            weights.push(a);
        }
        let merged = t.concat(&heads)?;
        let merged = geo::lift(t, merged, c)?;
        let output = self.out.lorentz(t, p, merged, c, c)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Softplus-parametrised positive balance weight.
fn beta(t: &mut Tape, p: &mut Binder, name: &str) -> Result<Var> {
    let raw = p.var(t, name)?;
    t.softplus(raw)
}

/// `(x + beta y) / (sqrt(c) sqrt(-<z,z>_L))`.
///
/// Fails with a numeric error if the sum is not time-like.
pub fn lorentz_residual(t: &mut Tape, x: Var, y: Var, beta: Var, c: Var) -> Result<Var> {
    let by = t.mul(y, beta)?;
    let z = t.add(x, by)?;
    let zz = geo::inner(t, z, z)?;
    let neg = t.neg(zz)?;
    let scaled = t.mul(neg, c)?;
    let den = t.sqrt(scaled)?;
    t.div(z, den)
}

pub fn euclidean_residual(t: &mut Tape, x: Var, y: Var, beta: Var) -> Result<Var> {
    let by = t.mul(y, beta)?;
    t.add(x, by)
}

/// Two-layer perceptron with a 4x hidden expansion and GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    fc1: Linear,
    fc2: Linear,
}

pub const MLP_EXPANSION: usize = 4;

impl Mlp {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        let name = name.into();
        Self {
            fc1: Linear::new(format!("{name}.fc1"), d, MLP_EXPANSION * d),
            fc2: Linear::new(format!("{name}.fc2"), MLP_EXPANSION * d, d),
            name,
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init(params, rng)?;
        self.fc2.init(params, rng)
    }

    pub fn euclidean(&self, t: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let h = self.fc1.euclidean(t, p, x)?;
        let h = t.gelu(h)?;
        self.fc2.euclidean(t, p, h)
    }

    pub fn lorentz(&self, t: &mut Tape, p: &mut Binder, x: Var, c: Var) -> Result<Var> {
        let h = self.fc1.lorentz(t, p, x, c, c)?;
        let s = geo::spatial(t, h)?;
        let s = t.gelu(s)?;
        let h = geo::lift(t, s, c)?;
        self.fc2.lorentz(t, p, h, c, c)
    }
}

/// Encoder block family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// norm -> attention -> residual -> norm -> MLP -> residual.
    #[default]
    Transformer,
    /// norm -> MLP -> residual only.
    Mlp,
}

/// One pre-norm encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub name: String,
    pub kind: EncoderKind,
    norm1: LayerNorm,
    attn: Option<MultiHeadAttention>,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(name: impl Into<String>, d: usize, heads: usize, kind: EncoderKind) -> Result<Self> {
        let name = name.into();
        let attn = match kind {
            EncoderKind::Transformer => Some(MultiHeadAttention::new(format!("{name}.attn"), d, heads)?),
            EncoderKind::Mlp => None,
        };
        Ok(Self {
            norm1: LayerNorm::new(format!("{name}.norm1"), d),
            norm2: LayerNorm::new(format!("{name}.norm2"), d),
            mlp: Mlp::new(format!("{name}.mlp"), d),
            attn,
            kind,
            name,
        })
    }

    fn beta1(&self) -> String {
        format!("{}.beta1", self.name)
    }

    fn beta2(&self) -> String {
        format!("{}.beta2", self.name)
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        if let Some(attn) = &self.attn {
            self.norm1.init(params)?;
            attn.init(params, rng)?;
            params.insert_const(&self.beta1(), &[], BETA_RAW_INIT)?;
        }
        self.norm2.init(params)?;
        self.mlp.init(params, rng)?;
        params.insert_const(&self.beta2(), &[], BETA_RAW_INIT)
    }

    pub fn euclidean(&self, t: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let mut x = x;
        if let Some(attn) = &self.attn {
            let n = self.norm1.euclidean(t, p, x)?;
            let a = attn.euclidean(t, p, n)?.output;
            let b = beta(t, p, &self.beta1())?;
            x = euclidean_residual(t, x, a, b)?;
        }
        let n = self.norm2.euclidean(t, p, x)?;
        let m = self.mlp.euclidean(t, p, n)?;
        let b = beta(t, p, &self.beta2())?;
        euclidean_residual(t, x, m, b)
    }

    pub fn lorentz(&self, t: &mut Tape, p: &mut Binder, x: Var, c: Var) -> Result<Var> {
        let mut x = x;
        if let Some(attn) = &self.attn {
            let n = self.norm1.lorentz(t, p, x, c)?;
            let a = attn.lorentz(t, p, n, c)?.output;
            let b = beta(t, p, &self.beta1())?;
            x = lorentz_residual(t, x, a, b, c)?;
        }
        let n = self.norm2.lorentz(t, p, x, c)?;
        let m = self.mlp.lorentz(t, p, n, c)?;
        let b = beta(t, p, &self.beta2())?;
        lorentz_residual(t, x, m, b, c)
    }
}

/// Multi-label head: Lorentz multinomial logistic regression, or a linear
/// layer over the same `[classes, d]` normals and `[classes]` offsets.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub name: String,
    pub d: usize,
    pub classes: usize,
}

impl Classifier {
    pub fn new(name: impl Into<String>, d: usize, classes: usize) -> Self {
        Self {
            name: name.into(),
            d,
            classes,
        }
    }

    fn z(&self) -> String {
        format!("{}.z", self.name)
    }

    fn p(&self) -> String {
        format!("{}.p", self.name)
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        params.insert_normal(&self.z(), &[self.classes, self.d], INIT_STD, rng)?;
        params.insert_const(&self.p(), &[self.classes], 0.0)
    }

    pub fn euclidean(&self, t: &mut Tape, p: &mut Binder, y: Var) -> Result<Var> {
        let z = p.var(t, &self.z())?;
        let off = p.var(t, &self.p())?;
        let zt = t.transpose(z)?;
        let s = t.matmul(y, zt)?;
        t.add(s, off)
    }

    /// Signed hyperbolic distances to learned hyperplanes. Class `k` uses the
    /// space-like normal `w_k = (tanh(p_k) ||z_k||, z_k)`.
    pub fn lorentz(&self, t: &mut Tape, p: &mut Binder, y: Var, c_out: Var) -> Result<Var> {
        let z = p.var(t, &self.z())?;
        let shift = p.var(t, &self.p())?;
        if let Some(k) = t
            .value(z)
            .data()
            .chunks(self.d)
            .position(|row| row.iter().all(|v| *v == 0.0))
        {
            bail!(Degenerate, "{}: class {} has a zero normal", self.name, k);
        }
        let zsq = t.square(z)?;
        let zn = t.sum_last(zsq)?;
        let zn = t.sqrt(zn)?;
        let zn = t.reshape(zn, &[self.classes])?;
        let th = t.tanh(shift)?;
        let w_time = t.mul(th, zn)?;

        let ys = geo::spatial(t, y)?;
        let yt = geo::time(t, y)?;
        let zt = t.transpose(z)?;
        let sp = t.matmul(ys, zt)?;
        let tp = t.mul(yt, w_time)?;
        let alpha = t.sub(sp, tp)?;

        let th2 = t.square(th)?;
        let one = t.scalar(1.0)?;
        let sech2 = t.sub(one, th2)?;
        let sech2 = t.clamp(sech2, f64::MIN_POSITIVE, 1.0)?;
        let sech = t.sqrt(sech2)?;
        let gamma = t.mul(zn, sech)?;
        let sc = t.sqrt(c_out)?;
        let gsc = t.mul(gamma, sc)?;

        let arg = t.div(alpha, gsc)?;
        let ash = t.asinh(arg)?;
        let mag = t.abs(ash)?;
        let sgn = t.sign(alpha)?;
        let scaled = t.mul(mag, gsc)?;
        t.mul(sgn, scaled)
    }
}
