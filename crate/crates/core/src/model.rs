//! Brain and image encoders, pooling and the multi-label head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::layers::{Classifier, EncoderBlock, EncoderKind, Linear};
use crate::manifold::{diff as geo, LEARNABLE_CURVATURE};
use crate::params::{Binder, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    #[default]
    Lorentz,
    Euclidean,
}

impl std::str::FromStr for Geometry {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lorentz" => Ok(Self::Lorentz),
            "euclidean" => Ok(Self::Euclidean),
            _ => Err(format!("unknown geometry {s:?} (expected lorentz or euclidean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Voxels per subject.
    pub v: usize,
    /// Tokens per sample, on both sides.
    pub t: usize,
    /// Spatial dimension of the shared manifold.
    pub d: usize,
    /// Image feature dimension.
    pub p: usize,
    pub heads: usize,
    pub depth: usize,
    pub classes: usize,
    pub geometry: Geometry,
    pub encoder: EncoderKind,
    pub subjects: Vec<String>,
    pub c_mid_init: f64,
    pub c_out_init: f64,
    /// Fix `c_mid` at its initial value instead of learning it.
    pub fixed_curvature: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            v: 512,
            t: 16,
            d: 64,
            p: 96,
            heads: 4,
            depth: 2,
            classes: 12,
            geometry: Geometry::Lorentz,
            encoder: EncoderKind::Transformer,
            subjects: (1..=4).map(|i| format!("subj{i:02}")).collect(),
            c_mid_init: 1.0,
            c_out_init: 2.0,
            fixed_curvature: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("v", self.v), ("t", self.t), ("d", self.d), ("p", self.p), ("heads", self.heads), ("classes", self.classes)] {
            if v == 0 {
                bail!(Config, "{} must be >= 1", k);
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            bail!(Config, "d = {} is not divisible by heads = {}", self.d, self.heads);
        }
        if self.geometry == Geometry::Lorentz && self.depth > 0 && self.d < 2 {
            bail!(Config, "Lorentz encoder blocks need d >= 2");
        }
        if self.subjects.is_empty() {
            bail!(Config, "at least one subject is required");
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.subjects {
            if s.is_empty() || !seen.insert(s) {
                bail!(Config, "subject ids must be unique and non-empty, got {:?}", s);
            }
        }
        let (lo, hi) = LEARNABLE_CURVATURE;
        for (k, c) in [("c_mid_init", self.c_mid_init), ("c_out_init", self.c_out_init)] {
            if !(lo..=hi).contains(&c) {
                bail!(Config, "{} = {} outside [{}, {}]", k, c, lo, hi);
            }
        }
        Ok(())
    }
}

/// Names of the log-space scalars.
pub const C_MID: &str = "c_mid";
pub const C_OUT: &str = "c_out";
pub const TAU: &str = "tau";

/// Curvature of the input manifold; never learned.
pub const C_IN: f64 = 1.0;

/// Scalars bound on a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Scalars {
    pub c_in: Var,
    pub c_mid: Var,
    pub c_out: Var,
    pub tau: Var,
}

/// Pooled embedding plus the token batch it was pooled from.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub pooled: Var,
    pub tokens: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    tokenizers: Vec<Linear>,
    blocks: Vec<EncoderBlock>,
    image: Linear,
    classifier: Classifier,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig { v, t, d, p, .. } = config;
        let tokenizers = config
            .subjects
            .iter()
            .map(|s| Linear::new(format!("tok.{s}"), v, t * d))
            .collect();
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(format!("enc{i}"), d, config.heads, config.encoder))
            .collect::<Result<_>>()?;
        Ok(Self {
            tokenizers,
            blocks,
            image: Linear::new("img", p, d),
            classifier: Classifier::new("cls", d, config.classes),
            config,
        })
    }

    /// Draws a fresh parameter set. Registration order is fixed, so the same
    /// generator state always produces the same parameters.
    pub fn init(&self, rng: &mut impl Rng, tau_init: f64, tau_floor: f64) -> Result<ModelParams> {
        let mut params = ModelParams::new();
        for tok in &self.tokenizers {
            tok.init(&mut params, rng)?;
        }
        for b in &self.blocks {
            b.init(&mut params, rng)?;
        }
        self.image.init_random_bias(&mut params, rng)?;
        let bias = params.get_mut("img.b")?;
        for v in bias.value.data_mut() {
            if *v == 0.0 {
                *v = f64::from(f32::MIN_POSITIVE);
            }
        }
        self.classifier.init(&mut params, rng)?;
        let (lo, hi) = LEARNABLE_CURVATURE;
        params.insert_log_scalar(C_MID, self.config.c_mid_init, lo, hi)?;
        params.insert_log_scalar(C_OUT, self.config.c_out_init, lo, hi)?;
        params.insert_log_scalar(TAU, tau_init, tau_floor, f64::INFINITY)?;
        if self.config.fixed_curvature {
            params.get_mut(C_MID)?.frozen = true;
        }
        Ok(params)
    }

    pub fn scalars(&self, t: &mut Tape, p: &mut Binder) -> Result<Scalars> {
        Ok(Scalars {
            c_in: t.scalar(C_IN)?,
            c_mid: p.var(t, C_MID)?,
            c_out: p.var(t, C_OUT)?,
            tau: p.var(t, TAU)?,
        })
    }

    pub fn subject_index(&self, subject: &str) -> Result<usize> {
        match self.config.subjects.iter().position(|s| s == subject) {
            Some(i) => Ok(i),
            None => bail!(Usage, "unknown subject {:?}", subject),
        }
    }

    /// Encodes a `[batch, v]` voxel matrix. Lorentz pooled points live at `c_mid`.
    pub fn encode_brain(&self, t: &mut Tape, p: &mut Binder, s: &Scalars, subject: &str, voxels: Var) -> Result<Encoded> {
        let tok = &self.tokenizers[self.subject_index(subject)?];
        let ModelConfig { v, t: n_tok, d, .. } = self.config;
        let shape = t.shape(voxels).to_vec();
        if shape.len() != 2 || shape[1] != v {
            bail!(Dimension, "expected voxels [batch, {}], got {:?}", v, shape);
        }
        let b = shape[0];
        // The spatial part of the lifted voxel point is the voxel vector itself.
        let flat = tok.euclidean(t, p, voxels)?;
        let spatial = t.reshape(flat, &[b, n_tok, d])?;
        let mut x = match self.config.geometry {
            Geometry::Lorentz => {
                let x = geo::lift(t, spatial, s.c_in)?;
                geo::rescale(t, x, s.c_in, s.c_mid)?
            }
            Geometry::Euclidean => spatial,
        };
        for block in &self.blocks {
            x = match self.config.geometry {
                Geometry::Lorentz => block.lorentz(t, p, x, s.c_mid)?,
                Geometry::Euclidean => block.euclidean(t, p, x)?,
            };
        }
        let pooled = self.pool(t, x, s)?;
        Ok(Encoded { pooled, tokens: x })
    }

    /// Encodes `[batch, t, p]` image features.
    pub fn encode_image(&self, t: &mut Tape, p: &mut Binder, s: &Scalars, features: Var) -> Result<Encoded> {
        let shape = t.shape(features).to_vec();
        if shape.len() != 3 || shape[1] != self.config.t || shape[2] != self.config.p {
            bail!(Dimension, "expected image features [batch, {}, {}], got {:?}", self.config.t, self.config.p, shape);
        }
        let tokens = match self.config.geometry {
            Geometry::Lorentz => {
                let x = geo::lift(t, features, s.c_in)?;
                self.image.lorentz(t, p, x, s.c_in, s.c_mid)?
            }
            Geometry::Euclidean => self.image.euclidean(t, p, features)?,
        };
        let pooled = self.pool(t, tokens, s)?;
        Ok(Encoded { pooled, tokens })
    }

    fn pool(&self, t: &mut Tape, x: Var, s: &Scalars) -> Result<Var> {
        match self.config.geometry {
            Geometry::Lorentz => geo::centroid(t, x, s.c_mid),
            Geometry::Euclidean => {
                let n = self.config.t as f64;
                let shape = t.shape(x).to_vec();
                let r = shape.len();
                let sum = t.sum_axis(x, r - 2)?;
                let mut out = shape;
                out.remove(r - 2);
                let sum = t.reshape(sum, &out)?;
                t.mul_scalar(sum, 1.0 / n)
            }
        }
    }

    /// Per-class logits for pooled embeddings at `c_mid`.
    pub fn classify(&self, t: &mut Tape, p: &mut Binder, s: &Scalars, pooled: Var) -> Result<Var> {
        match self.config.geometry {
            Geometry::Lorentz => {
                let y = geo::rescale(t, pooled, s.c_mid, s.c_out)?;
                self.classifier.lorentz(t, p, y, s.c_out)
            }
            Geometry::Euclidean => self.classifier.euclidean(t, p, pooled),
        }
    }
}
