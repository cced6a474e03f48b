//! Run configuration, the training loop and test-set evaluation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, Tape, Tensor, Var};
use crate::data::{self, DataConfig, Split, SyntheticDataset};
use crate::error::{bail, Error, Result};
use crate::eval::{self, GeometryReport, GeometrySummary, MetricsReport, SubjectReport};
use crate::losses::{self, LossConfig};
use crate::model::{Geometry, Model, ModelConfig, Scalars, C_MID, C_OUT, TAU};
use crate::optim::{OptimConfig, Optimizer};
use crate::params::{Binder, ModelParams};

/// ChaCha stream used for parameter initialization.
pub const INIT_STREAM: u64 = 1;
/// ChaCha stream used for epoch shuffling.
pub const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dataset directory; when absent the dataset is generated from `data` and `seed`.
    pub dataset: Option<PathBuf>,
    /// Output directory; the command line `--out` takes precedence.
    pub out: Option<PathBuf>,
    /// Train the multi-label head alongside the encoders.
    pub classifier: bool,
    /// Record test-set cone and radius statistics after every epoch.
    pub diagnostics: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 50,
            batch_size: 32,
            dataset: None,
            out: None,
            classifier: true,
            diagnostics: true,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be >= 1");
        }
        if self.batch_size < 2 {
            bail!(Config, "batch_size must be >= 2, got {}", self.batch_size);
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.data.validate()?;
        self.check_data(&self.data)
    }

    /// The model must be shaped for the dataset it trains on.
    pub fn check_data(&self, d: &DataConfig) -> Result<()> {
        let m = &self.model;
        for (k, a, b) in [("v", m.v, d.v), ("t", m.t, d.t), ("p", m.p, d.p), ("classes", m.classes, d.classes())] {
            if a != b {
                bail!(Config, "model.{} = {} but the dataset has {}", k, a, b);
            }
        }
        if m.subjects != d.subjects {
            bail!(Config, "model.subjects {:?} differ from dataset subjects {:?}", m.subjects, d.subjects);
        }
        Ok(())
    }

    /// Loads the configured dataset or generates it.
    pub fn dataset(&self) -> Result<SyntheticDataset> {
        let ds = match &self.dataset {
            Some(dir) => data::read(dir)?,
            None => data::generate(&self.data, self.seed)?,
        };
        self.check_data(&ds.config)?;
        Ok(ds)
    }
}

/// Epoch means of the alignment objective plus the scalar values at epoch end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub contrastive: f64,
    /// Zero when the cone term is disabled.
    pub entailment: f64,
    pub tau: f64,
    pub c_mid: f64,
    pub c_out: f64,
    pub bce: Option<f64>,
}

impl EpochLog {
    /// `epoch total contrastive entailment tau c_mid c_out`, tab separated.
    pub fn loss_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.total, self.contrastive, self.entailment, self.tau, self.c_mid, self.c_out
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub violation_rate: f64,
    pub image_radius_mean: f64,
    pub brain_radius_mean: f64,
    pub image_inner_fraction: f64,
}

impl EpochDiagnostics {
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.violation_rate, self.image_radius_mean, self.brain_radius_mean, self.image_inner_fraction
        )
    }
}

/// Model, parameters and optimizer after (or during) a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let params = model.init(&mut rng, config.loss.tau_init, config.loss.tau_floor)?;
        let optimizer = Optimizer::new(config.optim.clone())?;
        Ok(Self {
            config,
            model,
            params,
            optimizer,
            epoch: 0,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub losses: Vec<EpochLog>,
    pub diagnostics: Vec<EpochDiagnostics>,
}

fn rows(data: &[f32], idx: &[usize], width: usize, shape: &[usize]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend(data[i * width..(i + 1) * width].iter().map(|v| f64::from(*v)));
    }
    Tensor::with_dtype(shape, out, DType::F32)
}

/// Batch tensors `(voxels [b, v], images [b, t, p], labels [b, classes])`.
pub fn batch(cfg: &ModelConfig, split: &Split, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
    let b = idx.len();
    let voxels = rows(&split.voxels, idx, cfg.v, &[b, cfg.v])?;
    let images = rows(&split.images, idx, cfg.t * cfg.p, &[b, cfg.t, cfg.p])?;
    let labels: Vec<f64> = idx
        .iter()
        .flat_map(|&i| split.labels[i * cfg.classes..(i + 1) * cfg.classes].iter().map(|v| f64::from(*v)))
        .collect();
    Ok((voxels, images, Tensor::new(&[b, cfg.classes], labels)?))
}

struct StepVars {
    objective: Var,
    total: Var,
    contrastive: Var,
    entailment: Option<Var>,
    bce: Option<Var>,
}

fn alignment(
    model: &Model,
    loss: &LossConfig,
    t: &mut Tape,
    s: &Scalars,
    img: Var,
    brain: Var,
) -> Result<losses::TotalLoss> {
    match model.config.geometry {
        Geometry::Lorentz => losses::total(t, img, brain, s.tau, s.c_mid, loss),
        Geometry::Euclidean => {
            let con = losses::contrastive_cosine(t, img, brain, s.tau, loss.exclude_positive)?;
            Ok(losses::TotalLoss {
                total: con,
                contrastive: con,
                entailment: None,
            })
        }
    }
}

fn record_step(
    state: &TrainState,
    t: &mut Tape,
    p: &mut Binder,
    subject: &str,
    (voxels, images, labels): &(Tensor, Tensor, Tensor),
) -> Result<StepVars> {
    let model = &state.model;
    let s = model.scalars(t, p)?;
    let vx = t.constant(voxels)?;
    let im = t.constant(images)?;
    let brain = model.encode_brain(t, p, &s, subject, vx)?;
    let img = model.encode_image(t, p, &s, im)?;
    let l = alignment(model, &state.config.loss, t, &s, img.pooled, brain.pooled)?;
    if !state.config.classifier {
        return Ok(StepVars {
            objective: l.total,
            total: l.total,
            contrastive: l.contrastive,
            entailment: l.entailment,
            bce: None,
        });
    }
    // The head sees a frozen copy of the brain embedding and of c_mid.
    let pooled = t.detach(brain.pooled)?;
    let frozen = Scalars {
        c_mid: t.detach(s.c_mid)?,
        ..s
    };
    let logits = model.classify(t, p, &frozen, pooled)?;
    let bce = losses::multilabel(t, logits, labels)?;
    Ok(StepVars {
        objective: t.add(l.total, bce)?,
        total: l.total,
        contrastive: l.contrastive,
        entailment: l.entailment,
        bce: Some(bce),
    })
}

/// Batches for one epoch: each subject's training indices are shuffled and
/// cut into batches, then the batch order is shuffled across subjects.
/// A trailing batch with fewer than two samples is dropped.
pub fn epoch_batches(rng: &mut ChaCha8Rng, ds: &SyntheticDataset, batch_size: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (s, split) in ds.train.iter().enumerate() {
        let mut idx: Vec<usize> = (0..split.n).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks(batch_size) {
            if chunk.len() >= 2 {
                out.push((s, chunk.to_vec()));
            }
        }
    }
    out.shuffle(rng);
    out
}

fn item(t: &Tape, v: Var) -> f64 {
    t.value(v).item()
}

/// Runs one epoch and returns its log line. Non-finite values anywhere in
/// the epoch surface as [`Error::Diverged`].
pub fn train_epoch(state: &mut TrainState, ds: &SyntheticDataset, rng: &mut ChaCha8Rng) -> Result<EpochLog> {
    let epoch = state.epoch + 1;
    run_epoch(state, ds, rng, epoch).map_err(|e| match e {
        Error::Numeric(detail) => Error::Diverged { epoch, detail },
        e => e,
    })
}

fn run_epoch(state: &mut TrainState, ds: &SyntheticDataset, rng: &mut ChaCha8Rng, epoch: usize) -> Result<EpochLog> {
    let batches = epoch_batches(rng, ds, state.config.batch_size);
    let (mut total, mut con, mut ent, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (s, idx) in &batches {
        let subject = ds.config.subjects[*s].clone();
        let tensors = batch(&state.model.config, &ds.train[*s], idx)?;
        let mut t = Tape::new(DType::F32);
        let mut p = Binder::new(&state.params);
        let v = record_step(state, &mut t, &mut p, &subject, &tensors)?;
        let objective = item(&t, v.objective);
        if !objective.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("objective {objective} on a {subject} batch"),
            });
        }
        total += item(&t, v.total);
        con += item(&t, v.contrastive);
        ent += v.entailment.map_or(0.0, |e| item(&t, e));
        bce += v.bce.map_or(0.0, |e| item(&t, e));
        let grads = t.backward(v.objective)?;
        let grads = p.gradients(&grads);
        state.optimizer.step(&mut state.params, &grads)?;
    }
    let n = batches.len() as f64;
    state.epoch = epoch;
    let log = EpochLog {
        epoch,
        total: total / n,
        contrastive: con / n,
        entailment: ent / n,
        tau: state.params.scalar_value(TAU)?,
        c_mid: state.params.scalar_value(C_MID)?,
        c_out: state.params.scalar_value(C_OUT)?,
        bce: state.config.classifier.then_some(bce / n),
    };
    for x in [log.total, log.contrastive, log.entailment, log.tau, log.c_mid, log.c_out] {
        if !x.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("non-finite epoch statistic {x}"),
            });
        }
    }
    Ok(log)
}

/// Trains from a fresh state for `config.epochs` epochs. `on_epoch` sees every
/// log line (and diagnostics when enabled) as soon as it is produced.
pub fn train(
    config: RunConfig,
    ds: &SyntheticDataset,
    mut on_epoch: impl FnMut(&EpochLog, Option<&EpochDiagnostics>) -> Result<()>,
) -> Result<(TrainState, History)> {
    config.check_data(&ds.config)?;
    let mut state = TrainState::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut history = History::default();
    for _ in 0..state.config.epochs {
        let log = train_epoch(&mut state, ds, &mut rng)?;
        let diag = if state.config.diagnostics && state.model.config.geometry == Geometry::Lorentz {
            let g = test_geometry(&state, ds)?;
            Some(EpochDiagnostics {
                epoch: log.epoch,
                violation_rate: g.violation_rate,
                image_radius_mean: g.image.mean,
                brain_radius_mean: g.brain.mean,
                image_inner_fraction: g.image_inner_fraction,
            })
        } else {
            None
        };
        on_epoch(&log, diag.as_ref())?;
        history.losses.push(log);
        history.diagnostics.extend(diag);
    }
    Ok((state, history))
}

/// Pooled test embeddings of one subject, row-major, plus classifier logits.
#[derive(Debug, Clone)]
pub struct TestEmbeddings {
    pub width: usize,
    pub images: Vec<f64>,
    pub brains: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Forward pass over a subject's whole test split.
pub fn embed_test(state: &TrainState, ds: &SyntheticDataset, subject: usize) -> Result<TestEmbeddings> {
    let split = &ds.test[subject];
    let idx: Vec<usize> = (0..split.n).collect();
    let (voxels, images, _) = batch(&state.model.config, split, &idx)?;
    let mut t = Tape::new(DType::F32);
    let mut p = Binder::new(&state.params);
    let model = &state.model;
    let s = model.scalars(&mut t, &mut p)?;
    let vx = t.constant(&voxels)?;
    let im = t.constant(&images)?;
    let brain = model.encode_brain(&mut t, &mut p, &s, &ds.config.subjects[subject], vx)?;
    let img = model.encode_image(&mut t, &mut p, &s, im)?;
    let logits = model.classify(&mut t, &mut p, &s, brain.pooled)?;
    let width = *t.shape(brain.pooled).last().expect("pooled rank 2");
    Ok(TestEmbeddings {
        width,
        images: t.value(img.pooled).data().to_vec(),
        brains: t.value(brain.pooled).data().to_vec(),
        logits: t.value(logits).data().to_vec(),
    })
}

/// Cone and radius statistics over the test pairs of every subject.
pub fn test_geometry(state: &TrainState, ds: &SyntheticDataset) -> Result<GeometryReport> {
    let (mut images, mut brains, mut width) = (Vec::new(), Vec::new(), 0);
    for s in 0..ds.config.subjects.len() {
        let e = embed_test(state, ds, s)?;
        images.extend(e.images);
        brains.extend(e.brains);
        width = e.width;
    }
    let c = state.params.scalar_value(C_MID)?;
    eval::geometry_report(&images, &brains, width, c, state.config.loss.k)
}

/// Multi-label, retrieval and geometry metrics on the test split, per subject
/// and averaged.
pub fn evaluate(state: &TrainState, ds: &SyntheticDataset) -> Result<MetricsReport> {
    let geometry = state.model.config.geometry;
    let c = state.params.scalar_value(C_MID)?;
    let classes = state.model.config.classes;
    let mut per_subject = Vec::new();
    for (s, name) in ds.config.subjects.iter().enumerate() {
        let e = embed_test(state, ds, s)?;
        let multilabel = eval::multilabel_metrics(&e.logits, &ds.test[s].labels, classes)?;
        let retrieval = eval::retrieval(&e.images, &e.brains, e.width, geometry, c)?;
        let geo = match geometry {
            Geometry::Lorentz => Some(GeometrySummary::from(&eval::geometry_report(
                &e.images,
                &e.brains,
                e.width,
                c,
                state.config.loss.k,
            )?)),
            Geometry::Euclidean => None,
        };
        per_subject.push(SubjectReport {
            subject: name.clone(),
            multilabel,
            retrieval,
            geometry: geo,
        });
    }
    MetricsReport::average(per_subject)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::TaxonomySpec;
    use crate::layers::EncoderKind;

    pub(crate) fn tiny(geometry: Geometry) -> RunConfig {
        let subjects: Vec<String> = vec!["a".into(), "b".into()];
        let data = DataConfig {
            v: 12,
            t: 3,
            p: 5,
            subjects: subjects.clone(),
            train_per_subject: 10,
            test: 6,
            taxonomy: TaxonomySpec::balanced(&[2, 2], 2),
            ..DataConfig::default()
        };
        RunConfig {
            epochs: 2,
            batch_size: 4,
            model: ModelConfig {
                v: 12,
                t: 3,
                d: 4,
                p: 5,
                heads: 2,
                depth: 1,
                classes: data.classes(),
                geometry,
                encoder: EncoderKind::Transformer,
                subjects,
                ..ModelConfig::default()
            },
            data,
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_are_consistent() {
        RunConfig::default().validate().unwrap();
        let text = RunConfig::default().to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_mismatches_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("epochz = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nwidth = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nv = 64"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("batch_size = 1"), Err(Error::Config(_))));
        let cfg = RunConfig::from_toml("epochs = 3\n[loss]\nlambda = 0.0").unwrap();
        assert_eq!((cfg.epochs, cfg.loss.lambda), (3, 0.0));
    }

    #[test]
    fn batches_cover_each_subject_once() {
        let cfg = tiny(Geometry::Lorentz);
        let ds = data::generate(&cfg.data, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(&mut rng, &ds, 4);
        for s in 0..2 {
            let mut seen: Vec<usize> = b.iter().filter(|(k, _)| *k == s).flat_map(|(_, i)| i.clone()).collect();
            seen.sort();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
        // 10 = 4 + 4 + 2 per subject
        assert_eq!(b.len(), 6);
        let mut again = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(epoch_batches(&mut again, &ds, 4), b);
    }

    #[test]
    fn tiny_runs_are_deterministic() {
        for g in [Geometry::Lorentz, Geometry::Euclidean] {
            let cfg = tiny(g);
            let ds = cfg.dataset().unwrap();
            let (a, ha) = train(cfg.clone(), &ds, |_, _| Ok(())).unwrap();
            let (b, hb) = train(cfg.clone(), &ds, |_, _| Ok(())).unwrap();
            assert_eq!(a.params, b.params);
            let lines = |h: &History| h.losses.iter().map(EpochLog::loss_line).collect::<Vec<_>>();
            assert_eq!(lines(&ha), lines(&hb));
            assert_eq!(ha.losses.len(), 2);
            assert_eq!(ha.diagnostics.len(), if g == Geometry::Lorentz { 2 } else { 0 });
            let report = evaluate(&a, &ds).unwrap();
            assert_eq!(report.per_subject.len(), 2);
            assert_eq!(report.geometry.is_some(), g == Geometry::Lorentz);
        }
    }

    #[test]
    fn fixed_curvature_stays_put() {
        let mut cfg = tiny(Geometry::Lorentz);
        cfg.model.fixed_curvature = true;
        cfg.model.c_mid_init = 3.0;
        let ds = cfg.dataset().unwrap();
        let (_, h) = train(cfg, &ds, |_, _| Ok(())).unwrap();
        assert!((h.losses[0].c_mid - 3.0).abs() < 1e-12);
        assert!(h.losses.iter().all(|l| l.c_mid == h.losses[0].c_mid));
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let mut cfg = tiny(Geometry::Euclidean);
        cfg.optim.lr = 1e30;
        let ds = cfg.dataset().unwrap();
        match train(cfg, &ds, |_, _| Ok(())) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
