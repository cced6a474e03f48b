//! Contrastive, entailment and multi-label objectives, recorded on a tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::manifold::{diff as geo, CONE_K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_init: f64,
    pub tau_floor: f64,
    pub lambda: f64,
    pub k: f64,
    /// Exclude the positive from the contrastive denominator.
    pub exclude_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_init: 0.07,
            tau_floor: 0.01,
            lambda: 0.01,
            k: CONE_K,
            exclude_positive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_floor > 0.0 && self.tau_init >= self.tau_floor) {
            bail!(Config, "tau_init {} must be >= tau_floor {} > 0", self.tau_init, self.tau_floor);
        }
        if !(self.lambda >= 0.0) {
            bail!(Config, "lambda must be >= 0, got {}", self.lambda);
        }
        if !(self.k > 0.0) {
            bail!(Config, "k must be > 0, got {}", self.k);
        }
        Ok(())
    }
}

fn batch_size(t: &Tape, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (t.shape(a), t.shape(b));
    if sa.len() != 2 || sa != sb {
        bail!(Dimension, "expected matching [n, d] batches, got {:?} and {:?}", sa, sb);
    }
    if sa[0] < 2 {
        bail!(Usage, "contrastive loss needs at least 2 pairs, got {}", sa[0]);
    }
    Ok(sa[0])
}

/// Mean over rows of `logsumexp(row) - row[i]`.
fn row_cross_entropy(t: &mut Tape, scores: Var, n: usize, strict: bool) -> Result<Var> {
    let mask = strict.then(|| (0..n * n).map(|k| k / n != k % n).collect());
    let lse = t.logsumexp(scores, mask)?;
    let eye = t.constant(&Tensor::eye(n))?;
    let diag = t.mul(scores, eye)?;
    let diag = t.sum_last(diag)?;
    let per_row = t.sub(lse, diag)?;
    t.mean(per_row)
}

/// Symmetric InfoNCE over an `[n, n]` similarity matrix (rows: first modality).
pub fn contrastive_from_scores(t: &mut Tape, scores: Var, strict: bool) -> Result<Var> {
    let n = t.shape(scores)[0];
    let a = row_cross_entropy(t, scores, n, strict)?;
    let st = t.transpose(scores)?;
    let b = row_cross_entropy(t, st, n, strict)?;
    let s = t.add(a, b)?;
    t.mul_scalar(s, 0.5)
}

/// Hyperbolic contrastive loss with scores `-d(I_i, U_k) / tau`.
pub fn contrastive(t: &mut Tape, img: Var, brain: Var, tau: Var, c: Var, strict: bool) -> Result<Var> {
    batch_size(t, img, brain)?;
    let d = geo::pairwise_distance(t, img, brain, c)?;
    let d = t.neg(d)?;
    let s = t.div(d, tau)?;
    contrastive_from_scores(t, s, strict)
}

fn unit_rows(t: &mut Tape, x: Var) -> Result<Var> {
    let sq = t.square(x)?;
    let n = t.sum_last(sq)?;
    let n = t.clamp(n, 1e-24, f64::INFINITY)?;
    let n = t.sqrt(n)?;
    t.div(x, n)
}

/// Cosine similarity matrix between the rows of `a` and `b`.
pub fn cosine_matrix(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let a = unit_rows(t, a)?;
    let b = unit_rows(t, b)?;
    let bt = t.transpose(b)?;
    t.matmul(a, bt)
}

/// Euclidean-baseline contrastive loss with scores `cos(I_i, U_k) / tau`.
pub fn contrastive_cosine(t: &mut Tape, img: Var, brain: Var, tau: Var, strict: bool) -> Result<Var> {
    batch_size(t, img, brain)?;
    let s = cosine_matrix(t, img, brain)?;
    let s = t.div(s, tau)?;
    contrastive_from_scores(t, s, strict)
}

/// Mean hinge `max(0, ext(I_i, U_i) - aperture(I_i))` over matched pairs.
pub fn entailment(t: &mut Tape, img: Var, brain: Var, c: Var, k: Var) -> Result<Var> {
    let w = *t.shape(img).last().unwrap_or(&0);
    if w < 2 || t.shape(img) != t.shape(brain) {
        bail!(Dimension, "entailment needs matching batches, got {:?} and {:?}", t.shape(img), t.shape(brain));
    }
    if let Some(i) = t.value(img).data().chunks(w).position(|r| r[1..].iter().all(|v| *v == 0.0)) {
        bail!(Degenerate, "entailment apex {} is at the origin", i);
    }
    let ext = geo::exterior_angle(t, img, brain, c)?;
    let ap = geo::aperture(t, img, c, k)?;
    let gap = t.sub(ext, ap)?;
    let h = t.clamp(gap, 0.0, f64::INFINITY)?;
    t.mean(h)
}

/// Terms of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: Var,
    pub contrastive: Var,
    pub entailment: Option<Var>,
}

/// `contrastive + lambda * entailment`; the cone term is skipped when `lambda == 0`.
pub fn total(t: &mut Tape, img: Var, brain: Var, tau: Var, c: Var, cfg: &LossConfig) -> Result<TotalLoss> {
    let con = contrastive(t, img, brain, tau, c, cfg.exclude_positive)?;
    if cfg.lambda == 0.0 {
        return Ok(TotalLoss {
            total: con,
            contrastive: con,
            entailment: None,
        });
    }
    let k = t.scalar(cfg.k)?;
    let ent = entailment(t, img, brain, c, k)?;
    let weighted = t.mul_scalar(ent, cfg.lambda)?;
    Ok(TotalLoss {
        total: t.add(con, weighted)?,
        contrastive: con,
        entailment: Some(ent),
    })
}

/// Mean binary cross-entropy with logits, `softplus(x) - x y`.
pub fn multilabel(t: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    if t.shape(logits) != targets.shape() {
        bail!(Dimension, "logits {:?} vs targets {:?}", t.shape(logits), targets.shape());
    }
    if let Some(v) = targets.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        bail!(Usage, "target {} is not 0 or 1", v);
    }
    let y = t.constant(targets)?;
    let sp = t.softplus(logits)?;
    let xy = t.mul(logits, y)?;
    let l = t.sub(sp, xy)?;
    t.mean(l)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, DType};
    use crate::error::Error;
    use crate::manifold::{self, Curvature};

    fn batch(rows: &[Vec<f64>], c: f64) -> Tensor {
        let k = Curvature::new(c).unwrap();
        let data: Vec<f64> = rows.iter().flat_map(|s| manifold::lift(s, k).unwrap().ambient()).collect();
        Tensor::new(&[rows.len(), rows[0].len() + 1], data).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, c: f64) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        batch(&rows, c)
    }

    fn eval_contrastive(i: &Tensor, u: &Tensor, tau: f64, c: f64, strict: bool) -> Result<f64> {
        let mut t = Tape::new(DType::F64);
        let (iv, uv) = (t.leaf(i)?, t.leaf(u)?);
        let tau = t.scalar(tau)?;
        let c = t.scalar(c)?;
        let l = contrastive(&mut t, iv, uv, tau, c, strict)?;
        Ok(t.value(l).item())
    }

    #[test]
    fn identical_batch_gives_log_n() {
        let x = batch(&vec![vec![0.3, -0.2]; 4], 1.0);
        let l = eval_contrastive(&x, &x, 0.07, 1.0, false).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-9);
        let l = eval_contrastive(&x, &x, 0.07, 1.0, true).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn separated_pairs_drive_loss_to_zero() {
        // Four points pairwise 5 apart or more, matched exactly.
        let s = 5f64.sinh();
        let x = batch(&[vec![s, 0.0], vec![-s, 0.0], vec![0.0, s], vec![0.0, -s]], 1.0);
        let l = eval_contrastive(&x, &x, 0.01, 1.0, false).unwrap();
        assert!(l < 1e-3, "{l}");
    }

    #[test]
    fn contrastive_needs_two_pairs() {
        let x = batch(&[vec![0.1]], 1.0);
        assert!(matches!(eval_contrastive(&x, &x, 0.1, 1.0, false), Err(Error::Usage(_))));
    }

    #[test]
    fn contrastive_is_permutation_invariant_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let i = random_batch(&mut rng, 5, 3, 1.3);
            let u = random_batch(&mut rng, 5, 3, 1.3);
            let perm = [4, 2, 0, 1, 3];
            let p = |x: &Tensor| {
                Tensor::new(x.shape(), perm.iter().flat_map(|&k| x.row(k).to_vec()).collect()).unwrap()
            };
            let a = eval_contrastive(&i, &u, 0.2, 1.3, false).unwrap();
            let b = eval_contrastive(&p(&i), &p(&u), 0.2, 1.3, false).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0);
        }
    }

    fn eval_entailment(i: &Tensor, u: &Tensor, c: f64) -> Result<f64> {
        let mut t = Tape::new(DType::F64);
        let (iv, uv) = (t.leaf(i)?, t.leaf(u)?);
        let c = t.scalar(c)?;
        let k = t.scalar(CONE_K)?;
        let l = entailment(&mut t, iv, uv, c, k)?;
        Ok(t.value(l).item())
    }

    #[test]
    fn entailment_collinear_cases() {
        // Points along a ray: (cosh a, sinh a u) at c = 1.
        let dir = [0.6, 0.8];
        let on_ray = |a: f64| -> Vec<f64> { dir.iter().map(|v| v * a.sinh()).collect() };
        let apex = batch(&[on_ray(1.0), on_ray(0.5)], 1.0);
        let ahead = batch(&[on_ray(2.0), on_ray(3.0)], 1.0);
        assert_eq!(eval_entailment(&apex, &ahead, 1.0).unwrap(), 0.0);

        let apex = batch(&[on_ray(2.0)], 1.0);
        let behind = batch(&[on_ray(0.7)], 1.0);
        let p = manifold::LorentzPoint::from_ambient(apex.row(0)).unwrap();
        let ap = manifold::aperture(&p, Curvature::new(1.0).unwrap(), CONE_K);
        let l = eval_entailment(&apex, &behind, 1.0).unwrap();
        assert!((l - (std::f64::consts::PI - ap)).abs() < 1e-6);
    }

    #[test]
    fn entailment_rejects_origin_apex() {
        let apex = batch(&[vec![0.0, 0.0]], 1.0);
        let y = batch(&[vec![0.5, 0.0]], 1.0);
        assert!(matches!(eval_entailment(&apex, &y, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn entailment_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let i = random_batch(&mut rng, 4, 3, 0.8);
            let u = random_batch(&mut rng, 4, 3, 0.8);
            assert!(eval_entailment(&i, &u, 0.8).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_with_zero_lambda_is_contrastive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let i = random_batch(&mut rng, 4, 3, 1.0);
        let u = random_batch(&mut rng, 4, 3, 1.0);
        let mut t = Tape::new(DType::F64);
        let (iv, uv) = (t.leaf(&i).unwrap(), t.leaf(&u).unwrap());
        let tau = t.scalar(0.1).unwrap();
        let c = t.scalar(1.0).unwrap();
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let l = total(&mut t, iv, uv, tau, c, &cfg).unwrap();
        assert!(l.entailment.is_none());
        assert_eq!(t.value(l.total).item(), t.value(l.contrastive).item());
        assert_eq!(LossConfig::default().lambda, 0.01);
    }

    #[test]
    fn total_passes_grad_check_including_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for strict in [false, true] {
            for _ in 0..10 {
                let c0 = rng.random_range(0.5..2.0);
                let i = random_batch(&mut rng, 4, 3, c0);
                let u = random_batch(&mut rng, 4, 3, c0);
                let cfg = LossConfig { exclude_positive: strict, ..LossConfig::default() };
                let err = grad_check(
                    |t, v| Ok(total(t, v[0], v[1], v[2], v[3], &cfg)?.total),
                    &[i, u, Tensor::scalar(rng.random_range(0.05..0.5)), Tensor::scalar(c0)],
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-4, "err {err}");
            }
        }
    }

    fn eval_bce(logits: Vec<f64>, targets: Vec<f64>, shape: &[usize]) -> Result<f64> {
        let mut t = Tape::new(DType::F64);
        let x = t.leaf(&Tensor::new(shape, logits)?)?;
        let l = multilabel(&mut t, x, &Tensor::new(shape, targets)?)?;
        Ok(t.value(l).item())
    }

    #[test]
    fn bce_examples() {
        let l = eval_bce(vec![0.0; 6], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0], &[2, 3]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = eval_bce(vec![1.0, -1.0], vec![1.0, 0.0], &[1, 2]).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        let l = eval_bce(vec![40.0, -40.0], vec![1.0, 0.0], &[1, 2]).unwrap();
        assert!(l < 1e-16);
        assert!(matches!(eval_bce(vec![0.0], vec![0.5], &[1, 1]), Err(Error::Usage(_))));
        assert!(matches!(eval_bce(vec![0.0, 0.0], vec![0.0], &[2, 1]).map_err(|_| ()), Err(())));
    }

    #[test]
    fn euclidean_contrastive_identical_batch() {
        let x = Tensor::new(&[4, 3], [1.0, 2.0, 3.0].repeat(4)).unwrap();
        let mut t = Tape::new(DType::F64);
        let v = t.leaf(&x).unwrap();
        let tau = t.scalar(0.07).unwrap();
        let l = contrastive_cosine(&mut t, v, v, tau, false).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-9);
    }
}
