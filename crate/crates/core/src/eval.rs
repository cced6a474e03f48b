//! Multi-label metrics, cross-modal retrieval and geometric diagnostics.
//!
//! Ties are always broken by ascending sample index so every number is
//! reproducible.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::manifold::{self, Curvature, LorentzPoint};
use crate::model::Geometry;

/// Macro-averaged ranking metrics plus the elementwise error rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultilabelMetrics {
    /// `None` when no class has both a positive and a negative sample.
    pub map: Option<f64>,
    pub auc: Option<f64>,
    pub hamming: f64,
    /// Classes that entered the macro averages.
    pub evaluated_classes: usize,
}

/// Average precision of one class; positives are visited in index order.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let n_pos = targets.iter().filter(|t| **t).count();
    if n_pos == 0 || n_pos == targets.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    let mut hits_at = vec![0; scores.len()];
    let mut hits = 0;
    for (r, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
        }
        rank[i] = r + 1;
        hits_at[i] = hits;
    }
    let sum: f64 = (0..scores.len())
        .filter(|&i| targets[i])
        .map(|i| hits_at[i] as f64 / rank[i] as f64)
        .sum();
    Some(sum / n_pos as f64)
}

/// ROC AUC from midranks (ties contribute one half).
pub fn roc_auc(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let n_pos = targets.iter().filter(|t| **t).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let pos_ranks: f64 = (0..scores.len()).filter(|&k| targets[k]).map(|k| ranks[k]).sum();
    let u = pos_ranks - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Metrics for row-major `[n, classes]` scores and 0/1 targets.
pub fn multilabel_metrics(scores: &[f64], targets: &[u8], classes: usize) -> Result<MultilabelMetrics> {
    if classes == 0 || scores.len() != targets.len() || !scores.len().is_multiple_of(classes) || scores.is_empty() {
        bail!(Dimension, "scores ({}) and targets ({}) must both be [n, {}]", scores.len(), targets.len(), classes);
    }
    let n = scores.len() / classes;
    let (mut aps, mut aucs) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let s: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
        let t: Vec<bool> = (0..n).map(|i| targets[i * classes + c] == 1).collect();
        if let (Some(ap), Some(auc)) = (average_precision(&s, &t), roc_auc(&s, &t)) {
            aps.push(ap);
            aucs.push(auc);
        }
    }
    let wrong = scores
        .iter()
        .zip(targets)
        .filter(|(s, t)| (**s > 0.0) != (**t == 1))
        .count();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(MultilabelMetrics {
        map: mean(&aps),
        auc: mean(&aucs),
        hamming: wrong as f64 / scores.len() as f64,
        evaluated_classes: aps.len(),
    })
}

/// Similarity between a query and a candidate row.
fn similarity(a: &[f64], b: &[f64], geometry: Geometry, c: Curvature) -> Result<f64> {
    match geometry {
        Geometry::Lorentz => {
            let (x, y) = (LorentzPoint::from_ambient(a)?, LorentzPoint::from_ambient(b)?);
            Ok(-manifold::distance(&x, &y, c)?)
        }
        Geometry::Euclidean => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            Ok(dot / (na * nb).max(1e-300))
        }
    }
}

/// Top-1 accuracies over matched pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Brain query, image candidates.
    pub image_top1: f64,
    /// Image query, brain candidates.
    pub brain_top1: f64,
    pub pool: usize,
}

/// Top-1 retrieval over row-major pools of equal size; row `i` of one pool is
/// the partner of row `i` of the other. A query counts as a hit only if its
/// partner is strictly more similar than every other candidate.
pub fn retrieval(images: &[f64], brains: &[f64], width: usize, geometry: Geometry, c: f64) -> Result<RetrievalReport> {
    if width == 0 || images.len() != brains.len() || !images.len().is_multiple_of(width) {
        bail!(Dimension, "pools must both be [m, {}]", width);
    }
    let m = images.len() / width;
    if m < 2 {
        bail!(Usage, "retrieval needs at least 2 pairs, got {}", m);
    }
    let c = Curvature::new(c)?;
    let row = |x: &'_ [f64], i: usize| -> Vec<f64> { x[i * width..(i + 1) * width].to_vec() };
    let mut sim = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            sim[i * m + k] = similarity(&row(brains, i), &row(images, k), geometry, c)?;
        }
    }
    let mut brain_to_image = 0;
    let mut image_to_brain = 0;
    for i in 0..m {
        if (0..m).all(|k| k == i || sim[i * m + i] > sim[i * m + k]) {
            brain_to_image += 1;
        }
        if (0..m).all(|k| k == i || sim[i * m + i] > sim[k * m + i]) {
            image_to_brain += 1;
        }
    }
    Ok(RetrievalReport {
        image_top1: brain_to_image as f64 / m as f64,
        brain_top1: image_to_brain as f64 / m as f64,
        pool: m,
    })
}

pub const HISTOGRAM_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusStats {
    pub mean: f64,
    pub median: f64,
    /// Counts over [`GeometryReport::bin_edges`].
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub image: RadiusStats,
    pub brain: RadiusStats,
    /// Shared bin edges spanning the observed radii of both modalities.
    pub bin_edges: Vec<f64>,
    /// Fraction of pairs whose image lies closer to the origin than its brain partner.
    pub image_inner_fraction: f64,
    /// Fraction of pairs whose brain point lies outside the image point's cone.
    pub violation_rate: f64,
    pub image_radii: Vec<f64>,
    pub brain_radii: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn histogram(v: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut h = vec![0; bins];
    for x in v {
        let b = if hi > lo { (((x - lo) / (hi - lo)) * bins as f64) as usize } else { 0 };
        h[b.min(bins - 1)] += 1;
    }
    h
}

/// Whether `y` falls outside the cone at `x`. Coincident pairs and apexes at
/// the origin (whose cone is the whole space) never violate.
pub fn violates(x: &LorentzPoint, y: &LorentzPoint, c: Curvature, k: f64) -> Result<bool> {
    match manifold::exterior_angle(x, y, c) {
        Ok(ext) => Ok(ext > manifold::aperture(x, c, k)),
        Err(Error::Degenerate(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Radius statistics and cone membership for matched Lorentz pools.
pub fn geometry_report(images: &[f64], brains: &[f64], width: usize, c: f64, k: f64) -> Result<GeometryReport> {
    if width < 2 || images.len() != brains.len() || images.is_empty() || !images.len().is_multiple_of(width) {
        bail!(Dimension, "pools must both be non-empty [m, {}]", width);
    }
    let curv = Curvature::new(c)?;
    let pts = |x: &[f64]| -> Result<Vec<LorentzPoint>> { x.chunks(width).map(LorentzPoint::from_ambient).collect() };
    let (ip, bp) = (pts(images)?, pts(brains)?);
    let radii = |p: &[LorentzPoint]| -> Result<Vec<f64>> { p.iter().map(|x| manifold::radius(x, curv)).collect() };
    let (ir, br) = (radii(&ip)?, radii(&bp)?);
    let lo = ir.iter().chain(&br).copied().fold(f64::INFINITY, f64::min);
    let hi = ir.iter().chain(&br).copied().fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|i| lo + (hi - lo) * i as f64 / HISTOGRAM_BINS as f64)
        .collect();
    let m = ip.len();
    let mut violations = 0;
    for (x, y) in ip.iter().zip(&bp) {
        if violates(x, y, curv, k)? {
            violations += 1;
        }
    }
    let stats = |r: &[f64]| RadiusStats {
        mean: r.iter().sum::<f64>() / r.len() as f64,
        median: median(r),
        histogram: histogram(r, &edges),
    };
    Ok(GeometryReport {
        image: stats(&ir),
        brain: stats(&br),
        image_inner_fraction: ir.iter().zip(&br).filter(|(a, b)| a < b).count() as f64 / m as f64,
        violation_rate: violations as f64 / m as f64,
        bin_edges: edges,
        image_radii: ir,
        brain_radii: br,
    })
}

/// Everything reported for one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub multilabel: MultilabelMetrics,
    pub retrieval: RetrievalReport,
    /// Lorentz runs only.
    pub geometry: Option<GeometrySummary>,
    pub per_subject: Vec<SubjectReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub image_radius_mean: f64,
    pub image_radius_median: f64,
    pub brain_radius_mean: f64,
    pub brain_radius_median: f64,
    pub image_inner_fraction: f64,
    pub violation_rate: f64,
}

impl From<&GeometryReport> for GeometrySummary {
    fn from(g: &GeometryReport) -> Self {
        Self {
            image_radius_mean: g.image.mean,
            image_radius_median: g.image.median,
            brain_radius_mean: g.brain.mean,
            brain_radius_median: g.brain.median,
            image_inner_fraction: g.image_inner_fraction,
            violation_rate: g.violation_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject: String,
    pub multilabel: MultilabelMetrics,
    pub retrieval: RetrievalReport,
    pub geometry: Option<GeometrySummary>,
}

impl MetricsReport {
    /// Field means over subjects; `per_subject` keeps the breakdown.
    pub fn average(per_subject: Vec<SubjectReport>) -> Result<Self> {
        if per_subject.is_empty() {
            bail!(Usage, "no subjects to average");
        }
        let n = per_subject.len() as f64;
        let mean = |f: &dyn Fn(&SubjectReport) -> f64| per_subject.iter().map(f).sum::<f64>() / n;
        let opt_mean = |f: &dyn Fn(&SubjectReport) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = per_subject.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / n)
        };
        let multilabel = MultilabelMetrics {
            map: opt_mean(&|s| s.multilabel.map),
            auc: opt_mean(&|s| s.multilabel.auc),
            hamming: mean(&|s| s.multilabel.hamming),
            evaluated_classes: per_subject[0].multilabel.evaluated_classes,
        };
        let retrieval = RetrievalReport {
            image_top1: mean(&|s| s.retrieval.image_top1),
            brain_top1: mean(&|s| s.retrieval.brain_top1),
            pool: per_subject[0].retrieval.pool,
        };
        let geometry = per_subject.iter().all(|s| s.geometry.is_some()).then(|| {
            let g = |f: &dyn Fn(&GeometrySummary) -> f64| mean(&|s| f(s.geometry.as_ref().expect("checked")));
            GeometrySummary {
                image_radius_mean: g(&|x| x.image_radius_mean),
                image_radius_median: g(&|x| x.image_radius_median),
                brain_radius_mean: g(&|x| x.brain_radius_mean),
                brain_radius_median: g(&|x| x.brain_radius_median),
                image_inner_fraction: g(&|x| x.image_inner_fraction),
                violation_rate: g(&|x| x.violation_rate),
            }
        });
        Ok(Self {
            multilabel,
            retrieval,
            geometry,
            per_subject,
        })
    }
}

/// One exported embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub modality: String,
    pub sample: usize,
    pub radius: f64,
    pub coords: Vec<f64>,
}

pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const HISTOGRAM_FILE: &str = "radius_histogram.toml";

/// Rows for an export: images first, then brains, each in sample order.
pub fn embedding_rows(images: &[f64], brains: &[f64], width: usize, c: f64) -> Result<Vec<EmbeddingRow>> {
    let curv = Curvature::new(c)?;
    let mut out = Vec::new();
    for (modality, pool) in [("image", images), ("brain", brains)] {
        for (i, r) in pool.chunks(width).enumerate() {
            let p = LorentzPoint::from_ambient(r)?;
            out.push(EmbeddingRow {
                modality: modality.into(),
                sample: i,
                radius: manifold::radius(&p, curv)?,
                coords: r.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Comma-separated text; floats use shortest round-trip formatting.
pub fn format_embeddings(rows: &[EmbeddingRow]) -> String {
    let width = rows.first().map_or(0, |r| r.coords.len());
    let mut s = String::from("modality,sample,radius");
    for j in 0..width {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.modality, r.sample, r.radius);
        for v in &r.coords {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty embeddings file".into()))?;
    let width = header.split(',').count().saturating_sub(3);
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width + 3 {
                bail!(Format, "expected {} fields, got {}", width + 3, f.len());
            }
            Ok(EmbeddingRow {
                modality: f[0].to_string(),
                sample: f[1].parse().map_err(|e| Error::Format(format!("{:?}: {e}", f[1])))?,
                radius: num(f[2])?,
                coords: f[3..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct HistogramFile<'a> {
    bin_edges: &'a [f64],
    image: &'a [usize],
    brain: &'a [usize],
}

/// Writes the embedding table and the radius histogram under `dir`.
pub fn export_embeddings(dir: &Path, rows: &[EmbeddingRow], report: &GeometryReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(EMBEDDINGS_FILE), format_embeddings(rows))?;
    let h = HistogramFile {
        bin_edges: &report.bin_edges,
        image: &report.image.histogram,
        brain: &report.brain.histogram,
    };
    let text = toml::to_string(&h).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(HISTOGRAM_FILE), text)?;
    Ok(())
}

/// Stable ordering used when ranking: higher score first, then lower index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn hand_example() {
        let s = [0.9, 0.2, 0.8, 0.1];
        let t = [true, false, false, true];
        assert_eq!(average_precision(&s, &t), Some(0.75));
        assert_eq!(roc_auc(&s, &t), Some(0.5));
    }

    #[test]
    fn perfect_and_constant_scores() {
        let scores = [2.0, -1.0, -3.0, 1.5, 0.5, -0.5];
        let targets = [1, 0, 0, 1, 1, 0];
        let m = multilabel_metrics(&scores, &targets, 2).unwrap();
        assert_eq!((m.map, m.auc, m.hamming), (Some(1.0), Some(1.0), 0.0));

        let m = multilabel_metrics(&[0.3; 6], &targets, 2).unwrap();
        assert_eq!(m.auc, Some(0.5));
    }

    #[test]
    fn single_sided_classes_are_skipped() {
        let m = multilabel_metrics(&[1.0, 2.0, 3.0, 4.0], &[1, 0, 1, 1], 2).unwrap();
        assert_eq!(m.evaluated_classes, 1);
        let m = multilabel_metrics(&[1.0, 2.0], &[1, 1], 1).unwrap();
        assert_eq!((m.map, m.auc), (None, None));
        assert!(multilabel_metrics(&[1.0], &[1, 0], 1).is_err());
    }

    #[test]
    fn ties_rank_by_index() {
        // Equal scores: the earlier positive ranks first.
        assert_eq!(average_precision(&[1.0, 1.0], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[1.0, 1.0], &[false, true]), Some(0.5));
        assert_eq!(rank_order(&[1.0, 3.0, 1.0, 3.0]), vec![1, 3, 0, 2]);
    }

    fn lorentz_pool(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<f64> {
        let c = Curvature::new(1.0).unwrap();
        (0..m)
            .flat_map(|_| {
                let s: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                manifold::lift(&s, c).unwrap().ambient()
            })
            .collect()
    }

    #[test]
    fn retrieval_identical_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = lorentz_pool(&mut rng, 20, 4);
        for g in [Geometry::Lorentz, Geometry::Euclidean] {
            let r = retrieval(&pool, &pool, 5, g, 1.0).unwrap();
            assert_eq!((r.image_top1, r.brain_top1), (1.0, 1.0));
        }
        assert!(matches!(retrieval(&pool[..5], &pool[..5], 5, Geometry::Lorentz, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn retrieval_ties_are_misses() {
        let pool = vec![1.0, 0.0, 1.0, 0.0];
        let r = retrieval(&pool, &pool, 2, Geometry::Lorentz, 1.0).unwrap();
        assert_eq!((r.image_top1, r.brain_top1), (0.0, 0.0));
    }

    #[test]
    fn radius_of_known_point() {
        let s = 0.8f64.sinh();
        let x = manifold::lift(&[s, 0.0], Curvature::new(1.0).unwrap()).unwrap().ambient();
        let o = manifold::lift(&[1e-9, 0.0], Curvature::new(1.0).unwrap()).unwrap().ambient();
        let g = geometry_report(&o, &x, 3, 1.0, 0.1).unwrap();
        assert!((g.brain.mean - 0.8).abs() < 1e-12);
        assert!(g.image.mean < 1e-8);
        assert_eq!(g.image_inner_fraction, 1.0);
        assert_eq!(g.image.histogram.len(), HISTOGRAM_BINS);
        assert_eq!(g.image.histogram.iter().sum::<usize>(), 1);
    }

    #[test]
    fn collinear_ahead_pairs_do_not_violate() {
        let c = Curvature::new(1.0).unwrap();
        let ray = |a: f64| manifold::lift(&[0.6 * a.sinh(), 0.8 * a.sinh()], c).unwrap().ambient();
        let images: Vec<f64> = [0.5, 1.0, 1.5].iter().flat_map(|a| ray(*a)).collect();
        let brains: Vec<f64> = [1.0, 2.0, 3.0].iter().flat_map(|a| ray(*a)).collect();
        let g = geometry_report(&images, &brains, 3, 1.0, 0.1).unwrap();
        assert_eq!(g.violation_rate, 0.0);
        let g = geometry_report(&brains, &images, 3, 1.0, 0.1).unwrap();
        assert_eq!(g.violation_rate, 1.0);
    }

    #[test]
    fn export_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let i = lorentz_pool(&mut rng, 6, 3);
        let b = lorentz_pool(&mut rng, 6, 3);
        let rows = embedding_rows(&i, &b, 4, 1.0).unwrap();
        assert_eq!(rows.len(), 12);
        let text = format_embeddings(&rows);
        let back = parse_embeddings(&text).unwrap();
        assert_eq!(back, rows);
        assert_eq!(format_embeddings(&back), text);

        let g = geometry_report(&i, &b, 4, 1.0, 0.1).unwrap();
        for (r, e) in rows.iter().zip(g.image_radii.iter().chain(&g.brain_radii)) {
            assert!((r.radius - e).abs() < 1e-6);
        }
        let dir = tempfile::tempdir().unwrap();
        export_embeddings(dir.path(), &rows, &g).unwrap();
        let text = fs::read_to_string(dir.path().join(EMBEDDINGS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(fs::read_to_string(dir.path().join(HISTOGRAM_FILE)).unwrap().contains("bin_edges"));
    }

    mod properties {
        use proptest::prelude::*;

        use super::super::*;

        fn lift_rows(rows: &[Vec<f64>], c: f64) -> Vec<f64> {
            let c = Curvature::new(c).unwrap();
            rows.iter().flat_map(|r| manifold::lift(r, c).unwrap().ambient()).collect()
        }

        fn pools(m: usize, d: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
            let row = proptest::collection::vec(-2.0..2.0f64, d);
            let pool = proptest::collection::vec(row, m);
            (pool.clone(), pool)
        }

        fn lorentz(a: &[Vec<f64>], b: &[Vec<f64>], c: f64) -> RetrievalReport {
            let w = a[0].len() + 1;
            retrieval(&lift_rows(a, c), &lift_rows(b, c), w, Geometry::Lorentz, c).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn retrieval_ignores_a_shared_pair_permutation((a, b) in pools(6, 3), shift in 1usize..6) {
                let perm = |x: &[Vec<f64>]| -> Vec<Vec<f64>> { (0..x.len()).map(|i| x[(i + shift) % x.len()].clone()).collect() };
                prop_assert_eq!(lorentz(&a, &b, 1.0), lorentz(&perm(&a), &perm(&b), 1.0));
            }

            #[test]
            fn retrieval_ignores_axis_reflections((a, b) in pools(6, 3), flips in proptest::collection::vec(any::<bool>(), 3)) {
                let reflect = |x: &[Vec<f64>]| -> Vec<Vec<f64>> {
                    x.iter().map(|r| r.iter().zip(&flips).map(|(v, f)| if *f { -v } else { *v }).collect()).collect()
                };
                prop_assert_eq!(lorentz(&a, &b, 1.5), lorentz(&reflect(&a), &reflect(&b), 1.5));
            }

            #[test]
            fn cosine_retrieval_ignores_positive_row_scaling((a, b) in pools(6, 4), k in proptest::collection::vec(-8i32..8, 12)) {
                // Powers of two keep every cosine bitwise identical.
                let scaled = |x: &[Vec<f64>], off: usize| -> Vec<f64> {
                    x.iter().enumerate().flat_map(|(i, r)| r.iter().map(|v| v * 2f64.powi(k[off + i])).collect::<Vec<_>>()).collect()
                };
                let base = retrieval(&a.concat(), &b.concat(), 4, Geometry::Euclidean, 1.0).unwrap();
                let moved = retrieval(&scaled(&a, 0), &scaled(&b, 6), 4, Geometry::Euclidean, 1.0).unwrap();
                prop_assert_eq!(base, moved);
            }
        }
    }
}
