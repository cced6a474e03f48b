//! Synthetic multi-subject stimulus/response data and its on-disk format.
//!
//! A concept taxonomy drives both modalities. Image features are noisy means
//! of leaf prototypes, which themselves inherit from their ancestors; voxel
//! responses are a subject-specific linear mixing of per-node activations.
//!
//! On disk a dataset is a directory holding `manifest.toml` and one raw
//! little-endian file per array (`f32` for real arrays, `u8` for labels).

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub name: String,
    pub parent: Option<usize>,
}

/// Concept tree stored parent-first; leaves are labelled in storage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySpec {
    pub concepts: Vec<Concept>,
    /// Maximum number of active leaves per sample.
    pub max_labels: usize,
}

impl Default for TaxonomySpec {
    /// Root, 2 superclasses, 6 classes, 12 leaves; up to 3 labels per sample.
    fn default() -> Self {
        Self::balanced(&[2, 3, 2], 3)
    }
}

impl TaxonomySpec {
    /// Tree where every node at depth `i` has `fanout[i]` children.
    pub fn balanced(fanout: &[usize], max_labels: usize) -> Self {
        let mut concepts = vec![Concept { name: "root".into(), parent: None }];
        let mut level = vec![0];
        for (depth, &k) in fanout.iter().enumerate() {
            let mut next = Vec::new();
            for &p in &level {
                for j in 0..k {
                    next.push(concepts.len());
                    let name = format!("{}.{}", if p == 0 { format!("n{depth}") } else { concepts[p].name.clone() }, j);
                    concepts.push(Concept { name, parent: Some(p) });
                }
            }
            level = next;
        }
        Self { concepts, max_labels }
    }

    pub fn validate(&self) -> Result<()> {
        let roots = self.concepts.iter().filter(|c| c.parent.is_none()).count();
        if roots != 1 || self.concepts.first().is_none_or(|c| c.parent.is_some()) {
            bail!(Config, "taxonomy needs exactly one root, stored first");
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if let Some(p) = c.parent {
                // Parent-first storage rules out cycles.
                if p >= i {
                    bail!(Config, "concept {} ({}) has parent {} stored after it", i, c.name, p);
                }
            }
        }
        let leaves = self.leaves().len();
        if self.max_labels == 0 || self.max_labels > leaves {
            bail!(Config, "max_labels = {} must be in 1..={}", self.max_labels, leaves);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Node indices of the leaves, in label order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.concepts.len()];
        for c in &self.concepts {
            if let Some(p) = c.parent {
                has_child[p] = true;
            }
        }
        (0..self.concepts.len()).filter(|&i| !has_child[i]).collect()
    }

    /// Node indices from `node` up to the root, inclusive.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut cur = node;
        while let Some(p) = self.concepts[cur].parent {
            out.push(p);
            cur = p;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub v: usize,
    pub t: usize,
    pub p: usize,
    pub subjects: Vec<String>,
    pub train_per_subject: usize,
    pub test: usize,
    /// Voxel noise standard deviation.
    pub sigma: f64,
    /// Image feature noise standard deviation.
    pub feature_noise: f64,
    pub taxonomy: TaxonomySpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            v: 512,
            t: 16,
            p: 96,
            subjects: (1..=4).map(|i| format!("subj{i:02}")).collect(),
            train_per_subject: 200,
            test: 50,
            sigma: 0.1,
            feature_noise: 0.1,
            taxonomy: TaxonomySpec::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        if self.v == 0 || self.t == 0 || self.p == 0 {
            bail!(Config, "v, t and p must be >= 1");
        }
        if self.subjects.is_empty() {
            bail!(Config, "at least one subject is required");
        }
        if !(self.sigma >= 0.0 && self.feature_noise >= 0.0) {
            bail!(Config, "noise levels must be >= 0");
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.taxonomy.leaves().len()
    }
}

/// Samples for one subject (or the shared test stimuli).
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub n: usize,
    /// `[n, v]`
    pub voxels: Vec<f32>,
    /// `[n, t, p]`
    pub images: Vec<f32>,
    /// `[n, classes]`, entries 0 or 1.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: DataConfig,
    pub seed: u64,
    /// Training samples per subject, in `config.subjects` order.
    pub train: Vec<Split>,
    /// Test samples per subject; images and labels are identical across subjects.
    pub test: Vec<Split>,
}

impl SyntheticDataset {
    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    pub fn subject_index(&self, subject: &str) -> Result<usize> {
        match self.config.subjects.iter().position(|s| s == subject) {
            Some(i) => Ok(i),
            None => bail!(Usage, "unknown subject {:?}", subject),
        }
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

/// Draws a dataset; identical seeds give bitwise-identical datasets.
pub fn generate(config: &DataConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tax = &config.taxonomy;
    let nodes = tax.len();
    let leaves = tax.leaves();
    let width = config.t * config.p;

    // Node prototypes: each node adds an independent offset to its parent.
    let unit = normal(1.0);
    let mut protos = vec![vec![0.0; width]; nodes];
    for i in 1..nodes {
        let parent = tax.concepts[i].parent.expect("non-root has a parent");
        let base = protos[parent].clone();
        protos[i] = base.iter().map(|b| b + unit.sample(&mut rng)).collect();
    }

    // Subject mixing matrices from node activations to voxels.
    let mix_std = normal(1.0 / (nodes as f64).sqrt());
    let mixing: Vec<Vec<f64>> = config
        .subjects
        .iter()
        .map(|_| (0..config.v * nodes).map(|_| mix_std.sample(&mut rng)).collect())
        .collect();

    let draw_stimuli = |rng: &mut ChaCha8Rng, n: usize| -> (Vec<Vec<usize>>, Vec<f32>, Vec<u8>) {
        let feat_noise = normal(config.feature_noise);
        let mut active_sets = Vec::with_capacity(n);
        let mut images = Vec::with_capacity(n * width);
        let mut labels = vec![0u8; n * leaves.len()];
        for i in 0..n {
            let k = rng.random_range(1..=tax.max_labels);
            let mut active: Vec<usize> = sample(rng, leaves.len(), k).into_vec();
            active.sort_unstable();
            for &a in &active {
                labels[i * leaves.len() + a] = 1;
            }
            for j in 0..width {
                let mean = active.iter().map(|&a| protos[leaves[a]][j]).sum::<f64>() / k as f64;
                images.push((mean + feat_noise.sample(rng)) as f32);
            }
            active_sets.push(active);
        }
        (active_sets, images, labels)
    };

    let respond = |rng: &mut ChaCha8Rng, s: usize, active: &[Vec<usize>]| -> Vec<f32> {
        let noise = normal(config.sigma);
        let mut out = Vec::with_capacity(active.len() * config.v);
        for set in active {
            let mut act = vec![0.0; nodes];
            for &a in set {
                for anc in tax.ancestors(leaves[a]) {
                    act[anc] += 1.0;
                }
            }
            for r in 0..config.v {
                let row = &mixing[s][r * nodes..(r + 1) * nodes];
                let y: f64 = row.iter().zip(&act).map(|(m, a)| m * a).sum();
                out.push((y + noise.sample(rng)) as f32);
            }
        }
        out
    };

    let mut train = Vec::with_capacity(config.subjects.len());
    for s in 0..config.subjects.len() {
        let (active, images, labels) = draw_stimuli(&mut rng, config.train_per_subject);
        let voxels = respond(&mut rng, s, &active);
        train.push(Split {
            n: config.train_per_subject,
            voxels,
            images,
            labels,
        });
    }
    let (active, images, labels) = draw_stimuli(&mut rng, config.test);
    let mut test = Vec::with_capacity(config.subjects.len());
    for s in 0..config.subjects.len() {
        test.push(Split {
            n: config.test,
            voxels: respond(&mut rng, s, &active),
            images: images.clone(),
            labels: labels.clone(),
        });
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        train,
        test,
    })
}

const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "hyperalign-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayDtype {
    F32,
    U8,
}

impl ArrayDtype {
    fn size(&self) -> usize {
        match self {
            Self::F32 => 4,
            Self::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub dtype: ArrayDtype,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub byte_order: String,
    pub seed: u64,
    pub config: DataConfig,
    pub arrays: Vec<ArrayEntry>,
}

fn array_names(config: &DataConfig) -> Vec<(String, ArrayDtype, Vec<usize>)> {
    let (v, t, p, c) = (config.v, config.t, config.p, config.classes());
    let (n, m) = (config.train_per_subject, config.test);
    let mut out = Vec::new();
    for s in &config.subjects {
        out.push((format!("{s}.train.voxels"), ArrayDtype::F32, vec![n, v]));
        out.push((format!("{s}.train.images"), ArrayDtype::F32, vec![n, t, p]));
        out.push((format!("{s}.train.labels"), ArrayDtype::U8, vec![n, c]));
        out.push((format!("{s}.test.voxels"), ArrayDtype::F32, vec![m, v]));
    }
    out.push(("test.images".into(), ArrayDtype::F32, vec![m, t, p]));
    out.push(("test.labels".into(), ArrayDtype::U8, vec![m, c]));
    out
}

fn f32_bytes(x: &[f32]) -> Vec<u8> {
    x.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `ds` under `dir`, creating it if needed.
pub fn write(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    for (name, dtype, shape) in array_names(&ds.config) {
        let bytes = match name.split('.').collect::<Vec<_>>().as_slice() {
            ["test", "images"] => f32_bytes(&ds.test[0].images),
            ["test", "labels"] => ds.test[0].labels.clone(),
            [subj, split, kind] => {
                let i = ds.subject_index(subj)?;
                let s = if *split == "train" { &ds.train[i] } else { &ds.test[i] };
                match *kind {
                    "voxels" => f32_bytes(&s.voxels),
                    "images" => f32_bytes(&s.images),
                    _ => s.labels.clone(),
                }
            }
            _ => unreachable!("array names have two or three parts"),
        };
        let file = format!("{name}.{}", if dtype == ArrayDtype::F32 { "f32" } else { "u8" });
        fs::write(dir.join(&file), bytes)?;
        arrays.push(ArrayEntry { name, file, dtype, shape });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        byte_order: "little".into(),
        seed: ds.seed,
        config: ds.config.clone(),
        arrays,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

enum Raw {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// Reads a dataset directory. Any disagreement between the manifest and the
/// array files is a format error; nothing partial is returned.
pub fn read(dir: &Path) -> Result<SyntheticDataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST}: {e}")))?;
    if manifest.format != FORMAT || manifest.byte_order != "little" {
        bail!(Format, "unsupported format {:?} / byte order {:?}", manifest.format, manifest.byte_order);
    }
    let config = manifest.config;
    config.validate().map_err(|e| Error::Format(e.to_string()))?;

    let mut arrays = std::collections::HashMap::new();
    for entry in &manifest.arrays {
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
            bail!(Format, "array file {:?} must be a plain name", entry.file);
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        let expect = entry.shape.iter().product::<usize>() * entry.dtype.size();
        if bytes.len() != expect {
            bail!(Format, "{}: {} bytes, expected {} for shape {:?}", entry.file, bytes.len(), expect, entry.shape);
        }
        let raw = match entry.dtype {
            ArrayDtype::F32 => {
                let v: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                if v.iter().any(|x| !x.is_finite()) {
                    bail!(Format, "{}: non-finite value", entry.file);
                }
                Raw::F32(v)
            }
            ArrayDtype::U8 => {
                if bytes.iter().any(|b| *b > 1) {
                    bail!(Format, "{}: labels must be 0 or 1", entry.file);
                }
                Raw::U8(bytes)
            }
        };
        if arrays.insert(entry.name.clone(), (entry.dtype.clone(), entry.shape.clone(), raw)).is_some() {
            bail!(Format, "array {} listed twice", entry.name);
        }
    }

    let mut take = |name: &str, dtype: &ArrayDtype, shape: &[usize]| -> Result<Raw> {
        match arrays.remove(name) {
            Some((d, s, raw)) if &d == dtype && s == shape => Ok(raw),
            Some((d, s, _)) => bail!(Format, "{}: {:?} {:?}, expected {:?} {:?}", name, d, s, dtype, shape),
            None => bail!(Format, "array {} missing from manifest", name),
        }
    };
    let mut found = std::collections::HashMap::new();
    for (name, dtype, shape) in array_names(&config) {
        let raw = take(&name, &dtype, &shape)?;
        found.insert(name, raw);
    }
    let mut f = |name: String| -> Vec<f32> {
        match found.remove(&name) {
            Some(Raw::F32(v)) => v,
            _ => unreachable!("dtype checked above"),
        }
    };
    let test_images = f("test.images".into());
    let mut train = Vec::new();
    let mut test_vox = Vec::new();
    for s in &config.subjects {
        let voxels = f(format!("{s}.train.voxels"));
        let images = f(format!("{s}.train.images"));
        train.push((voxels, images));
        test_vox.push(f(format!("{s}.test.voxels")));
    }
    let mut u = |name: String| -> Vec<u8> {
        match found.remove(&name) {
            Some(Raw::U8(v)) => v,
            _ => unreachable!("dtype checked above"),
        }
    };
    let test_labels = u("test.labels".into());
    let train_labels: Vec<Vec<u8>> = config.subjects.iter().map(|s| u(format!("{s}.train.labels"))).collect();

    let train = train
        .into_iter()
        .zip(train_labels)
        .map(|((voxels, images), labels)| Split {
            n: config.train_per_subject,
            voxels,
            images,
            labels,
        })
        .collect();
    let test = test_vox
        .into_iter()
        .map(|voxels| Split {
            n: config.test,
            voxels,
            images: test_images.clone(),
            labels: test_labels.clone(),
        })
        .collect();
    Ok(SyntheticDataset {
        config,
        seed: manifest.seed,
        train,
        test,
    })
}
