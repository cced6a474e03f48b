//! Checkpoint directories: a TOML manifest, a little-endian parameter blob and
//! a blob of optimizer moments.
//!
//! Parameters stored in `f32` on the model are written as `f32`; the log-space
//! scalars are written as `f64` so that a reload reproduces them exactly.
//! Moments are always `f64`. Given identical state the output is byte-identical.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, Tensor};
use crate::error::{bail, Error, Result};
use crate::model::Model;
use crate::optim::{Moments, Optimizer};
use crate::params::{ModelParams, ParamGroup};
use crate::train::{RunConfig, TrainState};

pub const FORMAT: &str = "hyperalign-checkpoint/1";
pub const MANIFEST: &str = "checkpoint.toml";
pub const PARAMS_BLOB: &str = "params.bin";
pub const MOMENTS_BLOB: &str = "moments.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub group: ParamGroup,
    pub frozen: bool,
    /// Byte offset into the parameter blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentEntry {
    pub name: String,
    pub steps: u64,
    pub m_len: usize,
    pub v_len: usize,
    /// Byte offset into the moments blob; `m` then `v`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub byte_order: String,
    pub epoch: usize,
    pub config: RunConfig,
    pub params: Vec<ParamEntry>,
    pub moments: Vec<MomentEntry>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

pub fn save(state: &TrainState, dir: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut params = Vec::new();
    for p in state.params.iter() {
        let offset = blob.len();
        match p.value.dtype() {
            DType::F32 => p.value.data().iter().for_each(|v| blob.extend((*v as f32).to_le_bytes())),
            DType::F64 => p.value.data().iter().for_each(|v| blob.extend(v.to_le_bytes())),
        }
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: dtype_name(p.value.dtype()).into(),
            group: p.group,
            frozen: p.frozen,
            offset,
        });
    }
    let mut mblob = Vec::new();
    let mut moments = Vec::new();
    for (name, m) in state.optimizer.state() {
        moments.push(MomentEntry {
            name: name.clone(),
            steps: m.steps,
            m_len: m.m.len(),
            v_len: m.v.len(),
            offset: mblob.len(),
        });
        m.m.iter().chain(&m.v).for_each(|v| mblob.extend(v.to_le_bytes()));
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        byte_order: "little".into(),
        epoch: state.epoch,
        config: state.config.clone(),
        params,
        moments,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), text)?;
    fs::write(dir.join(PARAMS_BLOB), blob)?;
    fs::write(dir.join(MOMENTS_BLOB), mblob)?;
    Ok(())
}

fn read_f32(b: &[u8], at: usize, n: usize) -> Result<Vec<f64>> {
    let bytes = b
        .get(at..at + 4 * n)
        .ok_or_else(|| Error::Format(format!("parameter blob too short for {n} f32 at byte {at}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
        .collect())
}

fn read_f64(b: &[u8], at: usize, n: usize) -> Result<Vec<f64>> {
    let bytes = b
        .get(at..at + 8 * n)
        .ok_or_else(|| Error::Format(format!("blob too short for {n} f64 at byte {at}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn load(dir: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let man: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::Format(e.message().to_string()))?;
    if man.format != FORMAT || man.byte_order != "little" {
        bail!(Format, "unsupported checkpoint format {:?} ({})", man.format, man.byte_order);
    }
    man.config.validate()?;
    let blob = fs::read(dir.join(PARAMS_BLOB))?;
    let mut params = ModelParams::new();
    let mut end = 0;
    for e in &man.params {
        let n = e.shape.iter().product();
        let (data, dtype, size) = match e.dtype.as_str() {
            "f32" => (read_f32(&blob, e.offset, n)?, DType::F32, 4),
            "f64" => (read_f64(&blob, e.offset, n)?, DType::F64, 8),
            other => bail!(Format, "{}: unknown dtype {:?}", e.name, other),
        };
        end = end.max(e.offset + size * n);
        params.insert(&e.name, Tensor::with_dtype(&e.shape, data, dtype)?, e.group)?;
        params.get_mut(&e.name)?.frozen = e.frozen;
    }
    if end != blob.len() {
        bail!(Format, "parameter blob has {} bytes, manifest describes {}", blob.len(), end);
    }
    let model = Model::new(man.config.model.clone())?;
    let expected = model.init(&mut ChaCha8Rng::seed_from_u64(0), 1.0, 1.0)?.shapes();
    if params.shapes() != expected {
        bail!(Format, "checkpoint parameters do not match the configured model");
    }
    let mblob = fs::read(dir.join(MOMENTS_BLOB))?;
    let mut optimizer = Optimizer::new(man.config.optim.clone())?;
    let mut mend = 0;
    for e in &man.moments {
        let all = read_f64(&mblob, e.offset, e.m_len + e.v_len)?;
        mend = mend.max(e.offset + 8 * (e.m_len + e.v_len));
        let (m, v) = all.split_at(e.m_len);
        optimizer.set_state(
            e.name.clone(),
            Moments {
                steps: e.steps,
                m: m.to_vec(),
                v: v.to_vec(),
            },
        );
    }
    if mend != mblob.len() {
        bail!(Format, "moments blob has {} bytes, manifest describes {}", mblob.len(), mend);
    }
    Ok(TrainState {
        config: man.config,
        model,
        params,
        optimizer,
        epoch: man.epoch,
    })
}
