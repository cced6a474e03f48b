//! Output-directory plumbing for training runs and the ablation grid.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::layers::EncoderKind;
use crate::train::{self, EpochLog, History, RunConfig, TrainState, SHUFFLE_STREAM};

pub const RUN_MANIFEST: &str = "run.toml";
pub const LOSS_LOG: &str = "loss.tsv";
pub const BCE_LOG: &str = "bce.tsv";
pub const DIAGNOSTICS_LOG: &str = "diagnostics.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS: &str = "metrics.json";

#[derive(Serialize)]
struct RunManifest<'a> {
    shuffle: ShuffleInfo,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct ShuffleInfo {
    generator: &'static str,
    seed: u64,
    stream: u64,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

/// Outcome of [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub history: History,
    pub metrics: MetricsReport,
}

/// Trains and writes the run manifest, per-epoch logs, the final checkpoint
/// and the metrics report under `out`. Log lines are flushed as each epoch
/// finishes, so a diverged run keeps everything up to the failure.
pub fn train_to_dir(config: &RunConfig, ds: &SyntheticDataset, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let manifest = RunManifest {
        shuffle: ShuffleInfo {
            generator: "chacha8",
            seed: config.seed,
            stream: SHUFFLE_STREAM,
        },
        config,
    };
    fs::write(
        out.join(RUN_MANIFEST),
        toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let mut loss = File::create(out.join(LOSS_LOG))?;
    let mut bce = config.classifier.then(|| File::create(out.join(BCE_LOG))).transpose()?;
    let mut diag = None;
    let (state, history) = train::train(config.clone(), ds, |log: &EpochLog, d| {
        writeln!(loss, "{}", log.loss_line())?;
        if let (Some(f), Some(b)) = (bce.as_mut(), log.bce) {
            writeln!(f, "{}\t{}", log.epoch, b)?;
        }
        if let Some(d) = d {
            if diag.is_none() {
                diag = Some(File::create(out.join(DIAGNOSTICS_LOG))?);
            }
            writeln!(diag.as_mut().expect("just opened"), "{}", d.line())?;
        }
        Ok(())
    })?;
    checkpoint::save(&state, &out.join(CHECKPOINT_DIR))?;
    let metrics = train::evaluate(&state, ds)?;
    fs::write(out.join(METRICS), to_json(&metrics)?)?;
    Ok(RunOutcome { state, history, metrics })
}

/// The ablation rows: the full model, an MLP encoder, no cone term and the
/// three fixed curvatures.
pub fn ablation_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut full = base.clone();
    full.model.encoder = EncoderKind::Transformer;
    full.model.fixed_curvature = false;
    if full.loss.lambda == 0.0 {
        full.loss.lambda = crate::losses::LossConfig::default().lambda;
    }
    let mut grid = Vec::new();
    let mut mlp = full.clone();
    mlp.model.encoder = EncoderKind::Mlp;
    grid.push(("mlp_encoder".to_string(), mlp));
    let mut no_ent = full.clone();
    no_ent.loss.lambda = 0.0;
    grid.push(("no_entailment".to_string(), no_ent));
    for c in [1.0, 2.0, 3.0] {
        let mut fixed = full.clone();
        fixed.model.fixed_curvature = true;
        fixed.model.c_mid_init = c;
        grid.push((format!("fixed_c{c}"), fixed));
    }
    grid.push(("full".to_string(), full));
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

pub const ABLATION_TABLE: &str = "ablation.tsv";
pub const ABLATION_COLUMNS: [&str; 9] = [
    "variant",
    "final_loss",
    "map",
    "auc",
    "hamming",
    "image_top1",
    "brain_top1",
    "violation_rate",
    "c_mid",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.4}"))
}

/// Tab-separated comparison table with a header row.
pub fn ablation_table(rows: &[(AblationRow, f64)]) -> String {
    let mut s = ABLATION_COLUMNS.join("\t");
    s.push('\n');
    for (r, c_mid) in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{}\t{:.4}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{:.4}",
            r.name,
            r.final_loss,
            opt(m.multilabel.map),
            opt(m.multilabel.auc),
            m.multilabel.hamming,
            m.retrieval.image_top1,
            m.retrieval.brain_top1,
            opt(m.geometry.map(|g| g.violation_rate)),
            c_mid,
        );
    }
    s
}

/// Runs every grid row into `out/<variant>` and writes the comparison table.
pub fn ablate(base: &RunConfig, ds: &SyntheticDataset, out: &Path) -> Result<String> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_grid(base) {
        let run = train_to_dir(&cfg, ds, &out.join(&name))?;
        let last = run.history.losses.last().expect("epochs >= 1");
        rows.push((
            AblationRow {
                name,
                final_loss: last.total,
                metrics: run.metrics,
            },
            last.c_mid,
        ));
    }
    let table = ablation_table(&rows);
    fs::write(out.join(ABLATION_TABLE), &table)?;
    let reports: Vec<&AblationRow> = rows.iter().map(|(r, _)| r).collect();
    fs::write(out.join("ablation.json"), to_json(&reports)?)?;
    Ok(table)
}
