use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hyperalign::checks::{self, GRAD_EPS, GRAD_TOL};
use hyperalign::data::{self, SyntheticDataset};
use hyperalign::error::{Error, Result};
use hyperalign::layers::EncoderKind;
use hyperalign::model::{Geometry, C_MID};
use hyperalign::train::{self, RunConfig, TrainState};
use hyperalign::{checkpoint, eval, run};

/// Hyperbolic brain/image alignment: data synthesis, training and diagnostics.
#[derive(Parser)]
#[command(name = "hyperalign", version)]
struct Cli {
    /// Directory that receives every output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train and write a checkpoint, loss logs and a metrics report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(CheckpointArgs),
    /// Top-1 retrieval for a checkpoint.
    Retrieve(CheckpointArgs),
    /// Write pooled test embeddings and radius histograms.
    Export(CheckpointArgs),
    /// Finite-difference gradient checks and residency chains.
    Gradcheck(GradArgs),
    /// Train every ablation variant and write a comparison table.
    Ablate(TrainArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML run config; only the seed and [data] section are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// lorentz or euclidean.
    #[arg(long)]
    geometry: Option<Geometry>,
    /// transformer or mlp.
    #[arg(long, value_parser = parse_encoder)]
    encoder: Option<EncoderKind>,
    /// Drop the entailment-cone term.
    #[arg(long)]
    no_entailment: bool,
    /// Hold the encoder curvature fixed at this value.
    #[arg(long)]
    fixed_curvature: Option<f64>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    /// Random configurations per registered check.
    #[arg(long, default_value_t = 100)]
    configs: usize,
    /// Random layer chains per precision.
    #[arg(long, default_value_t = 1000)]
    chains: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_encoder(s: &str) -> std::result::Result<EncoderKind, String> {
    match s {
        "transformer" => Ok(EncoderKind::Transformer),
        "mlp" => Ok(EncoderKind::Mlp),
        _ => Err(format!("unknown encoder {s:?} (expected transformer or mlp)")),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(d) = &self.data {
            cfg.dataset = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(g) = self.geometry {
            cfg.model.geometry = g;
        }
        if let Some(e) = self.encoder {
            cfg.model.encoder = e;
        }
        if self.no_entailment {
            cfg.loss.lambda = 0.0;
        }
        if let Some(c) = self.fixed_curvature {
            cfg.model.fixed_curvature = true;
            cfg.model.c_mid_init = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cli_out: &Option<PathBuf>, cfg: Option<&RunConfig>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn open_checkpoint(args: &CheckpointArgs) -> Result<(TrainState, SyntheticDataset)> {
    let state = checkpoint::load(&args.checkpoint)?;
    let ds = match &args.data {
        Some(d) => data::read(d)?,
        None => state.config.dataset()?,
    };
    state.config.check_data(&ds.config)?;
    Ok((state, ds))
}

fn write_report(out: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), text)?;
    println!("{text}");
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let out = out_dir(&cli.out, Some(&cfg));
            let ds = data::generate(&cfg.data, cfg.seed)?;
            data::write(&ds, &out)?;
            println!("{}", json!({"dataset": out, "seed": cfg.seed}));
        }
        Command::Train(a) => {
            let cfg = a.resolve()?;
            let out = out_dir(&cli.out, Some(&cfg));
            let ds = cfg.dataset()?;
            let r = run::train_to_dir(&cfg, &ds, &out)?;
            println!("{}", run::to_json(&r.metrics)?);
        }
        Command::Ablate(a) => {
            let cfg = a.resolve()?;
            let out = out_dir(&cli.out, Some(&cfg));
            let ds = cfg.dataset()?;
            print!("{}", run::ablate(&cfg, &ds, &out)?);
        }
        Command::Eval(a) => {
            let (state, ds) = open_checkpoint(&a)?;
            let report = train::evaluate(&state, &ds)?;
            write_report(&out_dir(&cli.out, None), run::METRICS, &run::to_json(&report)?)?;
        }
        Command::Retrieve(a) => {
            let (state, ds) = open_checkpoint(&a)?;
            let report = train::evaluate(&state, &ds)?;
            let per: Vec<_> = report
                .per_subject
                .iter()
                .map(|s| json!({"subject": s.subject, "retrieval": s.retrieval}))
                .collect();
            let text = run::to_json(&json!({"retrieval": report.retrieval, "per_subject": per}))?;
            write_report(&out_dir(&cli.out, None), "retrieval.json", &text)?;
        }
        Command::Export(a) => {
            let (state, ds) = open_checkpoint(&a)?;
            if state.model.config.geometry != Geometry::Lorentz {
                return Err(Error::Usage("export needs a Lorentz checkpoint".into()));
            }
            let out = out_dir(&cli.out, None);
            let c = state.params.scalar_value(C_MID)?;
            for (s, name) in ds.config.subjects.iter().enumerate() {
                let e = train::embed_test(&state, &ds, s)?;
                let rows = eval::embedding_rows(&e.images, &e.brains, e.width, c)?;
                let report = eval::geometry_report(&e.images, &e.brains, e.width, c, state.config.loss.k)?;
                eval::export_embeddings(&out.join(name), &rows, &report)?;
            }
            println!("{}", json!({"exported": out, "subjects": ds.config.subjects}));
        }
        Command::Gradcheck(a) => {
            let out = out_dir(&cli.out, None);
            let grads = checks::gradient_suite(a.configs, a.seed)?;
            let residency = checks::residency_suite(a.chains, a.seed)?;
            let worst = grads.iter().map(|r| r.max_error).fold(0.0, f64::max);
            let text = run::to_json(&json!({
                "eps": GRAD_EPS,
                "tolerance": GRAD_TOL,
                "max_error": worst,
                "checks": grads,
                "residency": residency,
            }))?;
            write_report(&out, "gradcheck.json", &text)?;
            if let Some(bad) = grads.iter().find(|r| r.max_error >= GRAD_TOL) {
                return Err(Error::Numeric(format!("{} max relative error {:e}", bad.name, bad.max_error)));
            }
            if residency.f32_max > checks::F32_RESIDENCY_TOL || residency.f64_max > checks::F64_RESIDENCY_TOL {
                return Err(Error::Numeric(format!("residency {residency:?}")));
            }
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String, code: u8, extra: Option<(&str, usize)>) -> ExitCode {
    let mut v = json!({"error": kind, "message": message});
    if let Some((k, n)) = extra {
        v[k] = json!(n);
    }
    eprintln!("{v}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("usage", first.to_string(), 2, None);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(m)) => fail("config", m, 2, None),
        Err(Error::Diverged { epoch, detail }) => fail("diverged", detail, 3, Some(("epoch", epoch))),
        Err(e) => {
            let kind = match &e {
                Error::Dimension(_) => "dimension",
                Error::Numeric(_) => "numeric",
                Error::Usage(_) => "usage",
                Error::Degenerate(_) => "degenerate",
                Error::Format(_) => "format",
                Error::State(_) => "state",
                Error::Io(_) => "io",
                Error::Config(_) | Error::Diverged { .. } => unreachable!("handled above"),
            };
            fail(kind, e.to_string(), 1, None)
        }
    }
}
