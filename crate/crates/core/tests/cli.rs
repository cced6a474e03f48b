use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyperalign::data::{DataConfig, TaxonomySpec};
use hyperalign::model::{Geometry, ModelConfig};
use hyperalign::train::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyperalign"))
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn tiny(geometry: Geometry) -> RunConfig {
    let subjects: Vec<String> = vec!["a".into(), "b".into()];
    let data = DataConfig {
        v: 12,
        t: 3,
        p: 5,
        subjects: subjects.clone(),
        train_per_subject: 8,
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
            subjects,
            ..ModelConfig::default()
        },
        data,
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim()).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &tiny(Geometry::Lorentz));
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["synth", "--config", cfg, "--seed", "3"], &a));
    ok(&run(&["synth", "--config", cfg, "--seed", "3"], &b));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 1);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn train_then_inspect_lorentz() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &tiny(Geometry::Lorentz));
    let data = dir.path().join("data");
    ok(&run(&["synth", "--config", cfg.to_str().unwrap()], &data));
    let out = dir.path().join("run");
    ok(&run(
        &["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap()],
        &out,
    ));
    let log = fs::read_to_string(out.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.split('\t').count() == 7));
    assert!(out.join("metrics.json").is_file());

    let ckpt = out.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    let ev = dir.path().join("eval");
    ok(&run(&["eval", "--checkpoint", ckpt], &ev));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(m["retrieval"]["image_top1"].is_number());

    ok(&run(&["retrieve", "--checkpoint", ckpt], &ev));
    assert!(ev.join("retrieval.json").is_file());

    let ex = dir.path().join("export");
    ok(&run(&["export", "--checkpoint", ckpt], &ex));
    for s in ["a", "b"] {
        let csv = fs::read_to_string(ex.join(s).join("embeddings.csv")).unwrap();
        assert!(csv.starts_with("modality,sample,radius,x0"));
        assert_eq!(csv.lines().count(), 1 + 2 * 6);
        assert!(ex.join(s).join("radius_histogram.toml").is_file());
    }
}

#[test]
fn euclidean_baseline_trains_but_does_not_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &tiny(Geometry::Lorentz));
    let out = dir.path().join("run");
    ok(&run(&["train", "--config", cfg.to_str().unwrap(), "--geometry", "euclidean"], &out));
    let manifest = fs::read_to_string(out.join("checkpoint/checkpoint.toml")).unwrap();
    assert!(manifest.contains("geometry = \"euclidean\""));
    let o = run(
        &["export", "--checkpoint", out.join("checkpoint").to_str().unwrap()],
        &dir.path().join("x"),
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "usage");
}

#[test]
fn training_is_reproducible_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &tiny(Geometry::Lorentz));
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["train", "--config", cfg], &a));
    ok(&run(&["train", "--config", cfg], &b));
    for f in ["loss.tsv", "checkpoint/params.bin", "checkpoint/moments.bin", "checkpoint/checkpoint.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--configs", "2", "--chains", "20"], dir.path());
    ok(&o);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(v["max_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "epochs = 2\nnot_a_field = 1\n").unwrap();
    let o = run(&["train", "--config", p.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "config");

    let mut cfg = tiny(Geometry::Lorentz);
    cfg.model.d = 5;
    let p = write_config(dir.path(), "heads.toml", &cfg);
    let o = run(&["train", "--config", p.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Geometry::Lorentz);
    cfg.optim.lr = 1e30;
    let p = write_config(dir.path(), "c.toml", &cfg);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let e = error_json(&o);
    assert_eq!(e["error"], "diverged");
    assert!(e["epoch"].as_u64().unwrap() >= 1);
}

#[test]
fn usage_errors_and_help() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck"));

    let o = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");

    let o = bin().args(["eval", "--checkpoint", "/nonexistent/ckpt"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "io");
}
