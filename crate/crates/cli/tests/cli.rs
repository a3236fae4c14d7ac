use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = "\
run.id = smoke
target.kind = gaussian
target.dim = 2
grid.steps = 10
grid.eps = 1e-2
grid.t_max = 20
tuner.iterations = 60
tuner.batch = 64
tuner.lr = 0.05
train.iterations = 200
train.batch = 64
train.hidden = 16
data.count = 2000
sample.count = 300
eval.nfe = 5, 10
eval.kinds = baseline, isotropic
eval.samples = 400
eval.forward_samples = 200
eval.elbo_data = 16
eval.elbo_inner = 4
eval.elbo_reps = 2
eval.hist_bins = 20
ode.steps = 40
ode.samples = 100
ode.forward_samples = 100
";

fn vtdis(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, SMOKE).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_vtdis"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\n{}", o.status, String::from_utf8_lossy(&o.stderr));
}

#[test]
fn same_seed_gives_byte_identical_jsonl() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&vtdis(a.path(), &["eval", "--seed", "7"]));
    ok(&vtdis(b.path(), &["eval", "--seed", "7"]));
    for f in ["metrics.jsonl", "histograms.jsonl", "eta_profile.csv"] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let c = tempfile::tempdir().unwrap();
    ok(&vtdis(c.path(), &["eval", "--seed", "8"]));
    let x = std::fs::read(a.path().join("out/metrics.jsonl")).unwrap();
    let z = std::fs::read(c.path().join("out/metrics.jsonl")).unwrap();
    assert_ne!(x, z);
}

#[test]
fn eval_rows_cover_nfe_by_kind() {
    let d = tempfile::tempdir().unwrap();
    ok(&vtdis(d.path(), &["eval", "--override", "eval.nfe=4,6,8", "--override", "eval.kinds=baseline,isotropic,diagonal,full"]));
    let text = std::fs::read_to_string(d.path().join("out/metrics.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3 * 4);
    for r in &rows {
        for key in ["run_id", "nfe", "kind", "forward_ess", "reverse_ess", "elbo", "eubo", "log_z", "score_evals"] {
            assert!(r.get(key).is_some_and(|v| !v.is_null()), "{key} missing in {r}");
        }
        assert!(r["wall_ms"].is_null());
        assert!(r["elbo"].as_f64().unwrap() <= r["eubo"].as_f64().unwrap() + 1e-12);
        assert_eq!(r["score_evals"], r["nfe"]);
    }
    let eta = std::fs::read_to_string(d.path().join("out/eta_profile.csv")).unwrap();
    assert_eq!(eta.lines().count(), 1 + 4 * (4 + 6 + 8));
}

#[test]
fn wall_clock_is_opt_in() {
    let d = tempfile::tempdir().unwrap();
    ok(&vtdis(d.path(), &["ode-baseline", "--override", "output.wall_clock=true", "--override", "ode.divergence=exact"]));
    let text = std::fs::read_to_string(d.path().join("out/ode.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(row["wall_ms"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unknown_key_is_a_user_error_naming_the_key() {
    let d = tempfile::tempdir().unwrap();
    let o = vtdis(d.path(), &["eval", "--override", "tuner.learning_rate=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tuner.learning_rate"));
    std::fs::write(d.path().join("run.cfg"), format!("{SMOKE}grid.stepz = 4\n")).unwrap();
    let o = vtdis(d.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.stepz"));
    assert!(!d.path().join("out/metrics.jsonl").exists());
}

#[test]
fn diverging_training_aborts_numerically_without_outputs() {
    let d = tempfile::tempdir().unwrap();
    let o = vtdis(d.path(), &["train-score", "--override", "train.lr=1e4", "--override", "train.lr_floor=1e4"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!d.path().join("out/score.ckpt").exists());
    assert!(!d.path().join("out/train_loss.csv").exists());
}

#[test]
fn missing_inputs_are_user_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = vtdis(d.path(), &["sample"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.path().join("out/samples.csv").exists());
    let o = vtdis(d.path(), &["eval", "--override", "score.kind=network"]);
    assert_eq!(o.status.code(), Some(1));
}

/// The full pipeline on the Gaussian smoke target.
#[test]
fn gaussian_pipeline_smoke() {
    let d = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    for cmd in ["gen-data", "train-score", "tune", "sample", "eval", "ode-baseline"] {
        ok(&vtdis(d.path(), &[cmd]));
    }
    let out = d.path().join("out");
    for f in ["data.csv", "score.ckpt", "train_loss.csv", "tuned.txt", "tune_loss.csv", "samples.csv", "metrics.jsonl", "ode.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let samples = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 301);
    assert!(samples.starts_with("index,log_weight,x0,x1\n"));
    let ode = std::fs::read_to_string(out.join("ode.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = ode.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["biased"], false);
    assert_eq!(rows[1]["biased"], true);
    // the trained network path, after the analytic one above
    ok(&vtdis(d.path(), &["eval", "--override", "score.kind=network", "--override", "eval.nfe=10", "--override", "run.id=net"]));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn tuned_beats_baseline_on_two_mode_mixture() {
    let d = tempfile::tempdir().unwrap();
    let cfg = "\
target.kind = gmm2
target.dim = 2
grid.eps = 1e-3
grid.t_max = 50
tuner.iterations = 400
tuner.batch = 256
tuner.lr = 0.05
eval.nfe = 20, 50, 100
eval.kinds = baseline, isotropic
eval.samples = 4000
eval.forward_samples = 500
eval.elbo_data = 16
eval.elbo_inner = 4
eval.elbo_reps = 1
";
    std::fs::write(d.path().join("run.cfg"), cfg).unwrap();
    let o = vtdis(d.path(), &["eval"]);
    ok(&o);
    let text = std::fs::read_to_string(d.path().join("out/metrics.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for nfe in [20, 50, 100] {
        let ess = |kind: &str| rows.iter().find(|r| r["nfe"] == nfe && r["kind"] == kind).unwrap()["reverse_ess"].as_f64().unwrap();
        assert!(ess("isotropic") > ess("baseline"), "nfe {nfe}: {} vs {}", ess("isotropic"), ess("baseline"));
    }
}
