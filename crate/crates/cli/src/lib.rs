//! Command implementations behind the `vtdis` binary.
//!
//! Each command reads a validated [`RunConfig`], derives all randomness from
//! the root seed, and writes CSV or JSONL files into the output directory. A
//! command that fails removes every file it had started writing.

pub mod config;

use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde_json::{json, Value};
use vtdis::diffusion::{forward_paths, reverse_batch, Geometry};
use vtdis::gaussian::Parameterization;
use vtdis::metrics::{elbo_eubo, estimate_log_z, forward_ess, reverse_ess, reweighted_histogram, Histogram};
use vtdis::pfode::{ode_forward_weights, ode_is_weights, write_results_csv};
use vtdis::rng::SeedTree;
use vtdis::schedule::TimeGrid;
use vtdis::score::{estimate_sigma_data, load_checkpoint, save_checkpoint, train_dsm, AnalyticGmm, Architecture, ScoreModel, ScoreNet};
use vtdis::targets::io::{read_samples, write_samples, SampleHeader};
use vtdis::targets::{mcmc_sample, TargetSpec};
use vtdis::tuner::{tune, write_loss_csv, DataSource, TuneReport, TunedParams};

pub use config::{RawConfig, RunConfig};
use config::{DataMode, ScoreKind};

/// Failure classes, mapped to process exit codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    User(String),
    /// A numerical invariant failed during a run.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical abort: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<vtdis::Error> for CliError {
    fn from(e: vtdis::Error) -> Self {
        use vtdis::Error as E;
        match e {
            E::Numerical { .. } | E::NonFinite(_) | E::NotPositiveDefinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainScore,
    Tune,
    Sample,
    Eval,
    OdeBaseline,
}

/// Build a [`RunConfig`]: file values, then overrides, then explicit flags.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut raw = match path {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    for o in overrides {
        raw.set_override(o)?;
    }
    if let Some(s) = seed {
        raw.set("seed", s.to_string());
    }
    if let Some(o) = out {
        raw.set("output.dir", o.to_string_lossy());
    }
    RunConfig::from_raw(&raw)
}

/// Run `cmd`; returns the files written.
pub fn run(cmd: Command, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::User(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let mut out = Outputs::default();
    let result = match cmd {
        Command::GenData => cmd_gen_data(cfg, &mut out),
        Command::TrainScore => cmd_train_score(cfg, &mut out),
        Command::Tune => cmd_tune(cfg, &mut out),
        Command::Sample => cmd_sample(cfg, &mut out),
        Command::Eval => cmd_eval(cfg, &mut out),
        Command::OdeBaseline => cmd_ode_baseline(cfg, &mut out),
    };
    match result {
        Ok(()) => Ok(out.paths),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

/// Files a command has started writing.
#[derive(Debug, Default)]
struct Outputs {
    paths: Vec<PathBuf>,
}

impl Outputs {
    fn claim(&mut self, path: PathBuf) -> PathBuf {
        self.paths.push(path.clone());
        path
    }

    fn create(&mut self, path: PathBuf) -> CliResult<BufWriter<std::fs::File>> {
        let p = self.claim(path);
        let f = std::fs::File::create(&p).map_err(|e| CliError::User(format!("cannot create {}: {e}", p.display())))?;
        Ok(BufWriter::new(f))
    }

    fn discard(&self) {
        for p in &self.paths {
            let _ = std::fs::remove_file(p);
        }
    }
}

fn root(cfg: &RunConfig) -> SeedTree {
    SeedTree::new(cfg.seed)
}

fn header(target: &TargetSpec) -> SampleHeader {
    SampleHeader { target: target.name().to_string(), dim: target.dim(), shape: target.particle_shape() }
}

/// Exact draws; the stream matches `gen-data` so both see the same set.
fn exact_data(cfg: &RunConfig, count: usize) -> CliResult<Vec<DVector<f64>>> {
    let mut rng = root(cfg).named("gen-data").rng();
    (0..count)
        .map(|_| cfg.target.exact_sample(&mut rng).ok_or_else(|| CliError::User(format!("{} has no exact sampler", cfg.target.name()))))
        .collect()
}

fn read_dataset(cfg: &RunConfig) -> CliResult<Vec<DVector<f64>>> {
    let (h, data) = read_samples(&cfg.data_file).map_err(|e| CliError::User(format!("dataset {}: {e}", cfg.data_file.display())))?;
    if h != header(&cfg.target) {
        return Err(CliError::User(format!(
            "dataset {} holds target={} dim={}, config wants target={} dim={}",
            cfg.data_file.display(),
            h.target,
            h.dim,
            cfg.target.name(),
            cfg.target.dim()
        )));
    }
    if data.is_empty() {
        return Err(CliError::User(format!("dataset {} is empty", cfg.data_file.display())));
    }
    Ok(data)
}

/// Training set: exact draws when available, else the dataset file.
fn training_data(cfg: &RunConfig) -> CliResult<Vec<DVector<f64>>> {
    match cfg.data_mode {
        DataMode::Exact => exact_data(cfg, cfg.data_count),
        DataMode::Mcmc => read_dataset(cfg),
    }
}

/// `count` evaluation points from the target: fresh exact draws, or an evenly strided dataset subset.
fn reference_data(cfg: &RunConfig, count: usize, stream: &str) -> CliResult<Vec<DVector<f64>>> {
    match cfg.data_mode {
        DataMode::Exact => {
            let mut rng = root(cfg).named(stream).rng();
            Ok((0..count).map(|_| cfg.target.exact_sample(&mut rng).expect("exact mode implies an exact sampler")).collect())
        }
        DataMode::Mcmc => {
            let data = read_dataset(cfg)?;
            let k = count.min(data.len());
            Ok((0..k).map(|i| data[i * data.len() / k].clone()).collect())
        }
    }
}

fn load_model(cfg: &RunConfig) -> CliResult<Box<dyn ScoreModel>> {
    match (cfg.score, &cfg.target) {
        (ScoreKind::Analytic, TargetSpec::Gmm(g)) => Ok(Box::new(AnalyticGmm::new(g.clone()))),
        (ScoreKind::Analytic, t) => Err(CliError::User(format!("{} has no analytic denoiser", t.name()))),
        (ScoreKind::Network, _) => {
            let net = load_checkpoint(&cfg.checkpoint).map_err(|e| CliError::User(format!("checkpoint {}: {e}", cfg.checkpoint.display())))?;
            if net.dim() != cfg.target.dim() {
                return Err(CliError::User(format!("checkpoint dimension {} does not match target dimension {}", net.dim(), cfg.target.dim())));
            }
            Ok(Box::new(net))
        }
    }
}

fn elapsed_ms(cfg: &RunConfig, start: Instant) -> Value {
    if cfg.wall_clock {
        json!(start.elapsed().as_secs_f64() * 1e3)
    } else {
        Value::Null
    }
}

fn write_jsonl(out: &mut Outputs, path: PathBuf, rows: &[Value]) -> CliResult<()> {
    let mut w = out.create(path)?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let samples = match cfg.data_mode {
        DataMode::Exact => exact_data(cfg, cfg.data_count)?,
        DataMode::Mcmc => {
            let rep = mcmc_sample(&root(cfg).named("gen-data"), &cfg.target, cfg.data_count, &cfg.mcmc)?;
            eprintln!("mcmc: acceptance {:.3}", rep.acceptance);
            if let Some(w) = &rep.warning {
                eprintln!("mcmc warning: {w}");
            }
            rep.samples
        }
    };
    let path = out.claim(cfg.data_file.clone());
    write_samples(&path, &header(&cfg.target), &samples)?;
    eprintln!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn cmd_train_score(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let data = training_data(cfg)?;
    let arch = match cfg.target.particle_shape() {
        Some((particles, spatial)) => Architecture::Pairwise { particles, spatial },
        None => Architecture::Mlp { dim: cfg.target.dim() },
    };
    let seeds = root(cfg).named("train");
    let sigma = estimate_sigma_data(&data)?;
    let mut net = ScoreNet::new(&mut seeds.named("init").rng(), arch, &cfg.train_hidden, sigma)?;
    let rep = train_dsm(&seeds, &data, &mut net, &cfg.train)?;
    let ckpt = out.claim(cfg.checkpoint.clone());
    save_checkpoint(&ckpt, &net)?;
    let mut w = out.create(cfg.out_dir.join("train_loss.csv"))?;
    write_loss_csv(&mut w, &rep.losses)?;
    w.flush()?;
    eprintln!("trained on {} samples, final loss {:.6}", data.len(), rep.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn run_tuner(cfg: &RunConfig, model: &dyn ScoreModel, seeds: &SeedTree, grid: &TimeGrid, param: &Parameterization) -> CliResult<TuneReport> {
    let data;
    let source = match cfg.data_mode {
        DataMode::Exact => DataSource::Target,
        DataMode::Mcmc => {
            data = read_dataset(cfg)?;
            DataSource::Dataset(&data)
        }
    };
    Ok(tune(seeds, model, &cfg.target, grid, param, source, &cfg.tuner)?)
}

/// Proposal for an eval kind at `nfe` steps, plus the tuning iterations spent.
fn eval_params(cfg: &RunConfig, model: &dyn ScoreModel, seeds: &SeedTree, kind: &str, nfe: usize) -> CliResult<(TunedParams, usize)> {
    let grid = cfg.grid.with_steps(nfe).build()?;
    if kind == "baseline" {
        return Ok((TunedParams::baseline(grid, Parameterization::Isotropic { dim: cfg.target.dim() }), 0));
    }
    let rep = run_tuner(cfg, model, seeds, &grid, &cfg.parameterization("eval.kinds", kind)?)?;
    Ok((rep.tuned, rep.iterations))
}

fn cmd_tune(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let model = load_model(cfg)?;
    let param = cfg.parameterization("cov.kind", &cfg.cov_kind)?;
    let rep = run_tuner(cfg, model.as_ref(), &root(cfg).named("tune"), &cfg.grid.build()?, &param)?;
    let path = out.claim(cfg.tuned_file.clone());
    rep.tuned.save(&path)?;
    let mut w = out.create(cfg.out_dir.join("tune_loss.csv"))?;
    write_loss_csv(&mut w, &rep.losses)?;
    w.flush()?;
    eprintln!(
        "tuned {} over {} iterations{}, final loss {:.6}",
        cfg.cov_kind,
        rep.iterations,
        if rep.plateaued { " (plateau)" } else { "" },
        rep.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let model = load_model(cfg)?;
    let geometry = Geometry::for_target(&cfg.target)?;
    let tuned = if cfg.sample_tuned {
        TunedParams::load(&cfg.tuned_file).map_err(|e| CliError::User(format!("tuned parameters {}: {e}", cfg.tuned_file.display())))?
    } else {
        TunedParams::baseline(cfg.grid.build()?, Parameterization::Isotropic { dim: cfg.target.dim() })
    };
    if tuned.param.dim() != cfg.target.dim() {
        return Err(CliError::User(format!("tuned parameters have dimension {}, target has {}", tuned.param.dim(), cfg.target.dim())));
    }
    let prop = tuned.proposal(&geometry)?;
    let batch = reverse_batch(&root(cfg).named("sample"), model.as_ref(), &prop, &cfg.target, cfg.sample_count)?;
    let mut w = out.create(cfg.out_dir.join("samples.csv"))?;
    let mut head = String::from("index,log_weight");
    for k in 0..cfg.target.dim() {
        head.push_str(&format!(",x{k}"));
    }
    writeln!(w, "{head}")?;
    for (i, (x, lw)) in batch.x0.iter().zip(&batch.log_weights).enumerate() {
        write!(w, "{i},{lw:e}")?;
        for v in x.iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    eprintln!(
        "{} samples at {} NFE: reverse ESS {:.4}, log Z {:.4}",
        cfg.sample_count,
        batch.nfe,
        reverse_ess(&batch.log_weights)?,
        estimate_log_z(&batch.log_weights)?
    );
    Ok(())
}

fn hist_json(run_id: &str, nfe: Option<usize>, kind: &str, h: &Histogram) -> Value {
    json!({
        "run_id": run_id,
        "nfe": nfe,
        "kind": kind,
        "quantity": "energy",
        "edges": h.edges,
        "unweighted": h.unweighted,
        "weighted": h.weighted,
        "overflow_unweighted": h.overflow_unweighted,
        "overflow_weighted": h.overflow_weighted,
    })
}

/// Range spanning the reference energies up to their 99th percentile.
fn energy_range(energies: &[f64]) -> Option<(f64, f64)> {
    let mut e: Vec<f64> = energies.iter().copied().filter(|v| v.is_finite()).collect();
    if e.len() < 2 {
        return None;
    }
    e.sort_by(f64::total_cmp);
    let lo = e[0];
    let hi = e[((e.len() - 1) as f64 * 0.99) as usize];
    (hi > lo).then(|| (lo, hi + (hi - lo) * 0.25))
}

fn cmd_eval(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let model = load_model(cfg)?;
    let geometry = Geometry::for_target(&cfg.target)?;
    let seeds = root(cfg).named("eval");
    let reference = reference_data(cfg, cfg.eval.forward_samples, "eval-data")?;
    let elbo_data = &reference[..cfg.eval.elbo_data.min(reference.len())];
    let ref_energy: Vec<f64> = reference.iter().map(|x| cfg.target.energy(x.as_slice())).collect();
    let range = energy_range(&ref_energy);
    let mut hists = vec![hist_json(&cfg.run_id, None, "target", &reweighted_histogram(&ref_energy, &vec![0.0; ref_energy.len()], cfg.eval.hist_bins, range)?)];
    let mut rows = Vec::new();
    let mut eta = String::from("kind,nfe,step,t,eta\n");
    for &nfe in &cfg.eval.nfe {
        for kind in &cfg.eval.kinds {
            let start = Instant::now();
            let s = seeds.named(kind).child(nfe as u64);
            let (tuned, iterations) = eval_params(cfg, model.as_ref(), &s.named("tune"), kind, nfe)?;
            let prop = tuned.proposal(&geometry)?;
            let batch = reverse_batch(&s.named("reverse"), model.as_ref(), &prop, &cfg.target, cfg.eval.samples)?;
            let paths = forward_paths(&s.named("forward"), model.as_ref(), prop.grid(), &geometry, &cfg.target, &reference)?;
            let fwd = forward_ess(&paths.log_weights(&prop))?;
            let sandwich = elbo_eubo(&s.named("elbo"), model.as_ref(), &prop, &cfg.target, elbo_data, cfg.eval.elbo_inner, cfg.eval.elbo_reps)?;
            let energies: Vec<f64> = batch.x0.iter().map(|x| cfg.target.energy(x.as_slice())).collect();
            hists.push(hist_json(&cfg.run_id, Some(nfe), kind, &reweighted_histogram(&energies, &batch.log_weights, cfg.eval.hist_bins, range)?));
            for (n, e) in tuned.eta_profile(&geometry)?.iter().enumerate() {
                eta.push_str(&format!("{kind},{nfe},{},{:e},{e:e}\n", n + 1, prop.grid().t(n + 1)));
            }
            let rev = reverse_ess(&batch.log_weights)?;
            eprintln!("nfe {nfe} {kind}: reverse ESS {rev:.4}, forward ESS {fwd:.4}");
            rows.push(json!({
                "run_id": cfg.run_id,
                "target": cfg.target.name(),
                "nfe": nfe,
                "kind": kind,
                "reverse_ess": rev,
                "forward_ess": fwd,
                "log_z": estimate_log_z(&batch.log_weights)?,
                "elbo": sandwich.elbo,
                "eubo": sandwich.eubo,
                "elbo_std": sandwich.elbo_std,
                "eubo_std": sandwich.eubo_std,
                "score_evals": batch.nfe,
                "tune_iterations": iterations,
                "wall_ms": elapsed_ms(cfg, start),
            }));
        }
    }
    write_jsonl(out, cfg.out_dir.join("metrics.jsonl"), &rows)?;
    write_jsonl(out, cfg.out_dir.join("histograms.jsonl"), &hists)?;
    let mut w = out.create(cfg.out_dir.join("eta_profile.csv"))?;
    w.write_all(eta.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn cmd_ode_baseline(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let model = load_model(cfg)?;
    let grid = cfg.grid.with_steps(cfg.ode.steps).build()?;
    let seeds = root(cfg).named("ode");
    let reference = reference_data(cfg, cfg.ode.forward_samples, "ode-data")?;
    let mut rows = Vec::new();
    for &mode in &cfg.ode.modes {
        let start = Instant::now();
        let tag = mode.tag();
        let s = seeds.named(&tag);
        let rev = ode_is_weights(&s.named("reverse"), model.as_ref(), &cfg.target, &grid, mode, cfg.ode.samples)?;
        let fwd = ode_forward_weights(&s.named("forward"), model.as_ref(), &cfg.target, &grid, mode, &reference)?;
        let log_w: Vec<f64> = rev.rows.iter().map(|r| r.log_weight).collect();
        let mut w = out.create(cfg.out_dir.join(format!("ode_{tag}.csv")))?;
        write_results_csv(&mut w, &rev)?;
        w.flush()?;
        if let Some(msg) = &rev.warning {
            eprintln!("ode {tag}: {msg}");
        }
        eprintln!("ode {tag}: reverse ESS {:.4}, forward ESS {:.4}", rev.ess, fwd.ess);
        rows.push(json!({
            "run_id": cfg.run_id,
            "target": cfg.target.name(),
            "nfe": cfg.ode.steps,
            "kind": format!("ode-{tag}"),
            "reverse_ess": rev.ess,
            "forward_ess": fwd.ess,
            "log_z": estimate_log_z(&log_w)?,
            "score_evals": rev.cost_per_sample.score_evals,
            "jvps": rev.cost_per_sample.jvps,
            "biased": rev.biased,
            "warning": rev.warning,
            "wall_ms": elapsed_ms(cfg, start),
        }));
    }
    write_jsonl(out, cfg.out_dir.join("ode.jsonl"), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discard_removes_claimed_files() {
        let d = tempfile::tempdir().unwrap();
        let mut out = Outputs::default();
        let mut w = out.create(d.path().join("a.csv")).unwrap();
        writeln!(w, "partial").unwrap();
        w.flush().unwrap();
        let b = out.claim(d.path().join("b.csv"));
        std::fs::write(&b, "x").unwrap();
        out.discard();
        assert!(!d.path().join("a.csv").exists());
        assert!(!b.exists());
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(vtdis::Error::Numerical { step: 3, reason: "x".into() }).exit_code(), 2);
        assert_eq!(CliError::from(vtdis::Error::NonFinite("w")).exit_code(), 2);
        assert_eq!(CliError::from(vtdis::Error::InvalidArgument("x".into())).exit_code(), 1);
    }
}
