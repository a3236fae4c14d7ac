//! Run configuration: flat `key = value` text with dotted sections.
//!
//! ```text
//! # comments start with '#'
//! run.id = smoke
//! target.kind = gaussian
//! target.dim = 2
//! grid.steps = 20
//! eval.nfe = 10, 20
//! ```
//!
//! Every key is optional and has a default. Unknown keys, duplicate keys and
//! unparsable values are rejected with the offending key path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vtdis::gaussian::Parameterization;
use vtdis::pfode::{DivergenceMode, ProbeDist};
use vtdis::schedule::GridSpec;
use vtdis::score::TrainConfig;
use vtdis::targets::{Dw4Params, Gmm, Lj13Params, McmcConfig, TargetSpec};
use vtdis::tuner::{Amortization, Objective, TunerConfig};

use crate::CliError;

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "run.id",
    "seed",
    "output.dir",
    "output.wall_clock",
    "target.kind",
    "target.dim",
    "target.variance",
    "target.particles",
    "target.spatial",
    "target.a",
    "target.b",
    "target.c",
    "target.d0",
    "target.tau",
    "target.epsilon",
    "target.r_m",
    "target.c_osc",
    "target.cap",
    "grid.kind",
    "grid.steps",
    "grid.eps",
    "grid.t_max",
    "grid.rho",
    "cov.kind",
    "cov.rank",
    "cov.labels",
    "cov.classes",
    "cov.amortization",
    "cov.hidden",
    "tuner.iterations",
    "tuner.batch",
    "tuner.lr",
    "tuner.lr_floor",
    "tuner.objective",
    "tuner.plateau_window",
    "tuner.plateau_tol",
    "train.iterations",
    "train.batch",
    "train.lr",
    "train.lr_floor",
    "train.t_min",
    "train.t_max",
    "train.hidden",
    "data.count",
    "data.source",
    "data.file",
    "mcmc.chains",
    "mcmc.burn_in",
    "mcmc.thin",
    "mcmc.initial_step",
    "mcmc.target_accept",
    "score.kind",
    "score.checkpoint",
    "tuned.file",
    "sample.count",
    "sample.proposal",
    "eval.nfe",
    "eval.kinds",
    "eval.samples",
    "eval.forward_samples",
    "eval.elbo_data",
    "eval.elbo_inner",
    "eval.elbo_reps",
    "eval.hist_bins",
    "ode.steps",
    "ode.divergence",
    "ode.probes",
    "ode.probe_dist",
    "ode.samples",
    "ode.forward_samples",
];

/// Raw key/value pairs before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::User(format!("config line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            let k = k.trim();
            check_key(k)?;
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(CliError::User(format!("config key `{k}`: set twice")));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply a `key=value` override.
    pub fn set_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| CliError::User(format!("override {spec:?} is not `key=value`")))?;
        let k = k.trim();
        check_key(k)?;
        self.values.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        debug_assert!(KEYS.contains(&key));
        self.values.insert(key.to_string(), value.into());
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        debug_assert!(KEYS.contains(&key), "{key}");
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>())),
        }
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values.get(key).map(|v| v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>()))).transpose()
    }

    fn str(&self, key: &str, default: &str) -> String {
        debug_assert!(KEYS.contains(&key), "{key}");
        self.values.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    fn list<T: FromStr>(&self, key: &str, default: &str) -> Result<Vec<T>, CliError> {
        let raw = self.str(key, default);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad(key, s, std::any::type_name::<T>())))
            .collect()
    }
}

fn check_key(k: &str) -> Result<(), CliError> {
    if KEYS.contains(&k) {
        Ok(())
    } else {
        Err(CliError::User(format!("config key `{k}`: unknown key")))
    }
}

fn bad(key: &str, value: &str, ty: &str) -> CliError {
    CliError::User(format!("config key `{key}`: cannot parse {value:?} as {ty}"))
}

fn user(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::User(format!("config key `{key}`: {msg}"))
}

/// Where the score model comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Closed-form mixture denoiser.
    Analytic,
    /// Trained checkpoint.
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    Exact,
    Mcmc,
}

/// Proposal family for a covariance kind name.
#[derive(Debug, Clone, PartialEq)]
pub struct CovChoice {
    pub rank: usize,
    pub labels: Option<Vec<usize>>,
    pub classes: Option<usize>,
    pub amortization: Amortization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub nfe: Vec<usize>,
    pub kinds: Vec<String>,
    pub samples: usize,
    pub forward_samples: usize,
    pub elbo_data: usize,
    pub elbo_inner: usize,
    pub elbo_reps: usize,
    pub hist_bins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeConfig {
    pub steps: usize,
    pub modes: Vec<DivergenceMode>,
    pub samples: usize,
    pub forward_samples: usize,
}

/// A validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub wall_clock: bool,
    pub target: TargetSpec,
    pub grid: GridSpec,
    pub cov_kind: String,
    pub cov: CovChoice,
    pub tuner: TunerConfig,
    pub train: TrainConfig,
    pub train_hidden: Vec<usize>,
    pub data_count: usize,
    pub data_mode: DataMode,
    pub data_file: PathBuf,
    pub mcmc: McmcConfig,
    pub score: ScoreKind,
    pub checkpoint: PathBuf,
    pub tuned_file: PathBuf,
    pub sample_count: usize,
    /// `false` samples from the untuned proposal.
    pub sample_tuned: bool,
    pub eval: EvalConfig,
    pub ode: OdeConfig,
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let out_dir = PathBuf::from(raw.str("output.dir", "out"));
        let target = target_from(raw)?;
        let grid = grid_from(raw)?;
        let cov_kind = raw.str("cov.kind", "isotropic");
        let cov = CovChoice {
            rank: raw.get("cov.rank", 2)?,
            labels: raw.opt::<String>("cov.labels")?.map(|s| parse_list("cov.labels", &s)).transpose()?,
            classes: raw.opt("cov.classes")?,
            amortization: match raw.str("cov.amortization", "per-step").as_str() {
                "per-step" => Amortization::PerStep,
                "time-net" => Amortization::TimeNet { hidden: raw.list("cov.hidden", "16,16")? },
                other => return Err(user("cov.amortization", format!("expected per-step or time-net, got {other:?}"))),
            },
        };
        let tuner = TunerConfig {
            iterations: raw.get("tuner.iterations", 5000)?,
            batch: raw.get("tuner.batch", 512)?,
            lr: raw.get("tuner.lr", 0.01)?,
            lr_floor: raw.get("tuner.lr_floor", 1e-6)?,
            objective: match raw.str("tuner.objective", "alpha2").as_str() {
                "alpha2" => Objective::Alpha2,
                "kl" => Objective::Kl,
                other => return Err(user("tuner.objective", format!("expected alpha2 or kl, got {other:?}"))),
            },
            amortization: cov.amortization.clone(),
            plateau_window: raw.get("tuner.plateau_window", 200)?,
            plateau_tol: raw.get("tuner.plateau_tol", 1e-4)?,
        };
        positive("tuner.iterations", tuner.iterations)?;
        positive("tuner.batch", tuner.batch)?;
        positive_real("tuner.lr", tuner.lr)?;
        let d = TrainConfig::default();
        let train = TrainConfig {
            iterations: raw.get("train.iterations", d.iterations)?,
            batch: raw.get("train.batch", d.batch)?,
            lr: raw.get("train.lr", d.lr)?,
            lr_floor: raw.get("train.lr_floor", d.lr_floor)?,
            t_min: raw.get("train.t_min", d.t_min)?,
            t_max: raw.get("train.t_max", d.t_max)?,
        };
        positive("train.iterations", train.iterations)?;
        positive("train.batch", train.batch)?;
        positive_real("train.lr", train.lr)?;
        if !(train.t_min > 0.0 && train.t_min < train.t_max) {
            return Err(user("train.t_min", "need 0 < train.t_min < train.t_max"));
        }
        let train_hidden = raw.list("train.hidden", "64,64")?;
        let data_mode = match raw.str("data.source", "auto").as_str() {
            "auto" if matches!(target, TargetSpec::Gmm(_)) => DataMode::Exact,
            "auto" | "mcmc" => DataMode::Mcmc,
            "exact" if matches!(target, TargetSpec::Gmm(_)) => DataMode::Exact,
            "exact" => return Err(user("data.source", format!("{} has no exact sampler", target.name()))),
            other => return Err(user("data.source", format!("expected auto, exact or mcmc, got {other:?}"))),
        };
        let m = McmcConfig::default();
        let mcmc = McmcConfig {
            chains: raw.get("mcmc.chains", m.chains)?,
            burn_in: raw.get("mcmc.burn_in", m.burn_in)?,
            thin: raw.get("mcmc.thin", m.thin)?,
            initial_step: raw.get("mcmc.initial_step", m.initial_step)?,
            target_accept: raw.get("mcmc.target_accept", m.target_accept)?,
        };
        positive("mcmc.chains", mcmc.chains)?;
        positive("mcmc.thin", mcmc.thin)?;
        let score = match raw.str("score.kind", "auto").as_str() {
            "auto" if matches!(target, TargetSpec::Gmm(_)) => ScoreKind::Analytic,
            "auto" | "network" => ScoreKind::Network,
            "analytic" if matches!(target, TargetSpec::Gmm(_)) => ScoreKind::Analytic,
            "analytic" => return Err(user("score.kind", format!("{} has no analytic denoiser", target.name()))),
            other => return Err(user("score.kind", format!("expected auto, analytic or network, got {other:?}"))),
        };
        let in_out = |key: &str, name: &str| raw.opt::<PathBuf>(key).map(|p| p.unwrap_or_else(|| out_dir.join(name)));
        let eval = EvalConfig {
            nfe: raw.list("eval.nfe", "20,50,100")?,
            kinds: raw.list("eval.kinds", "baseline,isotropic")?,
            samples: raw.get("eval.samples", 10_000)?,
            forward_samples: raw.get("eval.forward_samples", 1000)?,
            elbo_data: raw.get("eval.elbo_data", 64)?,
            elbo_inner: raw.get("eval.elbo_inner", 16)?,
            elbo_reps: raw.get("eval.elbo_reps", 3)?,
            hist_bins: raw.get("eval.hist_bins", 50)?,
        };
        if eval.nfe.is_empty() || eval.nfe.contains(&0) {
            return Err(user("eval.nfe", "need a non-empty list of positive step counts"));
        }
        if eval.kinds.is_empty() {
            return Err(user("eval.kinds", "need at least one kind"));
        }
        positive("eval.samples", eval.samples)?;
        positive("eval.forward_samples", eval.forward_samples)?;
        positive("eval.elbo_data", eval.elbo_data)?;
        positive("eval.elbo_reps", eval.elbo_reps)?;
        positive("eval.hist_bins", eval.hist_bins)?;
        if eval.elbo_inner < 2 {
            return Err(user("eval.elbo_inner", "need at least 2 inner samples"));
        }
        let probes: usize = raw.get("ode.probes", 1)?;
        positive("ode.probes", probes)?;
        let dist = match raw.str("ode.probe_dist", "rademacher").as_str() {
            "rademacher" => ProbeDist::Rademacher,
            "gaussian" => ProbeDist::Gaussian,
            other => return Err(user("ode.probe_dist", format!("expected rademacher or gaussian, got {other:?}"))),
        };
        let modes = raw
            .list::<String>("ode.divergence", "exact,hutchinson")?
            .into_iter()
            .map(|m| match m.as_str() {
                "exact" => Ok(DivergenceMode::Exact),
                "hutchinson" => Ok(DivergenceMode::Hutchinson { probes, dist }),
                other => Err(user("ode.divergence", format!("expected exact or hutchinson, got {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if modes.is_empty() {
            return Err(user("ode.divergence", "need at least one mode"));
        }
        let ode = OdeConfig {
            steps: raw.get("ode.steps", 100)?,
            modes,
            samples: raw.get("ode.samples", 1000)?,
            forward_samples: raw.get("ode.forward_samples", 1000)?,
        };
        positive("ode.steps", ode.steps)?;
        positive("ode.samples", ode.samples)?;
        positive("ode.forward_samples", ode.forward_samples)?;
        let cfg = Self {
            run_id: raw.str("run.id", "run"),
            seed: raw.get("seed", 0)?,
            wall_clock: raw.get("output.wall_clock", false)?,
            grid,
            cov_kind,
            cov,
            tuner,
            train,
            train_hidden,
            data_count: raw.get("data.count", 10_000)?,
            data_mode,
            data_file: in_out("data.file", "data.csv")?,
            mcmc,
            score,
            checkpoint: in_out("score.checkpoint", "score.ckpt")?,
            tuned_file: in_out("tuned.file", "tuned.txt")?,
            sample_count: raw.get("sample.count", 1000)?,
            sample_tuned: match raw.str("sample.proposal", "tuned").as_str() {
                "tuned" => true,
                "baseline" => false,
                other => return Err(user("sample.proposal", format!("expected tuned or baseline, got {other:?}"))),
            },
            eval,
            ode,
            target,
            out_dir,
        };
        positive("data.count", cfg.data_count)?;
        positive("sample.count", cfg.sample_count)?;
        cfg.parameterization("cov.kind", &cfg.cov_kind)?;
        for k in cfg.eval.kinds.iter().filter(|k| k.as_str() != "baseline") {
            cfg.parameterization("eval.kinds", k)?;
        }
        Ok(cfg)
    }

    /// Parameterization for a covariance kind name on this target.
    pub fn parameterization(&self, key: &str, kind: &str) -> Result<Parameterization, CliError> {
        let dim = self.target.dim();
        let shape = self.target.particle_shape();
        let particle = |what: &str| shape.ok_or_else(|| user(key, format!("{what} needs a particle target")));
        let labelled = |what: &str| -> Result<(Vec<usize>, usize, usize), CliError> {
            let (m, n) = particle(what)?;
            let labels = self.cov.labels.clone().ok_or_else(|| user("cov.labels", format!("{what} needs particle labels")))?;
            if labels.len() != m {
                return Err(user("cov.labels", format!("expected {m} labels, got {}", labels.len())));
            }
            let classes = self.cov.classes.unwrap_or_else(|| labels.iter().max().map_or(0, |l| l + 1));
            if labels.iter().any(|&l| l >= classes) {
                return Err(user("cov.classes", format!("labels must be below {classes}")));
            }
            Ok((labels, classes, n))
        };
        Ok(match kind {
            "isotropic" => Parameterization::Isotropic { dim },
            "diagonal" => Parameterization::Diagonal { dim },
            "full" => Parameterization::FullFactor { dim },
            "lowrank" => {
                if self.cov.rank == 0 || self.cov.rank > dim {
                    return Err(user("cov.rank", format!("rank must lie in 1..={dim}")));
                }
                Parameterization::LowRank { dim, rank: self.cov.rank }
            }
            "exchangeable" => {
                let (particles, spatial) = particle("exchangeable")?;
                Parameterization::Exchangeable { particles, spatial }
            }
            "label-diagonal" => {
                let (labels, classes, spatial) = labelled("label-diagonal")?;
                Parameterization::LabelDiagonal { labels, classes, spatial }
            }
            "label-block" => {
                let (labels, classes, spatial) = labelled("label-block")?;
                Parameterization::LabelBlock { labels, classes, spatial }
            }
            other => {
                return Err(user(
                    key,
                    format!("unknown covariance kind {other:?}; expected isotropic, diagonal, full, lowrank, exchangeable, label-diagonal or label-block"),
                ))
            }
        })
    }
}

fn parse_list(key: &str, s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(|v| v.parse().map_err(|_| bad(key, v, "usize"))).collect()
}

fn positive(key: &str, v: usize) -> Result<(), CliError> {
    if v > 0 {
        Ok(())
    } else {
        Err(user(key, "must be positive"))
    }
}

fn positive_real(key: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(user(key, format!("must be positive, got {v}")))
    }
}

fn target_from(raw: &RawConfig) -> Result<TargetSpec, CliError> {
    let kind = raw.str("target.kind", "gaussian");
    fn core(key: &'static str) -> impl Fn(vtdis::Error) -> CliError {
        move |e| user(key, e)
    }
    Ok(match kind.as_str() {
        "gaussian" => {
            let var = raw.get("target.variance", 1.0)?;
            positive_real("target.variance", var)?;
            TargetSpec::Gmm(Gmm::gaussian(raw.get("target.dim", 2)?, var).map_err(core("target.dim"))?)
        }
        "gmm2" => TargetSpec::Gmm(Gmm::two_mode(raw.get("target.dim", 2)?).map_err(core("target.dim"))?),
        "dw4" => {
            let d = Dw4Params::default();
            TargetSpec::Dw4(Dw4Params {
                particles: raw.get("target.particles", d.particles)?,
                spatial: raw.get("target.spatial", d.spatial)?,
                a: raw.get("target.a", d.a)?,
                b: raw.get("target.b", d.b)?,
                c: raw.get("target.c", d.c)?,
                d0: raw.get("target.d0", d.d0)?,
                tau: raw.get("target.tau", d.tau)?,
            })
        }
        "lj13" => {
            let d = Lj13Params::default();
            TargetSpec::Lj13(Lj13Params {
                particles: raw.get("target.particles", d.particles)?,
                spatial: raw.get("target.spatial", d.spatial)?,
                epsilon: raw.get("target.epsilon", d.epsilon)?,
                r_m: raw.get("target.r_m", d.r_m)?,
                c_osc: raw.get("target.c_osc", d.c_osc)?,
                tau: raw.get("target.tau", d.tau)?,
                cap: raw.get("target.cap", d.cap)?,
            })
        }
        other => return Err(user("target.kind", format!("expected gaussian, gmm2, dw4 or lj13, got {other:?}"))),
    })
    .and_then(|t| {
        if let Some((m, n)) = t.particle_shape() {
            if m < 2 || n == 0 {
                return Err(user("target.particles", "need at least two particles in at least one dimension"));
            }
            if let TargetSpec::Dw4(p) = &t {
                positive_real("target.tau", p.tau)?;
            }
            if let TargetSpec::Lj13(p) = &t {
                positive_real("target.tau", p.tau)?;
            }
        }
        Ok(t)
    })
}

fn grid_from(raw: &RawConfig) -> Result<GridSpec, CliError> {
    let steps = raw.get("grid.steps", 100)?;
    let eps = raw.get("grid.eps", 1e-3)?;
    let t_max = raw.get("grid.t_max", 1e2)?;
    let spec = match raw.str("grid.kind", "geometric").as_str() {
        "geometric" => GridSpec::Geometric { steps, eps, t_max },
        "karras" => GridSpec::Karras { steps, eps, t_max, rho: raw.get("grid.rho", 7.0)? },
        other => return Err(user("grid.kind", format!("expected geometric or karras, got {other:?}"))),
    };
    spec.build().map_err(|e| user("grid.steps", e))?;
    Ok(spec)
}
