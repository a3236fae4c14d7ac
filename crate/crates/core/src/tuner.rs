//! Post-training tuning of the per-step reverse covariances.
//!
//! Each iteration noises a fresh batch of data with the forward process,
//! caches the denoiser outputs along every path, and takes one Adam step on
//! the covariance parameters. The default objective is
//! `logsumexp(log w) - log M`, the log of the empirical second moment of the
//! normalised weights; the KL alternative is `mean(log w)`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;

use crate::diffusion::{forward_paths, ForwardPaths, Geometry, Proposal};
use crate::error::{check_dim, invalid, Error, Result};
use crate::exec;
use crate::gaussian::{logsumexp, softmax, Parameterization, RawParams, Structure};
use crate::optim::{adam_step, cosine_lr, AdamHyper, AdamState};
use crate::rng::SeedTree;
use crate::schedule::TimeGrid;
use crate::score::{Mlp, ScoreModel};
use crate::targets::TargetSpec;

/// Divergence minimised by the tuner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `log E_q[w]` over the batch, i.e. `logsumexp(log w) - log M`.
    Alpha2,
    /// `E_q[log w]`.
    Kl,
}

impl Objective {
    pub fn tag(self) -> &'static str {
        match self {
            Objective::Alpha2 => "alpha2",
            Objective::Kl => "kl",
        }
    }
}

/// How the per-step raw vectors are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Amortization {
    /// An independent raw vector per step.
    PerStep,
    /// A SiLU network of `ln t_n` with the given hidden widths.
    TimeNet { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub objective: Objective,
    pub amortization: Amortization,
    /// Stop once the mean loss over a window moves by less than `plateau_tol` relative.
    pub plateau_window: usize,
    pub plateau_tol: f64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch: 512,
            lr: 0.01,
            lr_floor: 1e-6,
            objective: Objective::Alpha2,
            amortization: Amortization::PerStep,
            plateau_window: 200,
            plateau_tol: 1e-4,
        }
    }
}

/// Where `x_0` comes from each iteration.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// Exact draws from the target.
    Target,
    /// Uniform draws with replacement.
    Dataset(&'a [DVector<f64>]),
}

impl DataSource<'_> {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, target: &TargetSpec, count: usize) -> Result<Vec<DVector<f64>>> {
        match self {
            DataSource::Target => (0..count)
                .map(|_| target.exact_sample(rng).ok_or_else(|| invalid(format!("{} has no exact sampler; tune from a dataset", target.name()))))
                .collect(),
            DataSource::Dataset(data) => {
                if data.is_empty() {
                    return Err(invalid("tuning dataset is empty"));
                }
                Ok((0..count).map(|_| data[rng.random_range(0..data.len())].clone()).collect())
            }
        }
    }
}

/// `logsumexp(log w) - log M`.
pub fn loss_log_alpha2(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(invalid("empty trajectory batch"));
    }
    Ok(logsumexp(log_w) - (log_w.len() as f64).ln())
}

/// `mean(log w)`.
pub fn loss_kl(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(invalid("empty trajectory batch"));
    }
    Ok(exec::pairwise_sum(log_w) / log_w.len() as f64)
}

fn build_proposal(grid: &TimeGrid, geometry: &Geometry, param: &Parameterization, raws: &[RawParams]) -> Result<Proposal> {
    let structures = raws.iter().map(|r| param.structure(r)).collect::<Result<Vec<_>>>()?;
    Proposal::new(grid.clone(), geometry.clone(), structures)
}

/// Objective value and its gradient with respect to each step's raw vector.
///
/// The gradient is `-sum_m c_m grad log p(x_{0:N}^{(m)})` with `c = softmax(log w)`
/// for [`Objective::Alpha2`] and `c = 1/M` for [`Objective::Kl`].
pub fn loss_and_gradient(
    paths: &ForwardPaths,
    grid: &TimeGrid,
    geometry: &Geometry,
    param: &Parameterization,
    raws: &[RawParams],
    objective: Objective,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if paths.is_empty() {
        return Err(invalid("empty trajectory batch"));
    }
    check_dim(grid.steps(), raws.len())?;
    let prop = build_proposal(grid, geometry, param, raws)?;
    let lw = paths.log_weights(&prop);
    let (loss, coef) = match objective {
        Objective::Alpha2 => (loss_log_alpha2(&lw)?, softmax(&lw)),
        Objective::Kl => (loss_kl(&lw)?, vec![1.0 / lw.len() as f64; lw.len()]),
    };
    let grads = exec::try_map_indexed(grid.steps(), |i| -> Result<Vec<f64>> {
        let kernel = prop.kernel(i + 1);
        let mut acc = vec![0.0; param.num_params()];
        for (m, &c) in coef.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let (_, g) = kernel.log_density_and_grad(paths.deltas[m][i].as_slice());
            let g = param.chain(&raws[i], &geometry.lift_grad(g)?)?;
            for (a, v) in acc.iter_mut().zip(g) {
                *a -= c * v;
            }
        }
        Ok(acc)
    })?;
    Ok((loss, grads))
}

/// Tuned parameters together with the grid they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedParams {
    pub grid: TimeGrid,
    pub param: Parameterization,
    /// `raws[n - 1]` belongs to step `n`.
    pub raws: Vec<RawParams>,
}

impl TunedParams {
    /// The `S_n = I` starting point.
    pub fn baseline(grid: TimeGrid, param: Parameterization) -> Self {
        let raws = vec![param.baseline_raw(); grid.steps()];
        Self { grid, param, raws }
    }

    pub fn structures(&self) -> Result<Vec<Structure>> {
        self.raws.iter().map(|r| self.param.structure(r)).collect()
    }

    pub fn proposal(&self, geometry: &Geometry) -> Result<Proposal> {
        build_proposal(&self.grid, geometry, &self.param, &self.raws)
    }

    /// Mean eigenvalue of each `S_n` on the state space, step 1 first.
    pub fn eta_profile(&self, geometry: &Geometry) -> Result<Vec<f64>> {
        let prop = self.proposal(geometry)?;
        let k = geometry.intrinsic_dim() as f64;
        Ok((1..=self.grid.steps())
            .map(|n| {
                let c = geometry.intrinsic_cov(prop.cov(n)).expect("validated by the proposal");
                c.dense().trace() / (k * c.base_variance)
            })
            .collect())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "vtdis-tuned 1").unwrap();
        writeln!(s, "param {}", param_header(&self.param)).unwrap();
        write!(s, "grid {}", self.grid.times().len()).unwrap();
        for t in self.grid.times() {
            write!(s, " {t:e}").unwrap();
        }
        s.push('\n');
        for (i, raw) in self.raws.iter().enumerate() {
            write!(s, "step {} {} t={:e} values", i + 1, self.param.tag(), self.grid.t(i + 1)).unwrap();
            for v in constrained_values(&self.param.structure(raw)?) {
                write!(s, " {v:e}").unwrap();
            }
            s.push_str(" raw");
            for v in &raw.0 {
                write!(s, " {v:e}").unwrap();
            }
            s.push('\n');
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        let bad = |m: &str| Error::Format(format!("tuned parameter file: {m}"));
        let mut it = lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty());
        if it.next() != Some("vtdis-tuned 1") {
            return Err(bad("missing or unsupported version line"));
        }
        let param = parse_param(it.next().and_then(|l| l.strip_prefix("param ")).ok_or_else(|| bad("missing param line"))?)?;
        let grid_line = it.next().and_then(|l| l.strip_prefix("grid ")).ok_or_else(|| bad("missing grid line"))?;
        let nums: Vec<f64> = parse_floats(grid_line)?;
        let count = *nums.first().ok_or_else(|| bad("empty grid line"))? as usize;
        if nums.len() != count + 1 {
            return Err(bad("grid length does not match its count"));
        }
        let grid = TimeGrid::from_times(nums[1..].to_vec())?;
        let mut raws = Vec::with_capacity(grid.steps());
        for (i, line) in it.enumerate() {
            let mut words = line.split_whitespace();
            let head: Vec<&str> = words.by_ref().take(3).collect();
            if head.len() != 3 || head[0] != "step" || head[1] != (i + 1).to_string() || head[2] != param.tag() {
                return Err(bad(&format!("malformed step line {}", i + 1)));
            }
            let rest: Vec<&str> = words.collect();
            let raw_at = rest.iter().position(|w| *w == "raw").ok_or_else(|| bad("step line without raw values"))?;
            let raw = RawParams(parse_floats(&rest[raw_at + 1..].join(" "))?);
            check_dim(param.num_params(), raw.0.len())?;
            let values = parse_floats(&rest[2..raw_at].join(" "))?;
            let expect = constrained_values(&param.structure(&raw)?);
            if values.len() != expect.len() || values.iter().zip(&expect).any(|(a, b)| (a - b).abs() > 1e-9 * b.abs().max(1.0)) {
                return Err(bad(&format!("step {} values disagree with raw parameters", i + 1)));
            }
            raws.push(raw);
        }
        if raws.len() != grid.steps() {
            return Err(bad(&format!("expected {} step lines, found {}", grid.steps(), raws.len())));
        }
        Ok(Self { grid, param, raws })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|w| w.parse::<f64>().map_err(|_| Error::Format(format!("not a number: {w:?}"))))
        .collect()
}

fn param_header(p: &Parameterization) -> String {
    let labels = |l: &[usize]| l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    match p {
        Parameterization::Isotropic { dim } | Parameterization::Diagonal { dim } | Parameterization::FullFactor { dim } => {
            format!("{} dim={dim}", p.tag())
        }
        Parameterization::LowRank { dim, rank } => format!("lowrank dim={dim} rank={rank}"),
        Parameterization::Exchangeable { particles, spatial } => format!("exchangeable particles={particles} spatial={spatial}"),
        Parameterization::LabelDiagonal { labels: l, classes, spatial } | Parameterization::LabelBlock { labels: l, classes, spatial } => {
            format!("{} labels={} classes={classes} spatial={spatial}", p.tag(), labels(l))
        }
    }
}

fn parse_param(line: &str) -> Result<Parameterization> {
    let mut words = line.split_whitespace();
    let tag = words.next().ok_or_else(|| Error::Format("empty param line".into()))?;
    let mut kv = std::collections::HashMap::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| Error::Format(format!("bad param field {w:?}")))?;
        kv.insert(k, v);
    }
    let num = |k: &str| -> Result<usize> {
        kv.get(k)
            .ok_or_else(|| Error::Format(format!("param line lacks {k}")))?
            .parse()
            .map_err(|_| Error::Format(format!("bad value for {k}")))
    };
    let labels = || -> Result<Vec<usize>> {
        kv.get("labels")
            .ok_or_else(|| Error::Format("param line lacks labels".into()))?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad label {v:?}"))))
            .collect()
    };
    Ok(match tag {
        "isotropic" => Parameterization::Isotropic { dim: num("dim")? },
        "diagonal" => Parameterization::Diagonal { dim: num("dim")? },
        "full" => Parameterization::FullFactor { dim: num("dim")? },
        "lowrank" => Parameterization::LowRank { dim: num("dim")?, rank: num("rank")? },
        "exchangeable" => Parameterization::Exchangeable { particles: num("particles")?, spatial: num("spatial")? },
        "label-diagonal" => Parameterization::LabelDiagonal { labels: labels()?, classes: num("classes")?, spatial: num("spatial")? },
        "label-block" => Parameterization::LabelBlock { labels: labels()?, classes: num("classes")?, spatial: num("spatial")? },
        t => return Err(Error::Format(format!("unknown covariance kind {t:?}"))),
    })
}

/// Human-readable constrained entries of a structure.
fn constrained_values(s: &Structure) -> Vec<f64> {
    match s {
        Structure::Isotropic { eta, .. } => vec![*eta],
        Structure::Diagonal { etas } => etas.iter().copied().collect(),
        Structure::FullFactor { factor } => {
            let d = factor.nrows();
            (0..d).flat_map(|i| (0..=i).map(move |j| (i, j))).map(|ij| factor[ij]).collect()
        }
        Structure::LowRank { a, alpha } => std::iter::once(*alpha).chain(a.transpose().iter().copied()).collect(),
        Structure::KronBlock { b, .. } => {
            let m = b.nrows();
            (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).map(|ij| b[ij]).collect()
        }
    }
}

/// Optimiser state of one tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct TunerState {
    /// Per-step raw vectors back to back, or the time-network weights.
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub iteration: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TuneReport {
    pub tuned: TunedParams,
    pub losses: Vec<f64>,
    /// Iterations actually run.
    pub iterations: usize,
    pub plateaued: bool,
}

/// Maps the flat optimiser vector to per-step raw vectors and back.
struct Layout {
    param: Parameterization,
    steps: usize,
    net: Option<(Mlp, Vec<f64>)>,
}

impl Layout {
    fn new(param: &Parameterization, grid: &TimeGrid, amort: &Amortization, rng: &mut impl Rng) -> Result<(Self, Vec<f64>)> {
        let p = param.num_params();
        let steps = grid.steps();
        match amort {
            Amortization::PerStep => {
                let flat = (0..steps).flat_map(|_| param.baseline_raw().0).collect();
                Ok((Self { param: param.clone(), steps, net: None }, flat))
            }
            Amortization::TimeNet { hidden } => {
                if hidden.contains(&0) {
                    return Err(invalid("time-network widths must be positive"));
                }
                let logs: Vec<f64> = (1..=steps).map(|n| grid.t(n).ln()).collect();
                let mean = logs.iter().sum::<f64>() / steps as f64;
                let sd = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / steps as f64).sqrt().max(1e-12);
                let inputs = logs.iter().map(|v| (v - mean) / sd).collect();
                let mut sizes = vec![1];
                sizes.extend(hidden);
                sizes.push(p);
                let mut net = Mlp::random(rng, &sizes, 0.0);
                let len = net.params.len();
                net.params[len - p..].copy_from_slice(&param.baseline_raw().0);
                let flat = net.params.clone();
                Ok((Self { param: param.clone(), steps, net: Some((net, inputs)) }, flat))
            }
        }
    }

    fn raws(&mut self, flat: &[f64]) -> Vec<RawParams> {
        let p = self.param.num_params();
        match &mut self.net {
            None => flat.chunks(p).map(|c| RawParams(c.to_vec())).collect(),
            Some((net, inputs)) => {
                net.params.copy_from_slice(flat);
                inputs.iter().map(|&u| RawParams(net.forward(&[u]))).collect()
            }
        }
    }

    fn flat_grad(&self, grads: &[Vec<f64>], len: usize) -> Vec<f64> {
        match &self.net {
            None => grads.concat(),
            Some((net, inputs)) => {
                let mut out = vec![0.0; len];
                for (u, g) in inputs.iter().zip(grads) {
                    let (_, cache) = net.forward_cached(&[*u]);
                    net.backward(&cache, g, &mut out);
                }
                out
            }
        }
    }
}

/// Tune per-step covariances for a frozen denoiser.
///
/// Iteration `i` draws its data from `seeds.named("data").child(i)` and its
/// forward noise from `seeds.named("paths").child(i)`.
pub fn tune(
    seeds: &SeedTree,
    model: &dyn ScoreModel,
    target: &TargetSpec,
    grid: &TimeGrid,
    param: &Parameterization,
    source: DataSource<'_>,
    cfg: &TunerConfig,
) -> Result<TuneReport> {
    if cfg.iterations == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) || cfg.lr_floor < 0.0 {
        return Err(invalid("tuning needs positive iterations, batch and learning rate"));
    }
    let geometry = Geometry::for_target(target)?;
    check_dim(geometry.dim(), param.dim())?;
    check_dim(geometry.dim(), model.dim())?;
    let (mut layout, flat) = Layout::new(param, grid, &cfg.amortization, &mut seeds.named("init").rng())?;
    build_proposal(grid, &geometry, param, &layout.raws(&flat))?;
    let mut state = TunerState { adam: AdamState::new(flat.len()), params: flat, iteration: 0, losses: Vec::with_capacity(cfg.iterations) };
    let hyper = AdamHyper::default();
    let data_seeds = seeds.named("data");
    let path_seeds = seeds.named("paths");
    let mut plateaued = false;
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let x0s = source.draw(&mut data_seeds.child(it as u64).rng(), target, cfg.batch)?;
        let paths = forward_paths(&path_seeds.child(it as u64), model, grid, &geometry, target, &x0s)?;
        let raws = layout.raws(&state.params);
        let (loss, grads) = loss_and_gradient(&paths, grid, &geometry, param, &raws, cfg.objective)?;
        if !loss.is_finite() {
            return Err(Error::Numerical { step: it, reason: format!("tuning loss became {loss}") });
        }
        let g = layout.flat_grad(&grads, state.params.len());
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { step: it, reason: "non-finite tuning gradient".into() });
        }
        state.losses.push(loss);
        let lr = cosine_lr(it, cfg.iterations, cfg.lr, cfg.lr_floor);
        adam_step(&mut state.params, &g, &mut state.adam, lr, &hyper);
        if state.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { step: it, reason: "non-finite covariance parameters".into() });
        }
        state.iteration += 1;
        if plateau(&state.losses, cfg.plateau_window, cfg.plateau_tol) {
            plateaued = true;
            break;
        }
    }
    let raws = layout.raws(&state.params);
    let tuned = TunedParams { grid: grid.clone(), param: param.clone(), raws };
    tuned.proposal(&geometry)?;
    debug_assert_eq!(tuned.raws.len(), layout.steps);
    Ok(TuneReport { tuned, iterations: state.iteration, losses: state.losses, plateaued })
}

fn plateau(losses: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || losses.len() < 2 * window {
        return false;
    }
    let k = losses.len();
    let recent = losses[k - window..].iter().sum::<f64>() / window as f64;
    let before = losses[k - 2 * window..k - window].iter().sum::<f64>() / window as f64;
    ((recent - before) / before.abs().max(1e-12)).abs() < tol
}

/// Loss curve as `iteration,loss` CSV.
pub fn write_loss_csv<W: Write>(mut w: W, losses: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l:e}").unwrap();
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// `eta*_n = 1 + c_n^2 v_n / sigma_ddpm^2(n)` for a `N(0, var I)` target with exact denoiser.
pub fn gaussian_optimal_eta(grid: &TimeGrid, var: f64) -> Vec<f64> {
    (1..=grid.steps())
        .map(|n| {
            let t = grid.t(n);
            let c = 1.0 - grid.shrink(n);
            let v = var * t * t / (var + t * t);
            1.0 + c * c * v / grid.ddpm_var(n)
        })
        .collect()
}
