//! Forward noising, reverse proposals and trajectory-wise importance weights.
//!
//! A trajectory is `x_0, .., x_N` on a [`TimeGrid`]. The forward process
//! adds `N(0, (t_n^2 - t_{n-1}^2) I)` per step; the reverse proposal draws
//! `x_N ~ N(0, T^2 I)` and then `x_{n-1} ~ N(mu_n(x_n), sigma_ddpm^2(n) S_n)`
//! with the posterior mean built from the denoiser. The log weight is
//!
//! ```text
//! log w = log pi(x_0) + sum_n log q(x_n | x_{n-1}) - log p(x_N) - sum_n log p(x_{n-1} | x_n)
//! ```
//!
//! For particle systems every state lives on the zero centre-of-mass
//! subspace and all densities are taken with respect to that subspace.

use nalgebra::DVector;
use rand::Rng;

use crate::equivariant::{com_project, ComProjection};
use crate::error::{check_dim, invalid, Error, Result};
use crate::exec;
use crate::gaussian::{standard_normal, CovarianceSpec, PreparedCov, Structure, StructureGrad, LN_2PI};
use crate::rng::SeedTree;
use crate::schedule::TimeGrid;
use crate::score::ScoreModel;
use crate::targets::TargetSpec;

/// The space states live in.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Euclidean(usize),
    ZeroCom(ComProjection),
}

impl Geometry {
    pub fn for_target(target: &TargetSpec) -> Result<Self> {
        Ok(match target.projection()? {
            Some(p) => Geometry::ZeroCom(p),
            None => Geometry::Euclidean(target.dim()),
        })
    }

    /// Ambient coordinate count.
    pub fn dim(&self) -> usize {
        match self {
            Geometry::Euclidean(d) => *d,
            Geometry::ZeroCom(p) => p.ambient_dim(),
        }
    }

    /// Dimension of the space densities are defined on.
    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Geometry::Euclidean(d) => *d,
            Geometry::ZeroCom(p) => p.reduced_dim(),
        }
    }

    pub fn projection(&self) -> Option<&ComProjection> {
        match self {
            Geometry::Euclidean(_) => None,
            Geometry::ZeroCom(p) => Some(p),
        }
    }

    /// Standard normal noise on the state space, in ambient coordinates.
    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Geometry::Euclidean(d) => standard_normal(rng, *d),
            Geometry::ZeroCom(p) => p.lift(standard_normal(rng, p.reduced_dim()).as_slice()),
        }
    }

    /// Accept a state, re-centring small drift.
    pub fn admit(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        match self {
            Geometry::Euclidean(_) => Ok(x.clone()),
            Geometry::ZeroCom(p) => p.ensure_on_subspace(x),
        }
    }

    fn recentre(&self, x: DVector<f64>) -> DVector<f64> {
        match self {
            Geometry::Euclidean(_) => x,
            Geometry::ZeroCom(p) => com_project(&x, p.particles(), p.spatial()),
        }
    }

    /// `log N(delta; 0, var I)` on the state space; `delta` must lie in it.
    pub fn iso_log_density(&self, delta: &[f64], var: f64) -> f64 {
        let k = self.intrinsic_dim() as f64;
        let q: f64 = delta.iter().map(|v| v * v).sum();
        -0.5 * (k * (LN_2PI + var.ln()) + q / var)
    }

    /// Coordinates of an ambient displacement in the intrinsic basis.
    pub fn reduce(&self, delta: &DVector<f64>) -> DVector<f64> {
        match self {
            Geometry::Euclidean(_) => delta.clone(),
            Geometry::ZeroCom(p) => p.reduce(delta.as_slice()),
        }
    }

    /// Ambient displacement from intrinsic coordinates.
    pub fn lift(&self, y: DVector<f64>) -> DVector<f64> {
        match self {
            Geometry::Euclidean(_) => y,
            Geometry::ZeroCom(p) => p.lift(y.as_slice()),
        }
    }

    /// Express an ambient covariance on the state space.
    pub fn intrinsic_cov(&self, cov: &CovarianceSpec) -> Result<CovarianceSpec> {
        check_dim(self.dim(), cov.dim())?;
        match self {
            Geometry::Euclidean(_) => Ok(cov.clone()),
            Geometry::ZeroCom(p) => p.reduce_cov(cov),
        }
    }

    /// Pull an intrinsic structure gradient back to the ambient structure.
    pub fn lift_grad(&self, g: StructureGrad) -> Result<StructureGrad> {
        match self {
            Geometry::Euclidean(_) => Ok(g),
            Geometry::ZeroCom(p) => p.lift_grad(&g),
        }
    }
}

/// `log N(x_next; x_prev, (t_n^2 - t_{n-1}^2) I)`.
pub fn forward_kernel_log_density(x_next: &DVector<f64>, x_prev: &DVector<f64>, n: usize, grid: &TimeGrid) -> Result<f64> {
    check_step(n, grid)?;
    check_dim(x_prev.len(), x_next.len())?;
    Ok(Geometry::Euclidean(x_next.len()).iso_log_density((x_next - x_prev).as_slice(), grid.forward_var(n)))
}

/// Posterior `q(x_{n-1} | x_n, x_0 = x0_hat)`: mean and scalar variance.
pub fn ddpm_posterior(x_n: &DVector<f64>, x0_hat: &DVector<f64>, n: usize, grid: &TimeGrid) -> Result<(DVector<f64>, f64)> {
    check_step(n, grid)?;
    check_dim(x_n.len(), x0_hat.len())?;
    Ok((posterior_mean(x_n, x0_hat, grid.shrink(n)), grid.ddpm_var(n)))
}

fn posterior_mean(x_n: &DVector<f64>, x0_hat: &DVector<f64>, shrink: f64) -> DVector<f64> {
    x_n * shrink + x0_hat * (1.0 - shrink)
}

fn check_step(n: usize, grid: &TimeGrid) -> Result<()> {
    if n == 0 || n > grid.steps() {
        return Err(invalid(format!("step index {n} outside 1..={}", grid.steps())));
    }
    Ok(())
}

/// Per-step reverse covariances on a grid.
#[derive(Debug, Clone)]
pub struct Proposal {
    grid: TimeGrid,
    geometry: Geometry,
    covs: Vec<CovarianceSpec>,
    kernels: Vec<PreparedCov>,
}

impl Proposal {
    /// `structures[n - 1]` is the structure of step `n`; bases are `sigma_ddpm^2(n)`.
    pub fn new(grid: TimeGrid, geometry: Geometry, structures: Vec<Structure>) -> Result<Self> {
        if structures.len() != grid.steps() {
            return Err(invalid(format!("need {} step covariances, got {}", grid.steps(), structures.len())));
        }
        let covs = structures
            .into_iter()
            .enumerate()
            .map(|(i, s)| CovarianceSpec::new(s, grid.ddpm_var(i + 1)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_covs(grid, geometry, covs)
    }

    /// Explicit per-step covariances, bases included.
    pub fn from_covs(grid: TimeGrid, geometry: Geometry, covs: Vec<CovarianceSpec>) -> Result<Self> {
        if covs.len() != grid.steps() {
            return Err(invalid(format!("need {} step covariances, got {}", grid.steps(), covs.len())));
        }
        let kernels = covs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                geometry.intrinsic_cov(c)?.prepare().map_err(|e| Error::Numerical { step: i + 1, reason: e.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, geometry, covs, kernels })
    }

    /// The DDPM baseline, `S_n = I`.
    pub fn baseline(grid: TimeGrid, geometry: Geometry) -> Result<Self> {
        let d = geometry.dim();
        let structures = vec![Structure::Isotropic { eta: 1.0, dim: d }; grid.steps()];
        Self::new(grid, geometry, structures)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Ambient covariance of step `n`.
    pub fn cov(&self, n: usize) -> &CovarianceSpec {
        &self.covs[n - 1]
    }

    /// Intrinsic kernel of step `n`.
    pub fn kernel(&self, n: usize) -> &PreparedCov {
        &self.kernels[n - 1]
    }

    pub fn log_prior(&self, x_n: &[f64]) -> f64 {
        let t = self.grid.t_max();
        self.geometry.iso_log_density(x_n, t * t)
    }
}

/// A stored trajectory with its cached joint log-densities.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `x_0, .., x_N`.
    pub states: Vec<DVector<f64>>,
    /// `sum_n log q(x_n | x_{n-1})`, excluding `pi(x_0)`.
    pub log_q_cond: f64,
    /// `log p(x_N)`.
    pub log_prior: f64,
    /// `sum_n log p(x_{n-1} | x_n)`.
    pub log_p_rev: f64,
}

impl Trajectory {
    /// `log p(x_{0:N})`.
    pub fn log_p_joint(&self) -> f64 {
        self.log_prior + self.log_p_rev
    }

    /// `log pi(x_0) + log q(x_{1:N} | x_0)`.
    pub fn log_q_joint(&self, target: &TargetSpec) -> f64 {
        target.log_density(self.states[0].as_slice()) + self.log_q_cond
    }
}

/// Importance weight of a trajectory, target over proposal.
pub fn trajectory_log_weight(traj: &Trajectory, target: &TargetSpec) -> f64 {
    traj.log_q_joint(target) - traj.log_p_joint()
}

fn denoise_checked(model: &dyn ScoreModel, x: &DVector<f64>, t: f64, n: usize) -> Result<DVector<f64>> {
    let d = model.denoise(x.as_slice(), t).map_err(|e| match e {
        Error::Numerical { reason, .. } => Error::Numerical { step: n, reason },
        other => Error::Numerical { step: n, reason: other.to_string() },
    })?;
    if d.iter().all(|v| v.is_finite()) {
        Ok(d)
    } else {
        Err(Error::Numerical { step: n, reason: "non-finite denoiser output".into() })
    }
}

/// One reverse step from `x_n`: returns `(x_{n-1}, log p(x_{n-1} | x_n))`.
fn reverse_step<R: Rng + ?Sized>(rng: &mut R, model: &dyn ScoreModel, prop: &Proposal, x: &DVector<f64>, n: usize) -> Result<(DVector<f64>, f64)> {
    let g = &prop.geometry;
    let x0_hat = denoise_checked(model, x, prop.grid.t(n), n)?;
    let mean = g.recentre(posterior_mean(x, &x0_hat, prop.grid.shrink(n)));
    let kernel = prop.kernel(n);
    let eps = kernel.sample_noise(rng);
    let log_p = kernel.log_density_centered(eps.as_slice());
    Ok((mean + g.lift(eps), log_p))
}

fn check_model(model: &dyn ScoreModel, prop: &Proposal) -> Result<()> {
    check_dim(prop.geometry.dim(), model.dim())
}

/// Sample `x_{0:N}` from the reverse proposal, keeping every state.
pub fn reverse_sample_trajectory<R: Rng + ?Sized>(rng: &mut R, model: &dyn ScoreModel, prop: &Proposal) -> Result<Trajectory> {
    check_model(model, prop)?;
    let steps = prop.steps();
    let g = &prop.geometry;
    let t_max = prop.grid.t_max();
    let mut states = vec![DVector::zeros(0); steps + 1];
    states[steps] = g.noise(rng) * t_max;
    let log_prior = prop.log_prior(states[steps].as_slice());
    let (mut log_p_rev, mut log_q_cond) = (0.0, 0.0);
    for n in (1..=steps).rev() {
        let (prev, lp) = reverse_step(rng, model, prop, &states[n], n)?;
        log_p_rev += lp;
        log_q_cond += g.iso_log_density((&states[n] - &prev).as_slice(), prop.grid.forward_var(n));
        states[n - 1] = prev;
    }
    Ok(Trajectory { states, log_q_cond, log_prior, log_p_rev })
}

/// Forward trajectory from explicit standard-normal increments `noise[n - 1]`.
pub fn forward_trajectory_from_noise(x0: &DVector<f64>, grid: &TimeGrid, geometry: &Geometry, noise: &[DVector<f64>]) -> Result<Trajectory> {
    if noise.len() != grid.steps() {
        return Err(invalid(format!("need {} noise vectors, got {}", grid.steps(), noise.len())));
    }
    let mut states = Vec::with_capacity(grid.steps() + 1);
    states.push(geometry.admit(x0)?);
    let mut log_q_cond = 0.0;
    for n in 1..=grid.steps() {
        check_dim(geometry.dim(), noise[n - 1].len())?;
        let var = grid.forward_var(n);
        let step = &noise[n - 1] * var.sqrt();
        log_q_cond += geometry.iso_log_density(step.as_slice(), var);
        let next = &states[n - 1] + step;
        states.push(next);
    }
    let t = grid.t_max();
    let log_prior = geometry.iso_log_density(states[grid.steps()].as_slice(), t * t);
    Ok(Trajectory { states, log_q_cond, log_prior, log_p_rev: f64::NAN })
}

/// Forward-noise `x0`; `log_p_rev` is left unset (NaN) until scored.
pub fn forward_sample_trajectory<R: Rng + ?Sized>(rng: &mut R, x0: &DVector<f64>, grid: &TimeGrid, geometry: &Geometry) -> Result<Trajectory> {
    let noise: Vec<DVector<f64>> = (0..grid.steps()).map(|_| geometry.noise(rng)).collect();
    forward_trajectory_from_noise(x0, grid, geometry, &noise)
}

/// Recompute `log p(x_N)` and `sum_n log p(x_{n-1} | x_n)` from stored states.
pub fn score_trajectory(traj: &mut Trajectory, model: &dyn ScoreModel, prop: &Proposal) -> Result<()> {
    check_model(model, prop)?;
    if traj.states.len() != prop.steps() + 1 {
        return Err(invalid("trajectory length does not match the grid"));
    }
    let g = &prop.geometry;
    let mut lp = 0.0;
    let mut lq = 0.0;
    for n in 1..=prop.steps() {
        let x = &traj.states[n];
        let x0_hat = denoise_checked(model, x, prop.grid.t(n), n)?;
        let mean = g.recentre(posterior_mean(x, &x0_hat, prop.grid.shrink(n)));
        let delta = g.reduce(&(&traj.states[n - 1] - mean));
        lp += prop.kernel(n).log_density_centered(delta.as_slice());
        lq += g.iso_log_density((x - &traj.states[n - 1]).as_slice(), prop.grid.forward_var(n));
    }
    traj.log_p_rev = lp;
    traj.log_q_cond = lq;
    traj.log_prior = prop.log_prior(traj.states[prop.steps()].as_slice());
    Ok(())
}

/// Terminal samples and log weights of a batch of reverse trajectories.
#[derive(Debug, Clone)]
pub struct ReverseBatch {
    pub x0: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
    /// Denoiser evaluations per trajectory.
    pub nfe: usize,
}

/// `count` reverse trajectories; trajectory `i` draws from `seeds.stream(i)`.
/// States are not stored.
pub fn reverse_batch(seeds: &SeedTree, model: &dyn ScoreModel, prop: &Proposal, target: &TargetSpec, count: usize) -> Result<ReverseBatch> {
    check_model(model, prop)?;
    check_dim(target.dim(), prop.geometry.dim())?;
    let steps = prop.steps();
    let g = &prop.geometry;
    let out = exec::try_map_indexed(count, |i| -> Result<(DVector<f64>, f64)> {
        let mut rng = seeds.stream(i as u64);
        let mut x = g.noise(&mut rng) * prop.grid.t_max();
        let mut lw = -prop.log_prior(x.as_slice());
        for n in (1..=steps).rev() {
            let (prev, lp) = reverse_step(&mut rng, model, prop, &x, n)?;
            lw += g.iso_log_density((&x - &prev).as_slice(), prop.grid.forward_var(n)) - lp;
            x = prev;
        }
        lw += target.log_density(x.as_slice());
        Ok((x, if lw.is_nan() { f64::NEG_INFINITY } else { lw }))
    })?;
    let (x0, log_weights) = out.into_iter().unzip();
    Ok(ReverseBatch { x0, log_weights, nfe: steps })
}

/// Forward-noised paths reduced to what covariance-dependent quantities need.
///
/// For each path `m` and step `n` it keeps the residual
/// `delta_{m,n} = x_{n-1} - mu_n(x_n)` in intrinsic coordinates; the mean does
/// not depend on the covariances, so the denoiser runs once per path and step.
#[derive(Debug, Clone)]
pub struct ForwardPaths {
    pub log_pi: Vec<f64>,
    pub log_q_cond: Vec<f64>,
    pub log_prior: Vec<f64>,
    /// `deltas[m][n - 1]`.
    pub deltas: Vec<Vec<DVector<f64>>>,
}

impl ForwardPaths {
    pub fn len(&self) -> usize {
        self.log_pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_pi.is_empty()
    }

    /// `sum_n log p(x_{n-1} | x_n)` for path `m`.
    pub fn log_p_rev(&self, m: usize, prop: &Proposal) -> f64 {
        self.deltas[m].iter().enumerate().map(|(i, d)| prop.kernel(i + 1).log_density_centered(d.as_slice())).sum()
    }

    /// Log importance weights under `prop`.
    pub fn log_weights(&self, prop: &Proposal) -> Vec<f64> {
        exec::map_indexed(self.len(), |m| {
            let lw = self.log_pi[m] + self.log_q_cond[m] - self.log_prior[m] - self.log_p_rev(m, prop);
            if lw.is_nan() {
                f64::NEG_INFINITY
            } else {
                lw
            }
        })
    }

    /// `log p(x_{0:N}) - log q(x_{1:N} | x_0)` per path.
    pub fn log_ratios(&self, prop: &Proposal) -> Vec<f64> {
        exec::map_indexed(self.len(), |m| self.log_prior[m] + self.log_p_rev(m, prop) - self.log_q_cond[m])
    }
}

/// Forward-noise each `x0s[m]` with `seeds.stream(m)` and cache residuals.
pub fn forward_paths(seeds: &SeedTree, model: &dyn ScoreModel, grid: &TimeGrid, geometry: &Geometry, target: &TargetSpec, x0s: &[DVector<f64>]) -> Result<ForwardPaths> {
    check_dim(geometry.dim(), model.dim())?;
    check_dim(geometry.dim(), target.dim())?;
    let rows = exec::try_map_indexed(x0s.len(), |m| -> Result<(f64, f64, f64, Vec<DVector<f64>>)> {
        let mut rng = seeds.stream(m as u64);
        let traj = forward_sample_trajectory(&mut rng, &x0s[m], grid, geometry)?;
        let mut deltas = Vec::with_capacity(grid.steps());
        for n in 1..=grid.steps() {
            let x = &traj.states[n];
            let x0_hat = denoise_checked(model, x, grid.t(n), n)?;
            let mean = geometry.recentre(posterior_mean(x, &x0_hat, grid.shrink(n)));
            deltas.push(geometry.reduce(&(&traj.states[n - 1] - mean)));
        }
        Ok((target.log_density(traj.states[0].as_slice()), traj.log_q_cond, traj.log_prior, deltas))
    })?;
    let mut out = ForwardPaths { log_pi: vec![], log_q_cond: vec![], log_prior: vec![], deltas: vec![] };
    for (a, b, c, d) in rows {
        out.log_pi.push(a);
        out.log_q_cond.push(b);
        out.log_prior.push(c);
        out.deltas.push(d);
    }
    Ok(out)
}
