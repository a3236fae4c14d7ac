//! Metropolis-adjusted Langevin sampling for targets without exact samplers.

use nalgebra::DVector;
use rand::Rng;

use super::TargetSpec;
use crate::equivariant::com_project;
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::gaussian::standard_normal;
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Iterations between retained states.
    pub thin: usize,
    pub initial_step: f64,
    pub target_accept: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { chains: 8, burn_in: 5000, thin: 10, initial_step: 1e-3, target_accept: 0.574 }
    }
}

#[derive(Debug, Clone)]
pub struct McmcReport {
    pub samples: Vec<DVector<f64>>,
    /// Post-burn-in acceptance rate over all chains.
    pub acceptance: f64,
    pub step_sizes: Vec<f64>,
    pub warning: Option<String>,
}

/// Acceptance probability `min(1, exp(log_ratio))`.
pub fn mh_accept_prob(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

struct Chain<'a> {
    target: &'a TargetSpec,
    x: DVector<f64>,
    log_p: f64,
    grad: DVector<f64>,
}

impl<'a> Chain<'a> {
    fn new(target: &'a TargetSpec, x: DVector<f64>) -> Self {
        let log_p = target.log_density_clamped(x.as_slice());
        let grad = Self::project(target, target.grad_log_density(x.as_slice()));
        Self { target, x, log_p, grad }
    }

    fn project(target: &TargetSpec, v: DVector<f64>) -> DVector<f64> {
        match target.particle_shape() {
            Some((m, n)) => com_project(&v, m, n),
            None => v,
        }
    }

    /// One MALA transition; returns the acceptance probability.
    fn step<R: Rng + ?Sized>(&mut self, rng: &mut R, h: f64) -> f64 {
        let noise = Self::project(self.target, standard_normal(rng, self.x.len()));
        let y = &self.x + &self.grad * h + noise * (2.0 * h).sqrt();
        let log_py = self.target.log_density_clamped(y.as_slice());
        let grad_y = Self::project(self.target, self.target.grad_log_density(y.as_slice()));
        if !log_py.is_finite() || grad_y.iter().any(|g| !g.is_finite()) {
            let _: f64 = rng.random();
            return 0.0;
        }
        let fwd = (&y - &self.x - &self.grad * h).norm_squared();
        let bwd = (&self.x - &y - &grad_y * h).norm_squared();
        let log_ratio = log_py - self.log_p + (fwd - bwd) / (4.0 * h);
        let a = mh_accept_prob(log_ratio);
        let u: f64 = rng.random();
        if u < a {
            self.x = y;
            self.log_p = log_py;
            self.grad = grad_y;
        }
        a
    }
}

/// A low-energy starting configuration.
fn initial_state<R: Rng + ?Sized>(target: &TargetSpec, rng: &mut R) -> DVector<f64> {
    let x = match target {
        TargetSpec::Gmm(g) => return g.sample_one(rng),
        TargetSpec::Dw4(p) => {
            let side = p.d0 + 1.5;
            DVector::from_fn(p.particles * p.spatial, |k, _| {
                let (i, c) = (k / p.spatial, k % p.spatial);
                let cell = if c == 0 { i % 2 } else if c == 1 { (i / 2) % 2 } else { i / 4 };
                cell as f64 * side + rng.random_range(-0.1..0.1)
            })
        }
        TargetSpec::Lj13(p) => {
            let side = (p.particles as f64).cbrt().ceil() as usize;
            DVector::from_fn(p.particles * p.spatial, |k, _| {
                let (i, c) = (k / p.spatial, k % p.spatial);
                let cell = (i / side.pow(c as u32)) % side;
                cell as f64 * p.r_m + rng.random_range(-0.05..0.05)
            })
        }
    };
    let (m, n) = target.particle_shape().unwrap_or((1, x.len()));
    com_project(&x, m, n)
}

/// Draw `count` thinned states from independent MALA chains.
///
/// Step sizes adapt toward `target_accept` during burn-in and are frozen
/// afterwards, so retained states come from a fixed Markov kernel.
pub fn mcmc_sample(seeds: &SeedTree, target: &TargetSpec, count: usize, cfg: &McmcConfig) -> Result<McmcReport> {
    if cfg.chains == 0 || cfg.thin == 0 || !(cfg.initial_step > 0.0) {
        return Err(invalid("MCMC needs at least one chain, thin >= 1 and a positive step"));
    }
    if count == 0 {
        return Err(invalid("MCMC sample count must be positive"));
    }
    let per_chain = count.div_ceil(cfg.chains);
    let runs = exec::try_map_indexed(cfg.chains, |c| -> Result<(Vec<DVector<f64>>, f64, f64)> {
        let mut rng = seeds.stream(c as u64);
        let mut chain = Chain::new(target, initial_state(target, &mut rng));
        let mut log_h = cfg.initial_step.ln();
        for k in 0..cfg.burn_in {
            let a = chain.step(&mut rng, log_h.exp());
            let rate = 1.0 / (1.0 + k as f64 / 100.0).sqrt();
            log_h += 0.5 * rate * (a - cfg.target_accept);
        }
        let h = log_h.exp();
        let mut accepted = 0.0;
        let mut out = Vec::with_capacity(per_chain);
        for k in 0..per_chain * cfg.thin {
            accepted += chain.step(&mut rng, h);
            if (k + 1) % cfg.thin == 0 {
                if chain.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical { step: k, reason: format!("chain {c} left the finite domain") });
                }
                out.push(chain.x.clone());
            }
        }
        Ok((out, accepted / (per_chain * cfg.thin) as f64, h))
    })?;
    let acceptance = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
    let step_sizes = runs.iter().map(|r| r.2).collect();
    let mut samples: Vec<DVector<f64>> = runs.into_iter().flat_map(|r| r.0).collect();
    samples.truncate(count);
    let warning = (!(0.1..=0.9).contains(&acceptance)).then(|| format!("MCMC acceptance {acceptance:.3} outside [0.1, 0.9]"));
    Ok(McmcReport { samples, acceptance, step_sizes, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant::ComProjection;
    use crate::targets::{Dw4Params, Gmm};

    #[test]
    fn metropolis_kernel_preserves_stationary_law() {
        // 3-state toy with an asymmetric proposal
        let pi = [0.2f64, 0.5, 0.3];
        let q = [[0.0, 0.7, 0.3], [0.4, 0.0, 0.6], [0.5, 0.5, 0.0]];
        let mut t = [[0.0; 3]; 3];
        for i in 0..3 {
            let mut stay = 1.0;
            for j in 0..3 {
                if i != j {
                    let a = mh_accept_prob((pi[j] * q[j][i] / (pi[i] * q[i][j])).ln());
                    t[i][j] = q[i][j] * a;
                    stay -= t[i][j];
                }
            }
            t[i][i] = stay;
        }
        for j in 0..3 {
            let flow: f64 = (0..3).map(|i| pi[i] * t[i][j]).sum();
            assert!((flow - pi[j]).abs() < 1e-15);
            for i in 0..3 {
                assert!((pi[i] * t[i][j] - pi[j] * t[j][i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gaussian_variance_recovered() {
        let target = TargetSpec::Gmm(Gmm::gaussian(2, 0.8).unwrap());
        let cfg = McmcConfig { chains: 4, burn_in: 2000, thin: 5, initial_step: 0.1, ..McmcConfig::default() };
        let rep = mcmc_sample(&SeedTree::new(3), &target, 40_000, &cfg).unwrap();
        assert_eq!(rep.samples.len(), 40_000);
        let var = rep.samples.iter().map(|x| x.norm_squared()).sum::<f64>() / (2.0 * rep.samples.len() as f64);
        assert!((var / 0.8 - 1.0).abs() < 0.05, "{var}");
        assert!(rep.warning.is_none(), "{:?}", rep.warning);
    }

    #[test]
    fn particle_chains_stay_centred_and_are_reproducible() {
        let target = TargetSpec::Dw4(Dw4Params::default());
        let cfg = McmcConfig { chains: 2, burn_in: 500, thin: 2, ..McmcConfig::default() };
        let a = mcmc_sample(&SeedTree::new(9), &target, 200, &cfg).unwrap();
        let b = exec::sequential(|| mcmc_sample(&SeedTree::new(9), &target, 200, &cfg).unwrap());
        let p = ComProjection::new(4, 2).unwrap();
        for x in &a.samples {
            assert!(p.com_norm(x.as_slice()) < 1e-12);
        }
        assert_eq!(a.samples, b.samples);
        assert!((0.3..0.8).contains(&a.acceptance), "{}", a.acceptance);
    }

    #[test]
    fn rejects_bad_configs() {
        let target = TargetSpec::Gmm(Gmm::gaussian(1, 1.0).unwrap());
        let cfg = McmcConfig { chains: 0, ..McmcConfig::default() };
        assert!(mcmc_sample(&SeedTree::new(1), &target, 10, &cfg).is_err());
        assert!(mcmc_sample(&SeedTree::new(1), &target, 0, &McmcConfig::default()).is_err());
    }
}
