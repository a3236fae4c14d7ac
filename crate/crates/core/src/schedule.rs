//! Time discretisations of `[eps, T]`.

use crate::error::{invalid, Result};

/// `eps = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Validate an explicit sequence of times.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid("a time grid needs at least two points"));
        }
        if !(times[0].is_finite() && times[0] > 0.0) {
            return Err(invalid(format!("grid must start at a positive time, got {}", times[0])));
        }
        for w in times.windows(2) {
            if !(w[1].is_finite() && w[1] > w[0]) {
                return Err(invalid(format!("grid must be strictly increasing ({} then {})", w[0], w[1])));
            }
        }
        Ok(Self { times })
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, n: usize) -> f64 {
        self.times[n]
    }

    pub fn eps(&self) -> f64 {
        self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        self.times[self.steps()]
    }

    /// `t_n^2 - t_{n-1}^2`, for `n >= 1`.
    pub fn forward_var(&self, n: usize) -> f64 {
        let (a, b) = (self.times[n - 1], self.times[n]);
        (b - a) * (b + a)
    }

    /// `t_{n-1}^2 (t_n^2 - t_{n-1}^2) / t_n^2`, for `n >= 1`.
    pub fn ddpm_var(&self, n: usize) -> f64 {
        self.shrink(n) * self.forward_var(n)
    }

    /// `t_{n-1}^2 / t_n^2`, the weight of `x_n` in the posterior mean.
    pub fn shrink(&self, n: usize) -> f64 {
        let r = self.times[n - 1] / self.times[n];
        r * r
    }
}

/// Karras-style grid, interpolated in `t^(1/rho)` and increasing from `eps`.
pub fn karras_grid(steps: usize, eps: f64, t_max: f64, rho: f64) -> Result<TimeGrid> {
    check_args(steps, eps, t_max)?;
    if !(rho.is_finite() && rho > 0.0) {
        return Err(invalid(format!("rho must be positive, got {rho}")));
    }
    let (lo, hi) = (eps.powf(1.0 / rho), t_max.powf(1.0 / rho));
    let mut times: Vec<f64> = (0..=steps)
        .map(|n| {
            let base = lo + (n as f64 / steps as f64) * (hi - lo);
            (rho * base.ln()).exp()
        })
        .collect();
    times[0] = eps;
    times[steps] = t_max;
    TimeGrid::from_times(times)
}

/// `t_n = eps (T / eps)^(n / N)`.
pub fn geometric_grid(steps: usize, eps: f64, t_max: f64) -> Result<TimeGrid> {
    check_args(steps, eps, t_max)?;
    let log_ratio = (t_max / eps).ln();
    let mut times: Vec<f64> = (0..=steps).map(|n| eps * (log_ratio * n as f64 / steps as f64).exp()).collect();
    times[steps] = t_max;
    TimeGrid::from_times(times)
}

fn check_args(steps: usize, eps: f64, t_max: f64) -> Result<()> {
    if steps == 0 {
        return Err(invalid("grid needs at least one step"));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(invalid(format!("eps must be positive, got {eps}")));
    }
    if !(t_max.is_finite() && eps < t_max) {
        return Err(invalid(format!("need eps < T, got eps = {eps}, T = {t_max}")));
    }
    Ok(())
}

/// Grid recipe as stored in run configurations.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Geometric { steps: usize, eps: f64, t_max: f64 },
    Karras { steps: usize, eps: f64, t_max: f64, rho: f64 },
}

impl GridSpec {
    pub fn build(&self) -> Result<TimeGrid> {
        match *self {
            GridSpec::Geometric { steps, eps, t_max } => geometric_grid(steps, eps, t_max),
            GridSpec::Karras { steps, eps, t_max, rho } => karras_grid(steps, eps, t_max, rho),
        }
    }

    pub fn with_steps(&self, n: usize) -> Self {
        match *self {
            GridSpec::Geometric { eps, t_max, .. } => GridSpec::Geometric { steps: n, eps, t_max },
            GridSpec::Karras { eps, t_max, rho, .. } => GridSpec::Karras { steps: n, eps, t_max, rho },
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Geometric { steps: 100, eps: 1e-3, t_max: 1e2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_karras() {
        let g = karras_grid(2, 1.0, 3.0, 1.0).unwrap();
        assert_eq!(g.times(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn karras_approaches_geometric() {
        let k = karras_grid(10, 1e-3, 1e2, 1e6).unwrap();
        let g = geometric_grid(10, 1e-3, 1e2).unwrap();
        let gap = k.times().iter().zip(g.times()).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-3, "gap {gap}");
    }

    #[test]
    fn geometric_ratios() {
        let g = geometric_grid(4, 0.01, 100.0).unwrap();
        for w in g.times().windows(2) {
            assert!((w[1] / w[0] - 10.0).abs() < 1e-12);
        }
        assert_eq!(geometric_grid(1, 0.5, 2.0).unwrap().times(), &[0.5, 2.0]);
        let logs: Vec<f64> = g.times().iter().map(|t| t.ln()).collect();
        let d0 = logs[1] - logs[0];
        for w in logs.windows(2) {
            assert!((w[1] - w[0] - d0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(geometric_grid(4, 2.0, 1.0).is_err());
        assert!(karras_grid(4, 1.0, 1.0, 7.0).is_err());
        assert!(karras_grid(0, 0.1, 1.0, 7.0).is_err());
        assert!(karras_grid(3, 0.1, 1.0, 0.0).is_err());
        assert!(TimeGrid::from_times(vec![0.1, 0.1]).is_err());
    }

    #[test]
    fn ddpm_example() {
        let g = TimeGrid::from_times(vec![1.0, 2.0]).unwrap();
        assert_eq!(g.ddpm_var(1), 0.75);
        assert_eq!(g.forward_var(1), 3.0);
    }

    proptest! {
        #[test]
        fn grid_invariants(steps in 1usize..60, eps in 1e-4f64..1.0, span in 1.5f64..1e4, rho in 0.5f64..20.0) {
            let t_max = eps * span;
            for g in [karras_grid(steps, eps, t_max, rho).unwrap(), geometric_grid(steps, eps, t_max).unwrap()] {
                prop_assert_eq!(g.t(0), eps);
                prop_assert_eq!(g.t_max(), t_max);
                let total: f64 = (1..=steps).map(|n| g.forward_var(n)).sum();
                prop_assert!((total - (t_max * t_max - eps * eps)).abs() <= 1e-9 * t_max * t_max);
                for n in 1..=steps {
                    prop_assert!(g.forward_var(n) > 0.0);
                    prop_assert!(g.ddpm_var(n) > 0.0);
                    prop_assert!(g.ddpm_var(n) < g.forward_var(n));
                }
            }
        }
    }
}
