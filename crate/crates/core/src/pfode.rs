//! Probability-flow ODE sampling and likelihoods.
//!
//! The flow is `dx/dt = f(x, t) = -t s(x, t)` and the log-density obeys
//! `d log p(x(t)) / dt = -div f`. Heun steps on a [`TimeGrid`] integrate the
//! state, and the divergence is integrated in the same pass by the trapezoid
//! rule in `ln t`, which is exact for the `1/t` tail of the VE flow.
//! Hutchinson probes are drawn once per step and shared by both Heun stages.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DVector;
use rand::Rng;

use crate::diffusion::Geometry;
use crate::error::{check_dim, invalid, Error, Result};
use crate::exec;
use crate::gaussian::standard_normal;
use crate::metrics::{forward_ess, reverse_ess};
use crate::rng::SeedTree;
use crate::schedule::TimeGrid;
use crate::score::ScoreModel;
use crate::targets::TargetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDist {
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceMode {
    /// Trace over a basis of the state space, or a closed form when the backend has one.
    Exact,
    Hutchinson { probes: usize, dist: ProbeDist },
}

impl DivergenceMode {
    pub fn tag(&self) -> String {
        match self {
            DivergenceMode::Exact => "exact".into(),
            DivergenceMode::Hutchinson { probes, dist } => {
                let d = match dist {
                    ProbeDist::Rademacher => "rademacher",
                    ProbeDist::Gaussian => "gaussian",
                };
                format!("hutchinson-{d}-{probes}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeDirection {
    /// `t_0 -> T`.
    ToNoise,
    /// `T -> t_0`.
    ToData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OdeRunConfig {
    pub mode: DivergenceMode,
    pub direction: OdeDirection,
}

impl OdeRunConfig {
    pub fn exact(direction: OdeDirection) -> Self {
        Self { mode: DivergenceMode::Exact, direction }
    }
}

/// Evaluation counts for one integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OdeCost {
    pub score_evals: u64,
    /// Directional derivatives spent on divergences.
    pub jvps: u64,
}

impl OdeCost {
    /// Cost proxy in score-evaluation units.
    pub fn total(&self) -> u64 {
        self.score_evals + self.jvps
    }

    fn add(&mut self, o: OdeCost) {
        self.score_evals += o.score_evals;
        self.jvps += o.jvps;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeResult {
    pub state: DVector<f64>,
    /// `integral of div f dt` in the direction of integration.
    pub divergence_integral: f64,
    pub cost: OdeCost,
}

fn check_config(grid: &TimeGrid, cfg: &OdeRunConfig) -> Result<()> {
    if grid.steps() < 2 {
        return Err(invalid("the ODE needs at least two steps"));
    }
    if let DivergenceMode::Hutchinson { probes: 0, .. } = cfg.mode {
        return Err(invalid("Hutchinson needs at least one probe"));
    }
    Ok(())
}

/// Vectors whose quadratic forms sum to the trace on the state space.
fn basis(geometry: &Geometry) -> Vec<DVector<f64>> {
    let k = geometry.intrinsic_dim();
    (0..k)
        .map(|i| {
            let mut e = DVector::zeros(k);
            e[i] = 1.0;
            geometry.lift(e)
        })
        .collect()
}

fn draw_probes<R: Rng + ?Sized>(rng: &mut R, geometry: &Geometry, count: usize, dist: ProbeDist) -> Vec<DVector<f64>> {
    let k = geometry.intrinsic_dim();
    (0..count)
        .map(|_| {
            let z = match dist {
                ProbeDist::Rademacher => DVector::from_fn(k, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }),
                ProbeDist::Gaussian => standard_normal(rng, k),
            };
            geometry.lift(z)
        })
        .collect()
}

/// Velocity `-t s` and `div(-t s)` at one point.
fn velocity_and_div(
    model: &dyn ScoreModel,
    geometry: &Geometry,
    x: &DVector<f64>,
    t: f64,
    mode: DivergenceMode,
    probes: &[DVector<f64>],
    cost: &mut OdeCost,
) -> Result<(DVector<f64>, f64)> {
    let xs = x.as_slice();
    let d = geometry.intrinsic_dim() as u64;
    let (score, tr) = match mode {
        DivergenceMode::Exact => {
            let closed = match geometry {
                Geometry::Euclidean(_) => model.exact_score_divergence(xs, t),
                Geometry::ZeroCom(_) => None,
            };
            cost.jvps += d;
            match closed {
                Some(tr) => {
                    cost.score_evals += 1;
                    (model.score(xs, t)?, tr)
                }
                None => {
                    let mut s = None;
                    let mut tr = 0.0;
                    for u in basis(geometry) {
                        let (sc, ju) = model.score_jvp(xs, t, u.as_slice())?;
                        tr += u.dot(&ju);
                        s.get_or_insert(sc);
                    }
                    cost.score_evals += 1;
                    (s.expect("state space is non-empty"), tr)
                }
            }
        }
        DivergenceMode::Hutchinson { .. } => {
            let mut s = None;
            let mut acc = 0.0;
            for z in probes {
                let (sc, jz) = model.score_jvp(xs, t, z.as_slice())?;
                acc += z.dot(&jz);
                s.get_or_insert(sc);
            }
            cost.score_evals += 1;
            cost.jvps += probes.len() as u64;
            (s.expect("at least one probe"), acc / probes.len() as f64)
        }
    };
    Ok((score * (-t), -t * tr))
}

/// Heun integration along the grid, co-integrating `div f`.
///
/// `probe_rng` is consulted only in Hutchinson mode.
pub fn heun_integrate<R: Rng + ?Sized>(
    start: &DVector<f64>,
    model: &dyn ScoreModel,
    geometry: &Geometry,
    grid: &TimeGrid,
    cfg: &OdeRunConfig,
    probe_rng: &mut R,
) -> Result<OdeResult> {
    check_config(grid, cfg)?;
    check_dim(geometry.dim(), model.dim())?;
    let mut x = geometry.admit(start)?;
    let times: Vec<f64> = match cfg.direction {
        OdeDirection::ToNoise => grid.times().to_vec(),
        OdeDirection::ToData => grid.times().iter().rev().copied().collect(),
    };
    let mut cost = OdeCost::default();
    let mut integral = 0.0;
    for (k, w) in times.windows(2).enumerate() {
        let (ta, tb) = (w[0], w[1]);
        let h = tb - ta;
        let probes = match cfg.mode {
            DivergenceMode::Exact => Vec::new(),
            DivergenceMode::Hutchinson { probes, dist } => draw_probes(probe_rng, geometry, probes, dist),
        };
        let (f1, d1) = velocity_and_div(model, geometry, &x, ta, cfg.mode, &probes, &mut cost)?;
        let pred = &x + &f1 * h;
        let (f2, d2) = velocity_and_div(model, geometry, &pred, tb, cfg.mode, &probes, &mut cost)?;
        x += (f1 + f2) * (0.5 * h);
        integral += 0.5 * (tb / ta).ln() * (ta * d1 + tb * d2);
        if !x.iter().all(|v| v.is_finite()) || !integral.is_finite() {
            return Err(Error::Numerical { step: k + 1, reason: "ODE state became non-finite".into() });
        }
    }
    Ok(OdeResult { state: x, divergence_integral: integral, cost })
}

fn log_prior(geometry: &Geometry, grid: &TimeGrid, x: &DVector<f64>) -> f64 {
    let t = grid.t_max();
    geometry.iso_log_density(x.as_slice(), t * t)
}

/// `log p_0(x0)` by integrating `x0` up to `T`.
pub fn ode_log_likelihood<R: Rng + ?Sized>(
    x0: &DVector<f64>,
    model: &dyn ScoreModel,
    geometry: &Geometry,
    grid: &TimeGrid,
    mode: DivergenceMode,
    probe_rng: &mut R,
) -> Result<(f64, OdeCost)> {
    let cfg = OdeRunConfig { mode, direction: OdeDirection::ToNoise };
    let r = heun_integrate(x0, model, geometry, grid, &cfg, probe_rng)?;
    Ok((log_prior(geometry, grid, &r.state) + r.divergence_integral, r.cost))
}

/// One ODE sample with its model log-density from the same reverse pass.
pub fn ode_sample<R: Rng + ?Sized>(
    rng: &mut R,
    model: &dyn ScoreModel,
    geometry: &Geometry,
    grid: &TimeGrid,
    mode: DivergenceMode,
) -> Result<(DVector<f64>, f64, OdeCost)> {
    let x_t = geometry.noise(rng) * grid.t_max();
    let lp_t = log_prior(geometry, grid, &x_t);
    let cfg = OdeRunConfig { mode, direction: OdeDirection::ToData };
    let r = heun_integrate(&x_t, model, geometry, grid, &cfg, rng)?;
    Ok((r.state, lp_t - r.divergence_integral, r.cost))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeIsRow {
    pub log_p0: f64,
    pub log_pi: f64,
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeIsReport {
    pub samples: Vec<DVector<f64>>,
    pub rows: Vec<OdeIsRow>,
    pub mode: DivergenceMode,
    pub ess: f64,
    /// Mean cost per sample.
    pub cost_per_sample: OdeCost,
    /// Set when weights rest on stochastic divergence estimates.
    pub biased: bool,
    pub warning: Option<String>,
}

fn bias_flag(mode: DivergenceMode) -> (bool, Option<String>) {
    match mode {
        DivergenceMode::Exact => (false, None),
        DivergenceMode::Hutchinson { probes, .. } => (
            true,
            Some(format!(
                "Hutchinson divergence with {probes} probe(s): log-weights are exponentiated noisy estimates, so importance weights are biased"
            )),
        ),
    }
}

fn report(samples: Vec<DVector<f64>>, rows: Vec<OdeIsRow>, costs: Vec<OdeCost>, mode: DivergenceMode, forward: bool) -> Result<OdeIsReport> {
    let lw: Vec<f64> = rows.iter().map(|r| r.log_weight).collect();
    let ess = if forward { forward_ess(&lw)? } else { reverse_ess(&lw)? };
    let mut total = OdeCost::default();
    for c in &costs {
        total.add(*c);
    }
    let n = costs.len().max(1) as u64;
    let (biased, warning) = bias_flag(mode);
    Ok(OdeIsReport {
        samples,
        rows,
        mode,
        ess,
        cost_per_sample: OdeCost { score_evals: total.score_evals / n, jvps: total.jvps / n },
        biased,
        warning,
    })
}

fn row(target: &TargetSpec, x: &DVector<f64>, log_p0: f64) -> OdeIsRow {
    let log_pi = target.log_density(x.as_slice());
    let lw = log_pi - log_p0;
    OdeIsRow { log_p0, log_pi, log_weight: if lw.is_nan() { f64::NEG_INFINITY } else { lw } }
}

/// `count` reverse-ODE samples weighted by `pi / p_0`; sample `i` uses `seeds.stream(i)`.
pub fn ode_is_weights(
    seeds: &SeedTree,
    model: &dyn ScoreModel,
    target: &TargetSpec,
    grid: &TimeGrid,
    mode: DivergenceMode,
    count: usize,
) -> Result<OdeIsReport> {
    let geometry = Geometry::for_target(target)?;
    let out = exec::try_map_indexed(count, |i| ode_sample(&mut seeds.stream(i as u64), model, &geometry, grid, mode))?;
    let mut samples = Vec::with_capacity(count);
    let mut rows = Vec::with_capacity(count);
    let mut costs = Vec::with_capacity(count);
    for (x, lp, c) in out {
        rows.push(row(target, &x, lp));
        samples.push(x);
        costs.push(c);
    }
    report(samples, rows, costs, mode, false)
}

/// Weights `pi / p_0` on target samples, for the forward ESS.
pub fn ode_forward_weights(
    seeds: &SeedTree,
    model: &dyn ScoreModel,
    target: &TargetSpec,
    grid: &TimeGrid,
    mode: DivergenceMode,
    data: &[DVector<f64>],
) -> Result<OdeIsReport> {
    let geometry = Geometry::for_target(target)?;
    let out = exec::try_map_indexed(data.len(), |i| ode_log_likelihood(&data[i], model, &geometry, grid, mode, &mut seeds.stream(i as u64)))?;
    let mut rows = Vec::with_capacity(data.len());
    let mut costs = Vec::with_capacity(data.len());
    for (x, (lp, c)) in data.iter().zip(out) {
        rows.push(row(target, x, lp));
        costs.push(c);
    }
    report(data.to_vec(), rows, costs, mode, true)
}

/// `index,log_p0,log_pi,log_weight,divergence` rows.
pub fn write_results_csv<W: Write>(mut w: W, rep: &OdeIsReport) -> Result<()> {
    let mut s = String::from("index,log_p0,log_pi,log_weight,divergence\n");
    let tag = rep.mode.tag();
    for (i, r) in rep.rows.iter().enumerate() {
        writeln!(s, "{i},{:e},{:e},{:e},{tag}", r.log_p0, r.log_pi, r.log_weight).unwrap();
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::geometric_grid;
    use crate::score::AnalyticGmm;
    use crate::targets::Gmm;

    /// Hides the closed-form divergence so the basis path runs.
    struct Opaque(AnalyticGmm);

    impl ScoreModel for Opaque {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn denoise(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
            self.0.denoise(x, t)
        }
        fn denoise_jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
            self.0.denoise_jvp(x, t, v)
        }
    }

    struct Identity(usize);

    impl ScoreModel for Identity {
        fn dim(&self) -> usize {
            self.0
        }
        fn denoise(&self, x: &[f64], _t: f64) -> Result<DVector<f64>> {
            Ok(DVector::from_column_slice(x))
        }
        fn denoise_jvp(&self, x: &[f64], _t: f64, v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
            Ok((DVector::from_column_slice(x), DVector::from_column_slice(v)))
        }
    }

    fn rng() -> crate::rng::Rng {
        SeedTree::new(0).rng()
    }

    #[test]
    fn gaussian_flow_matches_closed_form() {
        let var = 0.6;
        let model = AnalyticGmm::new(Gmm::gaussian(1, var).unwrap());
        let geom = Geometry::Euclidean(1);
        let err = |steps: usize| {
            let grid = geometric_grid(steps, 1e-3, 50.0).unwrap();
            let x_t = DVector::from_element(1, 37.0);
            let r = heun_integrate(&x_t, &model, &geom, &grid, &OdeRunConfig::exact(OdeDirection::ToData), &mut rng()).unwrap();
            assert_eq!(r.cost, OdeCost { score_evals: 2 * steps as u64, jvps: 2 * steps as u64 });
            (r.state[0] - 37.0 * ((var + 1e-6) / (var + 2500.0)).sqrt()).abs()
        };
        let (e200, e400) = (err(200), err(400));
        assert!(e200 < 3e-4, "{e200}");
        assert!(e400 < 1e-4, "{e400}");
        assert!((e200 / e400 - 4.0).abs() < 0.5, "second order: {e200} / {e400}");
    }

    #[test]
    fn identity_denoiser_is_a_fixed_point() {
        let grid = geometric_grid(10, 1e-2, 5.0).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let r = heun_integrate(&x, &Identity(3), &Geometry::Euclidean(3), &grid, &OdeRunConfig::exact(OdeDirection::ToNoise), &mut rng()).unwrap();
        assert_eq!(r.state, x);
        assert_eq!(r.divergence_integral, 0.0);
    }

    #[test]
    fn round_trip_returns_the_start() {
        let grid = geometric_grid(200, 1e-2, 20.0).unwrap();
        let model = AnalyticGmm::new(Gmm::two_mode(2).unwrap());
        let geom = Geometry::Euclidean(2);
        let x = DVector::from_vec(vec![0.8, 1.3]);
        let up = heun_integrate(&x, &model, &geom, &grid, &OdeRunConfig::exact(OdeDirection::ToNoise), &mut rng()).unwrap();
        let down = heun_integrate(&up.state, &model, &geom, &grid, &OdeRunConfig::exact(OdeDirection::ToData), &mut rng()).unwrap();
        assert!((down.state - x).amax() < 1e-3);
        assert!((up.divergence_integral + down.divergence_integral).abs() < 1e-3);
    }

    #[test]
    fn gaussian_likelihood_is_near_exact() {
        let var = 0.6;
        let grid = geometric_grid(400, 1e-3, 100.0).unwrap();
        let gmm = Gmm::gaussian(2, var).unwrap();
        let model = AnalyticGmm::new(gmm.clone());
        let geom = Geometry::Euclidean(2);
        for x in [[0.0, 0.0], [1.0, -0.5], [2.0, 1.5]] {
            let x = DVector::from_column_slice(&x);
            let (lp, _) = ode_log_likelihood(&x, &model, &geom, &grid, DivergenceMode::Exact, &mut rng()).unwrap();
            // the flow transports N(0, var + t0^2) to N(0, var + T^2); the prior is N(0, T^2)
            let pt = |s: f64| -(LN2PI + s.ln()) - x.norm_squared() / (2.0 * s);
            let t0 = 1e-3f64;
            let ratio = ((var + t0 * t0) / (var + 1e4)).sqrt();
            let y2 = x.norm_squared() / ratio.powi(2);
            let prior_err = (-(LN2PI + 1e4f64.ln()) - y2 / 2e4) - (-(LN2PI + (var + 1e4).ln()) - y2 / (2.0 * (var + 1e4)));
            let truth = pt(var + t0 * t0) + prior_err;
            // the divergence integral is exact to quadrature error; the state carries Heun's O(h^2) error into the prior term
            let tol = 1e-6 + 2e-4 * x.norm_squared() / var;
            assert!((lp - truth).abs() < tol, "{lp} vs {truth}");
        }
    }

    const LN2PI: f64 = crate::gaussian::LN_2PI;

    #[test]
    fn exact_modes_agree() {
        let grid = geometric_grid(30, 1e-2, 10.0).unwrap();
        let gmm = Gmm::two_mode(3).unwrap();
        let geom = Geometry::Euclidean(3);
        let x = DVector::from_vec(vec![0.2, 0.9, -0.4]);
        let (a, ca) = ode_log_likelihood(&x, &AnalyticGmm::new(gmm.clone()), &geom, &grid, DivergenceMode::Exact, &mut rng()).unwrap();
        let (b, cb) = ode_log_likelihood(&x, &Opaque(AnalyticGmm::new(gmm)), &geom, &grid, DivergenceMode::Exact, &mut rng()).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert_eq!(ca, cb);
        assert_eq!(ca.jvps, 2 * 30 * 3);
    }

    #[test]
    fn hutchinson_averages_to_exact() {
        let grid = geometric_grid(20, 1e-2, 10.0).unwrap();
        let gmm = Gmm::two_mode(3).unwrap();
        let model = AnalyticGmm::new(gmm);
        let geom = Geometry::Euclidean(3);
        let x = DVector::from_vec(vec![0.2, 0.9, -0.4]);
        let (exact, _) = ode_log_likelihood(&x, &model, &geom, &grid, DivergenceMode::Exact, &mut rng()).unwrap();
        let mode = DivergenceMode::Hutchinson { probes: 1, dist: ProbeDist::Rademacher };
        let mut r = SeedTree::new(3).rng();
        let n = 4000;
        let runs: Vec<f64> = (0..n).map(|_| ode_log_likelihood(&x, &model, &geom, &grid, mode, &mut r).unwrap().0).collect();
        let mean = runs.iter().sum::<f64>() / n as f64;
        let sd = (runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean} vs {exact} (sd {sd})");
        assert!(sd > 0.0);
    }

    #[test]
    fn is_report_flags_bias_and_counts_cost() {
        let grid = geometric_grid(10, 1e-2, 10.0).unwrap();
        let gmm = Gmm::two_mode(2).unwrap();
        let target = TargetSpec::Gmm(gmm.clone());
        let model = AnalyticGmm::new(gmm);
        let tree = SeedTree::new(5);
        let mode = DivergenceMode::Hutchinson { probes: 1, dist: ProbeDist::Rademacher };
        let rep = ode_is_weights(&tree, &model, &target, &grid, mode, 16).unwrap();
        assert!(rep.biased && rep.warning.is_some());
        assert_eq!(rep.cost_per_sample, OdeCost { score_evals: 20, jvps: 20 });
        let exact = ode_is_weights(&tree, &model, &target, &grid, DivergenceMode::Exact, 16).unwrap();
        assert!(!exact.biased && exact.warning.is_none());
        assert_eq!(exact.cost_per_sample.jvps, 40);
        assert!((0.0..=1.0).contains(&exact.ess));
        let seq = exec::sequential(|| ode_is_weights(&tree, &model, &target, &grid, DivergenceMode::Exact, 16).unwrap());
        assert_eq!(seq, exact);
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &rep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.lines().nth(1).unwrap().ends_with(",hutchinson-rademacher-1"));
    }

    #[test]
    fn particle_divergence_uses_the_subspace() {
        use crate::targets::Dw4Params;
        let target = TargetSpec::Dw4(Dw4Params::default());
        let geom = Geometry::for_target(&target).unwrap();
        // identity-minus-shrink denoiser: score = -x / (1 + t^2) on the subspace, trace = -(M - 1) n / (1 + t^2)
        struct Shrink;
        impl ScoreModel for Shrink {
            fn dim(&self) -> usize {
                8
            }
            fn denoise(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
                let x = DVector::from_column_slice(x);
                Ok(&x - &x * (t * t / (1.0 + t * t)))
            }
            fn denoise_jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
                let v = DVector::from_column_slice(v);
                Ok((self.denoise(x, t)?, &v - &v * (t * t / (1.0 + t * t))))
            }
        }
        let x = geom.noise(&mut rng());
        let mut cost = OdeCost::default();
        let (_, div) = velocity_and_div(&Shrink, &geom, &x, 0.5, DivergenceMode::Exact, &[], &mut cost).unwrap();
        assert!((div - 0.5 * 6.0 / 1.25).abs() < 1e-12);
        assert_eq!(cost.jvps, 6);
        let grid = geometric_grid(5, 0.1, 2.0).unwrap();
        assert!(heun_integrate(&x, &Shrink, &geom, &grid, &OdeRunConfig { mode: DivergenceMode::Hutchinson { probes: 0, dist: ProbeDist::Gaussian }, direction: OdeDirection::ToNoise }, &mut rng()).is_err());
    }
}
