//! Weight diagnostics: effective sample sizes, normalising constants, the
//! ELBO/EUBO sandwich and reweighted histograms. All reductions run in log
//! space.

use nalgebra::DVector;

use crate::diffusion::{forward_paths, Geometry, Proposal};
use crate::error::{check_dim, invalid, Error, Result};
use crate::exec;
use crate::gaussian::{logsumexp, softmax};
use crate::rng::SeedTree;
use crate::score::ScoreModel;
use crate::targets::TargetSpec;

/// Which distribution the samples were drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    FromTarget,
    FromProposal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSampleSet {
    pub samples: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
    pub direction: Direction,
}

impl WeightedSampleSet {
    pub fn new(samples: Vec<DVector<f64>>, log_weights: Vec<f64>, direction: Direction) -> Result<Self> {
        check_log_weights(&log_weights)?;
        check_dim(log_weights.len(), samples.len())?;
        Ok(Self { samples, log_weights, direction })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }
}

/// Non-empty, and every entry finite or `-inf`.
pub fn check_log_weights(log_w: &[f64]) -> Result<()> {
    if log_w.is_empty() {
        return Err(invalid("no weights"));
    }
    if log_w.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::NonFinite("log weights"));
    }
    Ok(())
}

/// `(sum w)^2 / (N sum w^2)` for samples drawn from the proposal.
pub fn reverse_ess(log_w: &[f64]) -> Result<f64> {
    check_log_weights(log_w)?;
    let n = log_w.len() as f64;
    let lse = logsumexp(log_w);
    if lse == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let sq: Vec<f64> = log_w.iter().map(|w| 2.0 * w).collect();
    Ok((2.0 * lse - n.ln() - logsumexp(&sq)).exp().clamp(0.0, 1.0))
}

/// `N^2 / (sum 1/w * sum w)` for samples drawn from the target.
pub fn forward_ess(log_w: &[f64]) -> Result<f64> {
    check_log_weights(log_w)?;
    if log_w.contains(&f64::NEG_INFINITY) {
        return Ok(0.0);
    }
    let n = log_w.len() as f64;
    let neg: Vec<f64> = log_w.iter().map(|w| -w).collect();
    Ok((2.0 * n.ln() - logsumexp(&neg) - logsumexp(log_w)).exp().clamp(0.0, 1.0))
}

/// ESS in the direction the set was drawn from.
pub fn ess(set: &WeightedSampleSet) -> Result<f64> {
    match set.direction {
        Direction::FromProposal => reverse_ess(&set.log_weights),
        Direction::FromTarget => forward_ess(&set.log_weights),
    }
}

/// `log mean(w)` for samples drawn from the proposal.
pub fn estimate_log_z(log_w: &[f64]) -> Result<f64> {
    check_log_weights(log_w)?;
    Ok(logsumexp(log_w) - (log_w.len() as f64).ln())
}

/// Self-normalised estimate of `E_pi[f]`.
pub fn self_normalized_mean(set: &WeightedSampleSet, f: impl Fn(&DVector<f64>) -> f64 + Sync) -> Result<f64> {
    if set.direction != Direction::FromProposal {
        return Err(invalid("self-normalised estimates need samples from the proposal"));
    }
    let w = softmax(&set.log_weights);
    let terms = exec::map_indexed(set.len(), |i| if w[i] == 0.0 { 0.0 } else { w[i] * f(&set.samples[i]) });
    Ok(exec::pairwise_sum(&terms))
}

/// Counts over equal-width bins on `[lo, hi)` plus out-of-range tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Sample fractions per bin.
    pub unweighted: Vec<f64>,
    /// Normalised-weight mass per bin.
    pub weighted: Vec<f64>,
    /// `[below, above]` for each of the two.
    pub overflow_unweighted: [f64; 2],
    pub overflow_weighted: [f64; 2],
}

/// Histogram of `values` over `[lo, hi)`; `None` range spans the finite values.
pub fn reweighted_histogram(values: &[f64], log_w: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    check_log_weights(log_w)?;
    check_dim(log_w.len(), values.len())?;
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    let (lo, hi) = match range {
        Some(r) => r,
        None => {
            let finite = values.iter().filter(|v| v.is_finite());
            let lo = finite.clone().fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = finite.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if !lo.is_finite() {
                return Err(Error::NonFinite("histogram values"));
            }
            // widen so the maximum lands inside the last bin
            let pad = ((hi - lo) * 1e-9).max(1e-12);
            (lo, hi + pad)
        }
    };
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(invalid(format!("histogram range [{lo}, {hi}) is empty")));
    }
    let width = (hi - lo) / bins as f64;
    let w = softmax(log_w);
    let n = values.len() as f64;
    let mut h = Histogram {
        edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
        unweighted: vec![0.0; bins],
        weighted: vec![0.0; bins],
        overflow_unweighted: [0.0; 2],
        overflow_weighted: [0.0; 2],
    };
    for (&v, &wi) in values.iter().zip(&w) {
        if v < lo || v.is_nan() {
            h.overflow_unweighted[0] += 1.0 / n;
            h.overflow_weighted[0] += wi;
        } else if v >= hi {
            h.overflow_unweighted[1] += 1.0 / n;
            h.overflow_weighted[1] += wi;
        } else {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            h.unweighted[b] += 1.0 / n;
            h.weighted[b] += wi;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sandwich {
    pub elbo: f64,
    pub eubo: f64,
    /// Standard deviations across repetitions.
    pub elbo_std: f64,
    pub eubo_std: f64,
}

/// Per-point ELBO and EUBO from `ell_k = log p(x_{0:N}) - log q(x_{1:N} | x_0)`.
pub fn elbo_eubo_from_ratios(ell: &[f64]) -> Result<(f64, f64)> {
    if ell.len() < 2 {
        return Err(invalid("the EUBO needs at least two inner samples"));
    }
    if ell.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("path log ratios"));
    }
    let elbo = exec::pairwise_sum(ell) / ell.len() as f64;
    let u = softmax(ell);
    let eubo = u.iter().zip(ell).map(|(u, l)| if *u == 0.0 { 0.0 } else { u * l }).sum::<f64>();
    Ok((elbo, eubo.max(elbo)))
}

/// ELBO and EUBO averaged over `data`, repeated `reps` times with fresh noise.
///
/// Repetition `r` noises `data[i]` for inner sample `k` with
/// `seeds.child(r).stream(i * inner + k)`.
pub fn elbo_eubo(
    seeds: &SeedTree,
    model: &dyn ScoreModel,
    prop: &Proposal,
    target: &TargetSpec,
    data: &[DVector<f64>],
    inner: usize,
    reps: usize,
) -> Result<Sandwich> {
    if data.is_empty() || reps == 0 {
        return Err(invalid("ELBO/EUBO needs data and at least one repetition"));
    }
    if inner < 2 {
        return Err(invalid("the EUBO needs at least two inner samples"));
    }
    let geometry: &Geometry = prop.geometry();
    let expanded: Vec<DVector<f64>> = data.iter().flat_map(|x| std::iter::repeat_n(x.clone(), inner)).collect();
    let mut elbos = Vec::with_capacity(reps);
    let mut eubos = Vec::with_capacity(reps);
    for r in 0..reps {
        let paths = forward_paths(&seeds.child(r as u64), model, prop.grid(), geometry, target, &expanded)?;
        let ell = paths.log_ratios(prop);
        let per_point = ell.chunks(inner).map(elbo_eubo_from_ratios).collect::<Result<Vec<_>>>()?;
        let n = per_point.len() as f64;
        elbos.push(per_point.iter().map(|p| p.0).sum::<f64>() / n);
        eubos.push(per_point.iter().map(|p| p.1).sum::<f64>() / n);
    }
    let (elbo, elbo_std) = mean_std(&elbos);
    let (eubo, eubo_std) = mean_std(&eubos);
    Ok(Sandwich { elbo, eubo, elbo_std, eubo_std })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}
