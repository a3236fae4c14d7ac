//! Isotropic Gaussian mixtures and their variance-exploding marginals.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{check_dim, invalid, Result};
use crate::gaussian::{logsumexp, standard_normal, LN_2PI};

/// `sum_k w_k N(mu_k, sigma_k^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

/// Per-component quantities of the noised mixture at one point.
struct Responsibilities {
    /// Posterior component probabilities.
    r: Vec<f64>,
    /// Component scores `-(x - mu_k) / s_k`.
    g: Vec<DVector<f64>>,
    /// Inflated variances `sigma_k^2 + t^2`.
    s: Vec<f64>,
    log_density: f64,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(invalid("mixture needs matching, non-empty weights, means and variances"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("mixture weights must be non-negative and sum to one"));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("mixture variances must be positive"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("mixture dimension must be positive"));
        }
        for m in &means {
            check_dim(dim, m.len())?;
        }
        Ok(Self { weights, means, variances, dim })
    }

    /// Two modes at `(1, .., 1)` and `(-2, .., -2)`, variance 0.15, weights 2/3 and 1/3.
    pub fn two_mode(dim: usize) -> Result<Self> {
        Self::new(
            vec![2.0 / 3.0, 1.0 / 3.0],
            vec![DVector::from_element(dim, 1.0), DVector::from_element(dim, -2.0)],
            vec![0.15, 0.15],
        )
    }

    /// A single centred component.
    pub fn gaussian(dim: usize, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![DVector::zeros(dim)], vec![variance])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Per-coordinate variance of the mixture averaged over coordinates.
    pub fn data_std(&self) -> f64 {
        let mean = self.mean();
        let mut second = 0.0;
        for k in 0..self.weights.len() {
            second += self.weights[k] * (self.variances[k] * self.dim as f64 + (&self.means[k] - &mean).norm_squared());
        }
        (second / self.dim as f64).sqrt()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.means.iter().zip(&self.weights).fold(DVector::zeros(self.dim), |acc, (m, w)| acc + m * *w)
    }

    fn responsibilities(&self, x: &[f64], t: f64) -> Responsibilities {
        let d = self.dim as f64;
        let k = self.weights.len();
        let mut logs = Vec::with_capacity(k);
        let mut g = Vec::with_capacity(k);
        let mut s = Vec::with_capacity(k);
        for c in 0..k {
            let sk = self.variances[c] + t * t;
            let diff = DVector::from_fn(self.dim, |i, _| x[i] - self.means[c][i]);
            let q = diff.norm_squared() / sk;
            logs.push(self.weights[c].ln() - 0.5 * (d * (LN_2PI + sk.ln()) + q));
            g.push(diff / -sk);
            s.push(sk);
        }
        let lse = logsumexp(&logs);
        let r = logs.iter().map(|l| (l - lse).exp()).collect();
        Responsibilities { r, g, s, log_density: lse }
    }

    /// `log p_t(x)` for the mixture convolved with `N(0, t^2 I)`.
    pub fn noised_log_density(&self, x: &[f64], t: f64) -> f64 {
        self.responsibilities(x, t).log_density
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.noised_log_density(x, 0.0)
    }

    /// `grad log p_t(x)`.
    pub fn noised_score(&self, x: &[f64], t: f64) -> DVector<f64> {
        let resp = self.responsibilities(x, t);
        resp.g.iter().zip(&resp.r).fold(DVector::zeros(self.dim), |acc, (g, r)| acc + g * *r)
    }

    /// Score and `J v` in one pass, `J` the score Jacobian.
    pub fn noised_score_jvp(&self, x: &[f64], t: f64, v: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let resp = self.responsibilities(x, t);
        let v = DVector::from_column_slice(v);
        let s = resp.g.iter().zip(&resp.r).fold(DVector::zeros(self.dim), |acc, (g, r)| acc + g * *r);
        let mut jv = -&s * s.dot(&v);
        for c in 0..resp.r.len() {
            jv += (&resp.g[c] * resp.g[c].dot(&v) - &v / resp.s[c]) * resp.r[c];
        }
        (s, jv)
    }

    /// Exact trace of the score Jacobian.
    pub fn noised_score_divergence(&self, x: &[f64], t: f64) -> f64 {
        let resp = self.responsibilities(x, t);
        let d = self.dim as f64;
        let mut s = DVector::zeros(self.dim);
        let mut tr = 0.0;
        for c in 0..resp.r.len() {
            tr += resp.r[c] * (-d / resp.s[c] + resp.g[c].norm_squared());
            s += &resp.g[c] * resp.r[c];
        }
        tr - s.norm_squared()
    }

    /// Posterior mean `E[x_0 | x_t = x]`, by Tweedie.
    pub fn denoise(&self, x: &[f64], t: f64) -> DVector<f64> {
        DVector::from_column_slice(x) + self.noised_score(x, t) * (t * t)
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = self.weights.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                c = k;
                break;
            }
        }
        &self.means[c] + standard_normal(rng, self.dim) * self.variances[c].sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<DVector<f64>> {
        (0..count).map(|_| self.sample_one(rng)).collect()
    }
}

/// `log sum_k w_k N(x; mu_k, sigma_k^2 I)`.
pub fn gmm_log_density(x: &DVector<f64>, gmm: &Gmm) -> Result<f64> {
    check_dim(gmm.dim(), x.len())?;
    Ok(gmm.log_density(x.as_slice()))
}

pub fn gmm_sample<R: Rng + ?Sized>(rng: &mut R, gmm: &Gmm, count: usize) -> Vec<DVector<f64>> {
    gmm.sample(rng, count)
}

pub fn gmm_noised_score(x: &DVector<f64>, t: f64, gmm: &Gmm) -> Result<DVector<f64>> {
    check_dim(gmm.dim(), x.len())?;
    if !(t >= 0.0) {
        return Err(invalid(format!("noise level must be non-negative, got {t}")));
    }
    Ok(gmm.noised_score(x.as_slice(), t))
}

pub fn gmm_noised_score_divergence(x: &DVector<f64>, t: f64, gmm: &Gmm) -> Result<f64> {
    check_dim(gmm.dim(), x.len())?;
    if !(t >= 0.0) {
        return Err(invalid(format!("noise level must be non-negative, got {t}")));
    }
    Ok(gmm.noised_score_divergence(x.as_slice(), t))
}
