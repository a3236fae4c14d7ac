//! Denoisers `x0_hat(x, t)` and the scores they induce.
//!
//! Every backend is defined through its denoiser; the score is always
//! `(x0_hat - x) / t^2`, so the Tweedie identity holds by construction.

mod checkpoint;
mod mlp;
mod network;
mod train;

use nalgebra::DVector;

use crate::error::{invalid, Error, Result};
use crate::targets::Gmm;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use mlp::{Mlp, MlpCache};
pub use network::{Architecture, ScoreNet};
pub use train::{estimate_sigma_data, train_dsm, TrainConfig, TrainReport};

/// A frozen denoiser.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `x0_hat(x, t)`.
    fn denoise(&self, x: &[f64], t: f64) -> Result<DVector<f64>>;

    /// Denoiser and its directional derivative along `v`.
    fn denoise_jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)>;

    /// Closed-form `tr(d score / dx)` when the backend has one.
    fn exact_score_divergence(&self, _x: &[f64], _t: f64) -> Option<f64> {
        None
    }

    fn score(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        check_time(t)?;
        let d = self.denoise(x, t)?;
        Ok((d - DVector::from_column_slice(x)) / (t * t))
    }

    /// Score and `J_s v`.
    fn score_jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        check_time(t)?;
        let (d, dd) = self.denoise_jvp(x, t, v)?;
        let t2 = t * t;
        Ok(((d - DVector::from_column_slice(x)) / t2, (dd - DVector::from_column_slice(v)) / t2))
    }
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("noise level must be positive, got {t}")))
    }
}

pub(crate) fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// EDM preconditioning constants at noise level `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(t: f64, sigma_data: f64) -> Self {
        let s2 = sigma_data * sigma_data;
        let r = (t * t + s2).sqrt();
        Self { c_skip: s2 / (t * t + s2), c_out: t * sigma_data / r, c_in: 1.0 / r, c_noise: 0.25 * t.ln() }
    }
}

/// Exact posterior-mean denoiser of a Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGmm {
    pub gmm: Gmm,
}

impl AnalyticGmm {
    pub fn new(gmm: Gmm) -> Self {
        Self { gmm }
    }
}

impl ScoreModel for AnalyticGmm {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn denoise(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        let d = self.gmm.denoise(x, t);
        check_finite(&d, "analytic denoiser")?;
        Ok(d)
    }

    fn denoise_jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let (s, js) = self.gmm.noised_score_jvp(x, t, v);
        let t2 = t * t;
        let d = DVector::from_column_slice(x) + s * t2;
        let dd = DVector::from_column_slice(v) + js * t2;
        check_finite(&d, "analytic denoiser")?;
        Ok((d, dd))
    }

    fn exact_score_divergence(&self, x: &[f64], t: f64) -> Option<f64> {
        Some(self.gmm.noised_score_divergence(x, t))
    }

    fn score(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        check_time(t)?;
        Ok(self.gmm.noised_score(x, t))
    }
}

/// `x0_hat(x, t) = x + t^2 score(x, t)` for an explicit mixture.
pub fn analytic_gmm_denoiser(x: &DVector<f64>, t: f64, gmm: &Gmm) -> Result<DVector<f64>> {
    crate::error::check_dim(gmm.dim(), x.len())?;
    if !(t >= 0.0) {
        return Err(invalid(format!("noise level must be non-negative, got {t}")));
    }
    Ok(gmm.denoise(x.as_slice(), t))
}
