//! Structured Gaussian densities.
//!
//! Every covariance here has the form `base_variance * S` where `S` is one of
//! a handful of structures (isotropic, diagonal, Cholesky factor, low rank plus
//! ridge, particle-block Kronecker). Densities, draws and gradients use the
//! structure directly; no dense `d x d` factorisation is formed except for the
//! Kronecker block, whose factor is only `M x M`.
//!
//! Gradients come in two layers. [`PreparedCov::log_density_and_grad`] returns
//! the gradient with respect to the structure itself ([`StructureGrad`]);
//! [`Parameterization::chain`] pulls that back to the unconstrained raw vector
//! through the softplus positivity maps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, invalid, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sum(exp(v)))` with a max shift. All `-inf` (or empty) gives `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Softmax computed alongside [`logsumexp`].
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = logsumexp(values);
    values.iter().map(|v| (v - lse).exp()).collect()
}

/// Covariance structure, multiplied by a [`CovarianceSpec`] base variance.
#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    Isotropic { eta: f64, dim: usize },
    Diagonal { etas: DVector<f64> },
    /// `S = L L^T`; only the lower triangle of `factor` is read.
    FullFactor { factor: DMatrix<f64> },
    /// `S = A A^T + alpha I`.
    LowRank { a: DMatrix<f64>, alpha: f64 },
    /// `S = B (x) I_n` acting on `M` particles in `n` spatial dimensions.
    KronBlock { b: DMatrix<f64>, spatial_dim: usize },
}

impl Structure {
    pub fn dim(&self) -> usize {
        match self {
            Structure::Isotropic { dim, .. } => *dim,
            Structure::Diagonal { etas } => etas.len(),
            Structure::FullFactor { factor } => factor.nrows(),
            Structure::LowRank { a, .. } => a.nrows(),
            Structure::KronBlock { b, spatial_dim } => b.nrows() * spatial_dim,
        }
    }

    /// Dense `S` (without the base variance).
    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Structure::Isotropic { eta, dim } => DMatrix::identity(*dim, *dim) * *eta,
            Structure::Diagonal { etas } => DMatrix::from_diagonal(etas),
            Structure::FullFactor { factor } => {
                let l = factor.lower_triangle();
                &l * l.transpose()
            }
            Structure::LowRank { a, alpha } => {
                a * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * *alpha
            }
            Structure::KronBlock { b, spatial_dim } => {
                b.kronecker(&DMatrix::identity(*spatial_dim, *spatial_dim))
            }
        }
    }
}

/// One per-step proposal covariance: `base_variance * structure`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub structure: Structure,
    pub base_variance: f64,
}

impl CovarianceSpec {
    pub fn new(structure: Structure, base_variance: f64) -> Result<Self> {
        if !(base_variance.is_finite() && base_variance > 0.0) {
            return Err(invalid(format!("base variance must be positive, got {base_variance}")));
        }
        Ok(Self { structure, base_variance })
    }

    pub fn isotropic(dim: usize, eta: f64, base_variance: f64) -> Result<Self> {
        Self::new(Structure::Isotropic { eta, dim }, base_variance)
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.structure.dense() * self.base_variance
    }

    /// Factorise once for repeated evaluation.
    pub fn prepare(&self) -> Result<PreparedCov> {
        PreparedCov::new(self)
    }
}

/// Gradient of a log-density with respect to a [`Structure`].
#[derive(Debug, Clone, PartialEq)]
pub enum StructureGrad {
    Isotropic(f64),
    Diagonal(DVector<f64>),
    /// Lower-triangular gradient with respect to `L`.
    FullFactor(DMatrix<f64>),
    LowRank { a: DMatrix<f64>, alpha: f64 },
    /// Symmetric gradient with respect to `B`.
    KronBlock(DMatrix<f64>),
}

#[derive(Debug, Clone)]
enum Factor {
    Isotropic { var: f64, eta: f64 },
    Diagonal { vars: Vec<f64>, etas: Vec<f64> },
    FullFactor { l: DMatrix<f64> },
    LowRank { a: DMatrix<f64>, alpha: f64, k_inv: DMatrix<f64>, k_chol: DMatrix<f64> },
    KronBlock { chol: DMatrix<f64>, inv: DMatrix<f64>, particles: usize, spatial: usize },
}

/// A covariance with its factorisation cached.
#[derive(Debug, Clone)]
pub struct PreparedCov {
    dim: usize,
    base: f64,
    log_norm: f64,
    factor: Factor,
}

impl PreparedCov {
    pub fn new(spec: &CovarianceSpec) -> Result<Self> {
        let base = spec.base_variance;
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("base variance {base}")));
        }
        let dim = spec.dim();
        let (factor, log_det_s) = match &spec.structure {
            Structure::Isotropic { eta, dim } => {
                positive("eta", *eta)?;
                (Factor::Isotropic { var: base * eta, eta: *eta }, *dim as f64 * eta.ln())
            }
            Structure::Diagonal { etas } => {
                for &e in etas.iter() {
                    positive("eta_i", e)?;
                }
                let ld = etas.iter().map(|e| e.ln()).sum();
                (
                    Factor::Diagonal {
                        vars: etas.iter().map(|e| base * e).collect(),
                        etas: etas.iter().copied().collect(),
                    },
                    ld,
                )
            }
            Structure::FullFactor { factor } => {
                if !factor.is_square() {
                    return Err(invalid("full factor must be square"));
                }
                let l = factor.lower_triangle();
                let mut log_diag = 0.0;
                for i in 0..l.nrows() {
                    let v = l[(i, i)].abs();
                    if !(v.is_finite() && v > 0.0) {
                        return Err(Error::NotPositiveDefinite(format!("factor diagonal {i} is {v}")));
                    }
                    log_diag += v.ln();
                }
                (Factor::FullFactor { l }, 2.0 * log_diag)
            }
            Structure::LowRank { a, alpha } => {
                positive("alpha", *alpha)?;
                let (d, k) = a.shape();
                let kmat = a.transpose() * a + DMatrix::identity(k, k) * *alpha;
                let chol = kmat
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("low-rank core".into()))?;
                let k_chol = chol.l();
                let log_det_k: f64 = 2.0 * (0..k).map(|i| k_chol[(i, i)].ln()).sum::<f64>();
                let k_inv = chol.inverse();
                let log_det_s = (d as f64 - k as f64) * alpha.ln() + log_det_k;
                (Factor::LowRank { a: a.clone(), alpha: *alpha, k_inv, k_chol }, log_det_s)
            }
            Structure::KronBlock { b, spatial_dim } => {
                if !b.is_square() || *spatial_dim == 0 {
                    return Err(invalid("block matrix must be square with spatial_dim >= 1"));
                }
                let m = b.nrows();
                let asym = (b - b.transpose()).amax();
                if !(asym <= 1e-10 * b.amax().max(1.0)) {
                    return Err(Error::NotPositiveDefinite(format!("block matrix asymmetric by {asym:e}")));
                }
                let chol = b
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("block matrix".into()))?;
                let l = chol.l();
                let log_det_b: f64 = 2.0 * (0..m).map(|i| l[(i, i)].ln()).sum::<f64>();
                let inv = chol.inverse();
                (
                    Factor::KronBlock { chol: l, inv, particles: m, spatial: *spatial_dim },
                    *spatial_dim as f64 * log_det_b,
                )
            }
        };
        if !log_det_s.is_finite() {
            return Err(Error::NotPositiveDefinite("non-finite log determinant".into()));
        }
        let log_det = dim as f64 * base.ln() + log_det_s;
        Ok(Self { dim, base, log_norm: -0.5 * (dim as f64 * LN_2PI + log_det), factor })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log det Sigma`.
    pub fn log_det(&self) -> f64 {
        -2.0 * self.log_norm - self.dim as f64 * LN_2PI
    }

    /// `delta^T Sigma^{-1} delta`.
    pub fn mahalanobis(&self, delta: &[f64]) -> f64 {
        let b = self.base;
        match &self.factor {
            Factor::Isotropic { var, .. } => sq_norm(delta) / var,
            Factor::Diagonal { vars, .. } => delta.iter().zip(vars).map(|(d, v)| d * d / v).sum(),
            Factor::FullFactor { l, .. } => {
                let u = forward_subst(l, delta);
                sq_norm(&u) / b
            }
            Factor::LowRank { a, alpha, k_chol, .. } => {
                let at_d = a.tr_mul(&DVector::from_column_slice(delta));
                let w = forward_subst(k_chol, at_d.as_slice());
                (sq_norm(delta) - sq_norm(&w)) / (alpha * b)
            }
            Factor::KronBlock { chol, particles, spatial, .. } => {
                let mut total = 0.0;
                let mut col = vec![0.0; *particles];
                for c in 0..*spatial {
                    for (i, v) in col.iter_mut().enumerate() {
                        *v = delta[i * spatial + c];
                    }
                    total += sq_norm(&forward_subst(chol, &col));
                }
                total / b
            }
        }
    }

    /// Log-density of a zero-mean Gaussian at `delta`, no input checks.
    pub fn log_density_centered(&self, delta: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis(delta)
    }

    pub fn log_density(&self, x: &[f64], mean: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, mean.len())?;
        if !x.iter().chain(mean).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian input"));
        }
        let delta: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        Ok(self.log_density_centered(&delta))
    }

    /// Log-density at `delta` and its gradient with respect to the structure.
    pub fn log_density_and_grad(&self, delta: &[f64]) -> (f64, StructureGrad) {
        let b = self.base;
        let d = self.dim as f64;
        match &self.factor {
            Factor::Isotropic { var, eta } => {
                let q = sq_norm(delta) / var;
                let g = -d / (2.0 * eta) + q / (2.0 * eta);
                (self.log_norm - 0.5 * q, StructureGrad::Isotropic(g))
            }
            Factor::Diagonal { vars, etas } => {
                let mut q = 0.0;
                let g = DVector::from_iterator(
                    delta.len(),
                    delta.iter().zip(vars).zip(etas).map(|((x, v), e)| {
                        let qi = x * x / v;
                        q += qi;
                        (qi - 1.0) / (2.0 * e)
                    }),
                );
                (self.log_norm - 0.5 * q, StructureGrad::Diagonal(g))
            }
            Factor::FullFactor { l, .. } => {
                let n = l.nrows();
                let u = forward_subst(l, delta);
                let z = backward_subst_transpose(l, &u);
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..=i {
                        g[(i, j)] = z[i] * u[j] / b;
                    }
                    g[(i, i)] -= 1.0 / l[(i, i)];
                }
                (self.log_norm - 0.5 * sq_norm(&u) / b, StructureGrad::FullFactor(g))
            }
            Factor::LowRank { a, alpha, k_inv, .. } => {
                let k = a.ncols();
                let dv = DVector::from_column_slice(delta);
                let at_d = a.tr_mul(&dv);
                let kinv_atd = k_inv * &at_d;
                // S^{-1} delta
                let s_inv_d = (&dv - a * &kinv_atd) / *alpha;
                let q = dv.dot(&s_inv_d) / b;
                let v = &s_inv_d / b; // Sigma^{-1} delta
                let at_v = a.tr_mul(&v);
                let s_inv_a = a * k_inv;
                let grad_a = &v * at_v.transpose() * b - s_inv_a;
                let tr_s_inv = (d - k as f64 + alpha * k_inv.trace()) / alpha;
                let grad_alpha = 0.5 * b * v.norm_squared() - 0.5 * tr_s_inv;
                (self.log_norm - 0.5 * q, StructureGrad::LowRank { a: grad_a, alpha: grad_alpha })
            }
            Factor::KronBlock { inv, particles, spatial, .. } => {
                let m = *particles;
                let n = *spatial;
                let delta_m = DMatrix::from_row_slice(m, n, delta);
                let w = inv * &delta_m; // B^{-1} Delta
                let q = delta_m.dot(&w) / b;
                let g = (&w * w.transpose()) * (0.5 / b) - inv * (0.5 * n as f64);
                (self.log_norm - 0.5 * q, StructureGrad::KronBlock(g))
            }
        }
    }

    /// Zero-mean draw with covariance `Sigma`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let sb = self.base.sqrt();
        match &self.factor {
            Factor::Isotropic { var, .. } => {
                let s = var.sqrt();
                DVector::from_fn(self.dim, |_, _| s * rng.sample::<f64, _>(StandardNormal))
            }
            Factor::Diagonal { vars, .. } => {
                DVector::from_iterator(self.dim, vars.iter().map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal)))
            }
            Factor::FullFactor { l, .. } => {
                let z = standard_normal(rng, self.dim);
                l * z * sb
            }
            Factor::LowRank { a, alpha, .. } => {
                let zk = standard_normal(rng, a.ncols());
                let zd = standard_normal(rng, self.dim);
                (a * zk + zd * alpha.sqrt()) * sb
            }
            Factor::KronBlock { chol, particles, spatial, .. } => {
                let z = DMatrix::from_fn(*particles, *spatial, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = chol * z * sb;
                // particle-major flattening
                DVector::from_iterator(self.dim, (0..*particles).flat_map(|i| (0..*spatial).map(move |c| (i, c))).map(|(i, c)| y[(i, c)]))
            }
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite(format!("{name} = {v}")))
    }
}

pub(crate) fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Solve `L u = b` for lower-triangular `L`.
fn forward_subst(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut u = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for (j, uj) in u.iter().enumerate().take(i) {
            s -= l[(i, j)] * uj;
        }
        u[i] = s / l[(i, i)];
    }
    u
}

/// Solve `L^T z = u` for lower-triangular `L`.
fn backward_subst_transpose(l: &DMatrix<f64>, u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = u[i];
        for (j, zj) in z.iter().enumerate().skip(i + 1) {
            s -= l[(j, i)] * zj;
        }
        z[i] = s / l[(i, i)];
    }
    z
}

/// `log N(x; mean, Sigma)`.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &CovarianceSpec) -> Result<f64> {
    cov.prepare()?.log_density(x.as_slice(), mean.as_slice())
}

/// One draw from `N(mean, Sigma)`.
pub fn gaussian_sample<R: Rng + ?Sized>(rng: &mut R, mean: &DVector<f64>, cov: &CovarianceSpec) -> Result<DVector<f64>> {
    check_dim(cov.dim(), mean.len())?;
    Ok(mean + cov.prepare()?.sample_noise(rng))
}

/// How a per-step raw vector maps to a [`Structure`].
#[derive(Debug, Clone, PartialEq)]
pub enum Parameterization {
    Isotropic { dim: usize },
    Diagonal { dim: usize },
    FullFactor { dim: usize },
    LowRank { dim: usize, rank: usize },
    /// `B = (b - a) I + a 11^T`, raw values are softplus-inverse eigenvalues
    /// `b - a` and `b + (M - 1) a`.
    Exchangeable { particles: usize, spatial: usize },
    /// `B = diag(eta_{L_1}, ..., eta_{L_M})`.
    LabelDiagonal { labels: Vec<usize>, classes: usize, spatial: usize },
    /// `B_ij = (A A^T)_{L_i L_j} + alpha delta_ij` with `A` of size `K x K`.
    LabelBlock { labels: Vec<usize>, classes: usize, spatial: usize },
}

/// Unconstrained parameters for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParams(pub Vec<f64>);

impl Parameterization {
    pub fn num_params(&self) -> usize {
        match self {
            Parameterization::Isotropic { .. } => 1,
            Parameterization::Diagonal { dim } => *dim,
            Parameterization::FullFactor { dim } => dim * (dim + 1) / 2,
            Parameterization::LowRank { dim, rank } => dim * rank + 1,
            Parameterization::Exchangeable { .. } => 2,
            Parameterization::LabelDiagonal { classes, .. } => *classes,
            Parameterization::LabelBlock { classes, .. } => classes * classes + 1,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Parameterization::Isotropic { dim }
            | Parameterization::Diagonal { dim }
            | Parameterization::FullFactor { dim }
            | Parameterization::LowRank { dim, .. } => *dim,
            Parameterization::Exchangeable { particles, spatial } => particles * spatial,
            Parameterization::LabelDiagonal { labels, spatial, .. }
            | Parameterization::LabelBlock { labels, spatial, .. } => labels.len() * spatial,
        }
    }

    /// Short tag used in parameter files.
    pub fn tag(&self) -> &'static str {
        match self {
            Parameterization::Isotropic { .. } => "isotropic",
            Parameterization::Diagonal { .. } => "diagonal",
            Parameterization::FullFactor { .. } => "full",
            Parameterization::LowRank { .. } => "lowrank",
            Parameterization::Exchangeable { .. } => "exchangeable",
            Parameterization::LabelDiagonal { .. } => "label-diagonal",
            Parameterization::LabelBlock { .. } => "label-block",
        }
    }

    /// Raw vector reproducing the identity structure (the DDPM baseline).
    pub fn baseline_raw(&self) -> RawParams {
        let one = softplus_inv(1.0);
        let v = match self {
            Parameterization::Isotropic { .. } => vec![one],
            Parameterization::Diagonal { dim } => vec![one; *dim],
            Parameterization::FullFactor { dim } => {
                let mut v = Vec::with_capacity(self.num_params());
                for i in 0..*dim {
                    for j in 0..=i {
                        v.push(if i == j { one } else { 0.0 });
                    }
                }
                v
            }
            Parameterization::LowRank { dim, rank } => {
                let mut v = vec![0.0; dim * rank];
                v.push(one);
                v
            }
            Parameterization::Exchangeable { .. } => vec![one, one],
            Parameterization::LabelDiagonal { classes, .. } => vec![one; *classes],
            Parameterization::LabelBlock { classes, .. } => {
                let mut v = vec![0.0; classes * classes];
                v.push(one);
                v
            }
        };
        RawParams(v)
    }

    fn check_raw(&self, raw: &RawParams) -> Result<()> {
        check_dim(self.num_params(), raw.0.len())?;
        if raw.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("raw covariance parameters"))
        }
    }

    pub fn structure(&self, raw: &RawParams) -> Result<Structure> {
        self.check_raw(raw)?;
        let r = &raw.0;
        Ok(match self {
            Parameterization::Isotropic { dim } => Structure::Isotropic { eta: softplus(r[0]), dim: *dim },
            Parameterization::Diagonal { dim } => {
                Structure::Diagonal { etas: DVector::from_iterator(*dim, r.iter().map(|&x| softplus(x))) }
            }
            Parameterization::FullFactor { dim } => {
                let mut l = DMatrix::zeros(*dim, *dim);
                let mut k = 0;
                for i in 0..*dim {
                    for j in 0..=i {
                        l[(i, j)] = if i == j { softplus(r[k]) } else { r[k] };
                        k += 1;
                    }
                }
                Structure::FullFactor { factor: l }
            }
            Parameterization::LowRank { dim, rank } => Structure::LowRank {
                a: DMatrix::from_row_slice(*dim, *rank, &r[..dim * rank]),
                alpha: softplus(r[dim * rank]),
            },
            Parameterization::Exchangeable { particles, spatial } => {
                let m = *particles;
                let (l1, l2) = (softplus(r[0]), softplus(r[1]));
                let j = DMatrix::from_element(m, m, 1.0 / m as f64);
                let b = (DMatrix::identity(m, m) - &j) * l1 + j * l2;
                Structure::KronBlock { b, spatial_dim: *spatial }
            }
            Parameterization::LabelDiagonal { labels, classes, spatial } => {
                check_labels(labels, *classes)?;
                let etas: Vec<f64> = r.iter().map(|&x| softplus(x)).collect();
                let b = DMatrix::from_diagonal(&DVector::from_iterator(labels.len(), labels.iter().map(|&l| etas[l])));
                Structure::KronBlock { b, spatial_dim: *spatial }
            }
            Parameterization::LabelBlock { labels, classes, spatial } => {
                check_labels(labels, *classes)?;
                let k = *classes;
                let a = DMatrix::from_row_slice(k, k, &r[..k * k]);
                let aat = &a * a.transpose();
                let alpha = softplus(r[k * k]);
                let m = labels.len();
                let b = DMatrix::from_fn(m, m, |i, j| aat[(labels[i], labels[j])] + if i == j { alpha } else { 0.0 });
                Structure::KronBlock { b, spatial_dim: *spatial }
            }
        })
    }

    /// Pull a structure gradient back to the raw vector.
    pub fn chain(&self, raw: &RawParams, grad: &StructureGrad) -> Result<Vec<f64>> {
        self.check_raw(raw)?;
        let r = &raw.0;
        let mismatch = || invalid(format!("gradient kind does not match {} parameterization", self.tag()));
        Ok(match (self, grad) {
            (Parameterization::Isotropic { .. }, StructureGrad::Isotropic(g)) => vec![g * sigmoid(r[0])],
            (Parameterization::Diagonal { .. }, StructureGrad::Diagonal(g)) => {
                g.iter().zip(r).map(|(g, x)| g * sigmoid(*x)).collect()
            }
            (Parameterization::FullFactor { dim }, StructureGrad::FullFactor(g)) => {
                let mut out = Vec::with_capacity(r.len());
                let mut k = 0;
                for i in 0..*dim {
                    for j in 0..=i {
                        out.push(if i == j { g[(i, j)] * sigmoid(r[k]) } else { g[(i, j)] });
                        k += 1;
                    }
                }
                out
            }
            (Parameterization::LowRank { dim, rank }, StructureGrad::LowRank { a, alpha }) => {
                let mut out = Vec::with_capacity(r.len());
                for i in 0..*dim {
                    for j in 0..*rank {
                        out.push(a[(i, j)]);
                    }
                }
                out.push(alpha * sigmoid(r[dim * rank]));
                out
            }
            (Parameterization::Exchangeable { particles, .. }, StructureGrad::KronBlock(g)) => {
                let m = *particles as f64;
                let total = g.sum();
                let g1 = g.trace() - total / m;
                let g2 = total / m;
                vec![g1 * sigmoid(r[0]), g2 * sigmoid(r[1])]
            }
            (Parameterization::LabelDiagonal { labels, classes, .. }, StructureGrad::KronBlock(g)) => {
                let mut out = vec![0.0; *classes];
                for (i, &l) in labels.iter().enumerate() {
                    out[l] += g[(i, i)];
                }
                out.iter().zip(r).map(|(g, x)| g * sigmoid(*x)).collect()
            }
            (Parameterization::LabelBlock { labels, classes, .. }, StructureGrad::KronBlock(g)) => {
                let k = *classes;
                let mut h = DMatrix::<f64>::zeros(k, k);
                for (i, &li) in labels.iter().enumerate() {
                    for (j, &lj) in labels.iter().enumerate() {
                        h[(li, lj)] += g[(i, j)];
                    }
                }
                let a = DMatrix::from_row_slice(k, k, &r[..k * k]);
                let ga = (&h + h.transpose()) * a;
                let mut out = Vec::with_capacity(r.len());
                for i in 0..k {
                    for j in 0..k {
                        out.push(ga[(i, j)]);
                    }
                }
                out.push(g.trace() * sigmoid(r[k * k]));
                out
            }
            _ => return Err(mismatch()),
        })
    }

    /// Gradient of `log N(x; mean, base * S(raw))` with respect to `raw`.
    pub fn grad_log_density(&self, x: &DVector<f64>, mean: &DVector<f64>, raw: &RawParams, base_variance: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), mean.len())?;
        if !x.iter().chain(mean.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian input"));
        }
        let cov = CovarianceSpec::new(self.structure(raw)?, base_variance)?.prepare()?;
        let delta: Vec<f64> = (x - mean).iter().copied().collect();
        let (_, g) = cov.log_density_and_grad(&delta);
        self.chain(raw, &g)
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if labels.iter().all(|&l| l < classes) {
        Ok(())
    } else {
        Err(invalid(format!("labels must lie in 0..{classes}")))
    }
}

/// Free-function form of [`Parameterization::grad_log_density`].
pub fn grad_log_density_wrt_params(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    param: &Parameterization,
    raw: &RawParams,
    base_variance: f64,
) -> Result<Vec<f64>> {
    param.grad_log_density(x, mean, raw, base_variance)
}
