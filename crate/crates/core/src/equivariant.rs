//! Zero centre-of-mass machinery for particle systems.
//!
//! A configuration of `M` particles in `n` dimensions is stored particle-major
//! as a vector of length `M n`. The orthonormal change of basis
//! `P = V_M (x) I_n` maps the zero-CoM subspace isometrically onto
//! `R^{(M-1) n}`; Gaussians on the subspace are ordinary Gaussians in those
//! reduced coordinates with covariance `P Sigma P^T`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, invalid, Error, Result};
use crate::gaussian::{CovarianceSpec, PreparedCov, Structure, StructureGrad};

/// Below this CoM norm a configuration is accepted unchanged.
pub const COM_TOLERANCE: f64 = 1e-8;
/// Up to this CoM norm a configuration is silently re-centred.
pub const COM_REPROJECT_LIMIT: f64 = 1e-6;

/// The change-of-basis matrix `P = V_M (x) I_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComProjection {
    particles: usize,
    spatial: usize,
    /// `(M-1) x M`, orthonormal rows spanning `{z : 1^T z = 0}`.
    basis: DMatrix<f64>,
}

impl ComProjection {
    /// QR of the centring matrix, with `R` forced to a positive diagonal.
    pub fn new(particles: usize, spatial: usize) -> Result<Self> {
        if particles < 2 {
            return Err(invalid(format!("need at least two particles, got {particles}")));
        }
        if spatial == 0 {
            return Err(invalid("spatial dimension must be at least 1"));
        }
        let m = particles;
        let centring = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
        let qr = centring.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..m - 1 {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let basis = q.columns(0, m - 1).transpose();
        Ok(Self { particles, spatial, basis })
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    pub fn ambient_dim(&self) -> usize {
        self.particles * self.spatial
    }

    pub fn reduced_dim(&self) -> usize {
        (self.particles - 1) * self.spatial
    }

    /// `V_M`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Dense `P`, `(M-1)n x Mn`.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.basis.kronecker(&DMatrix::identity(self.spatial, self.spatial))
    }

    /// `P x`.
    pub fn reduce(&self, x: &[f64]) -> DVector<f64> {
        let n = self.spatial;
        let mut out = DVector::zeros(self.reduced_dim());
        for k in 0..self.particles - 1 {
            for i in 0..self.particles {
                let v = self.basis[(k, i)];
                for c in 0..n {
                    out[k * n + c] += v * x[i * n + c];
                }
            }
        }
        out
    }

    /// `P^T y`; the result has zero CoM.
    pub fn lift(&self, y: &[f64]) -> DVector<f64> {
        let n = self.spatial;
        let mut out = DVector::zeros(self.ambient_dim());
        for k in 0..self.particles - 1 {
            for i in 0..self.particles {
                let v = self.basis[(k, i)];
                for c in 0..n {
                    out[i * n + c] += v * y[k * n + c];
                }
            }
        }
        out
    }

    /// Express an ambient structure (`B (x) I_n` or isotropic) in reduced coordinates.
    pub fn reduce_structure(&self, s: &Structure) -> Result<Structure> {
        match s {
            Structure::Isotropic { eta, dim } => {
                check_dim(self.ambient_dim(), *dim)?;
                Ok(Structure::Isotropic { eta: *eta, dim: self.reduced_dim() })
            }
            Structure::KronBlock { b, spatial_dim } => {
                check_dim(self.particles, b.nrows())?;
                check_dim(self.spatial, *spatial_dim)?;
                let c = &self.basis * b * self.basis.transpose();
                Ok(Structure::KronBlock { b: (&c + c.transpose()) * 0.5, spatial_dim: self.spatial })
            }
            _ => Err(invalid("only isotropic and particle-block covariances are equivariant on the CoM subspace")),
        }
    }

    /// Map a reduced-coordinate structure gradient back to the ambient structure.
    pub fn lift_grad(&self, g: &StructureGrad) -> Result<StructureGrad> {
        match g {
            StructureGrad::Isotropic(v) => Ok(StructureGrad::Isotropic(*v)),
            StructureGrad::KronBlock(gc) => Ok(StructureGrad::KronBlock(self.basis.transpose() * gc * &self.basis)),
            _ => Err(invalid("unsupported gradient on the CoM subspace")),
        }
    }

    /// Covariance in reduced coordinates.
    pub fn reduce_cov(&self, cov: &CovarianceSpec) -> Result<CovarianceSpec> {
        CovarianceSpec::new(self.reduce_structure(&cov.structure)?, cov.base_variance)
    }

    /// Norm of the per-coordinate centre of mass.
    pub fn com_norm(&self, x: &[f64]) -> f64 {
        centre_of_mass(x, self.particles, self.spatial).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Accept, re-centre or reject a configuration by its CoM drift.
    pub fn ensure_on_subspace(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.ambient_dim(), x.len())?;
        let norm = self.com_norm(x.as_slice());
        if norm <= COM_TOLERANCE {
            Ok(x.clone())
        } else if norm <= COM_REPROJECT_LIMIT {
            Ok(com_project(x, self.particles, self.spatial))
        } else {
            Err(Error::OffSubspace(norm))
        }
    }
}

fn centre_of_mass(x: &[f64], particles: usize, spatial: usize) -> Vec<f64> {
    let mut com = vec![0.0; spatial];
    for i in 0..particles {
        for c in 0..spatial {
            com[c] += x[i * spatial + c];
        }
    }
    for v in &mut com {
        *v /= particles as f64;
    }
    com
}

/// Subtract the per-coordinate centre of mass.
pub fn com_project(x: &DVector<f64>, particles: usize, spatial: usize) -> DVector<f64> {
    let com = centre_of_mass(x.as_slice(), particles, spatial);
    DVector::from_fn(x.len(), |k, _| x[k] - com[k % spatial])
}

/// `log N(P x; P mean, P Sigma P^T)` for `Sigma = base * (B (x) I_n)` or isotropic.
pub fn com_gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &CovarianceSpec, proj: &ComProjection) -> Result<f64> {
    let x = proj.ensure_on_subspace(x)?;
    let mean = proj.ensure_on_subspace(mean)?;
    let reduced = proj.reduce_cov(cov)?.prepare()?;
    let delta = proj.reduce((&x - &mean).as_slice());
    Ok(reduced.log_density_centered(delta.as_slice()))
}

/// Draw in reduced coordinates and lift back; the CoM of the result is exactly the mean's.
pub fn com_gaussian_sample<R: Rng + ?Sized>(rng: &mut R, mean: &DVector<f64>, cov: &CovarianceSpec, proj: &ComProjection) -> Result<DVector<f64>> {
    let mean = proj.ensure_on_subspace(mean)?;
    let reduced: PreparedCov = proj.reduce_cov(cov)?.prepare()?;
    let y = reduced.sample_noise(rng);
    Ok(mean + proj.lift(y.as_slice()))
}

/// `(b - a) I + a 11^T`.
pub fn build_exchangeable_b(a: f64, b: f64, particles: usize) -> Result<DMatrix<f64>> {
    if particles < 2 {
        return Err(invalid("need at least two particles"));
    }
    if !(b - a > 0.0) || !(a > -b / (particles as f64 - 1.0)) {
        return Err(Error::NotPositiveDefinite(format!("exchangeable block with a = {a}, b = {b}")));
    }
    let m = particles;
    Ok(DMatrix::identity(m, m) * (b - a) + DMatrix::from_element(m, m, a))
}

/// Label-dependent block parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelParams {
    /// One variance per class.
    Diagonal(Vec<f64>),
    /// Class-class matrix `A` (`K x K`) plus ridge.
    Block { a: DMatrix<f64>, alpha: f64 },
}

/// `B_ij` depending on `(i, j)` only through `(L_i, L_j)`.
pub fn build_label_b(labels: &[usize], params: &LabelParams) -> Result<DMatrix<f64>> {
    let m = labels.len();
    match params {
        LabelParams::Diagonal(etas) => {
            let mut b = DMatrix::zeros(m, m);
            for (i, &l) in labels.iter().enumerate() {
                let e = *etas.get(l).ok_or_else(|| invalid(format!("label {l} has no variance")))?;
                if !(e > 0.0) {
                    return Err(Error::NotPositiveDefinite(format!("class variance {e}")));
                }
                b[(i, i)] = e;
            }
            Ok(b)
        }
        LabelParams::Block { a, alpha } => {
            if !(*alpha > 0.0) {
                return Err(Error::NotPositiveDefinite(format!("ridge {alpha}")));
            }
            let k = a.nrows();
            if labels.iter().any(|&l| l >= k) {
                return Err(invalid(format!("labels must lie in 0..{k}")));
            }
            let aat = a * a.transpose();
            Ok(DMatrix::from_fn(m, m, |i, j| aat[(labels[i], labels[j])] + if i == j { *alpha } else { 0.0 }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{standard_normal, LN_2PI};
    use crate::rng::SeedTree;

    #[test]
    fn two_particle_basis() {
        let p = ComProjection::new(2, 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((p.basis()[(0, 0)] - s).abs() < 1e-15);
        assert!((p.basis()[(0, 1)] + s).abs() < 1e-15);
        let y = p.reduce(&[1.0, -1.0]);
        assert!((y[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn projection_identities() {
        for (m, n) in [(2, 1), (4, 2), (5, 3), (13, 3)] {
            let p = ComProjection::new(m, n).unwrap();
            let pm = p.matrix();
            let ppt = &pm * pm.transpose();
            assert!((ppt - DMatrix::identity((m - 1) * n, (m - 1) * n)).amax() < 1e-12);
            let centring = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
            let ptp = pm.transpose() * &pm;
            assert!((ptp - centring.kronecker(&DMatrix::identity(n, n))).amax() < 1e-12);
            let constant = vec![3.7; m * n];
            assert!(p.reduce(&constant).amax() < 1e-12);
        }
        assert!(ComProjection::new(1, 3).is_err());
    }

    #[test]
    fn projection_is_deterministic() {
        assert_eq!(ComProjection::new(6, 3).unwrap(), ComProjection::new(6, 3).unwrap());
    }

    #[test]
    fn com_project_properties() {
        let x = DVector::from_element(6, 2.5);
        assert!(com_project(&x, 3, 2).amax() < 1e-15);
        let mut rng = SeedTree::new(4).rng();
        let y = standard_normal(&mut rng, 8);
        let once = com_project(&y, 4, 2);
        let twice = com_project(&once, 4, 2);
        assert!((&once - &twice).amax() < 1e-15);
        // permuting particles commutes with projection
        let perm = [2usize, 0, 3, 1];
        let permute = |v: &DVector<f64>| DVector::from_fn(8, |k, _| v[perm[k / 2] * 2 + k % 2]);
        assert!((permute(&once) - com_project(&permute(&y), 4, 2)).amax() < 1e-15);
    }

    #[test]
    fn off_subspace_handling() {
        let p = ComProjection::new(3, 1).unwrap();
        let good = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        assert!(p.ensure_on_subspace(&good).is_ok());
        let drift = DVector::from_vec(vec![1.0 + 1e-7, -1.0, 0.0]);
        assert!(p.com_norm(p.ensure_on_subspace(&drift).unwrap().as_slice()) < 1e-15);
        let bad = DVector::from_vec(vec![1.1, -1.0, 0.0]);
        assert!(matches!(p.ensure_on_subspace(&bad), Err(Error::OffSubspace(_))));
    }

    #[test]
    fn isotropic_reduces_to_simplified_form() {
        let (m, n) = (4, 3);
        let p = ComProjection::new(m, n).unwrap();
        let mut rng = SeedTree::new(8).rng();
        let x = com_project(&standard_normal(&mut rng, m * n), m, n);
        let mu = com_project(&standard_normal(&mut rng, m * n), m, n);
        let s2 = 0.37;
        let cov = CovarianceSpec::isotropic(m * n, 1.0, s2).unwrap();
        let v = com_gaussian_log_density(&x, &mu, &cov, &p).unwrap();
        let k = ((m - 1) * n) as f64;
        let simplified = -0.5 * k * (LN_2PI + s2.ln()) - (&x - &mu).norm_squared() / (2.0 * s2);
        assert!((v - simplified).abs() < 1e-12);
        // dense reduced-coordinate oracle with the generic block form
        let b = DMatrix::identity(m, m) * 2.0;
        let kron = CovarianceSpec::new(Structure::KronBlock { b: b.clone(), spatial_dim: n }, s2).unwrap();
        let pm = p.matrix();
        let sig = &pm * (b.kronecker(&DMatrix::identity(n, n)) * s2) * pm.transpose();
        let chol = sig.clone().cholesky().unwrap();
        let d = &pm * (&x - &mu);
        let dense = -0.5 * (k * LN_2PI + 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() + d.dot(&chol.solve(&d)));
        assert!((com_gaussian_log_density(&x, &mu, &kron, &p).unwrap() - dense).abs() < 1e-10);
    }

    #[test]
    fn density_integrates_to_one_on_the_line() {
        // M = 2, n = 1: the subspace is one-dimensional, parameterised by y = P x.
        let p = ComProjection::new(2, 1).unwrap();
        let b = build_exchangeable_b(0.3, 1.2, 2).unwrap();
        let cov = CovarianceSpec::new(Structure::KronBlock { b, spatial_dim: 1 }, 0.8).unwrap();
        let mean = p.lift(&[0.4]);
        let h = 1e-3;
        let mut total = 0.0;
        for i in -20_000..=20_000 {
            let y = i as f64 * h;
            let x = p.lift(&[y]);
            total += com_gaussian_log_density(&x, &mean, &cov, &p).unwrap().exp() * h;
        }
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn exchangeable_spectrum_and_constraints() {
        let (a, b, m) = (0.3, 1.1, 5);
        let mat = build_exchangeable_b(a, b, m).unwrap();
        let mut eig: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        for e in &eig[..m - 1] {
            assert!((e - (b - a)).abs() < 1e-12);
        }
        assert!((eig[m - 1] - (b + (m as f64 - 1.0) * a)).abs() < 1e-12);
        assert_eq!(build_exchangeable_b(0.0, 2.0, 3).unwrap(), DMatrix::identity(3, 3) * 2.0);
        assert!(build_exchangeable_b(1.0, 1.0, 3).is_err());
        assert!(build_exchangeable_b(-0.5, 1.0, 3).is_err());
    }

    #[test]
    fn label_block_with_single_class_is_exchangeable_plus_ridge() {
        let a = DMatrix::from_element(1, 1, 0.7);
        let b = build_label_b(&[0, 0, 0, 0], &LabelParams::Block { a, alpha: 0.4 }).unwrap();
        let expected = build_exchangeable_b(0.49, 0.49 + 0.4, 4).unwrap();
        assert!((b - expected).amax() < 1e-15);
        let d = build_label_b(&[0, 1, 0], &LabelParams::Diagonal(vec![1.0, 3.0])).unwrap();
        assert_eq!(d.diagonal().as_slice(), &[1.0, 3.0, 1.0]);
    }

    #[test]
    fn samples_stay_on_subspace_and_match_covariance() {
        let (m, n) = (3, 2);
        let p = ComProjection::new(m, n).unwrap();
        let b = build_exchangeable_b(-0.2, 1.0, m).unwrap() + DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.0, 0.2]));
        let cov = CovarianceSpec::new(Structure::KronBlock { b: b.clone(), spatial_dim: n }, 0.6).unwrap();
        let mean = com_project(&DVector::from_vec(vec![1.0, 0.0, 0.5, 2.0, -1.0, 0.3]), m, n);
        let mut rng = SeedTree::new(12).rng();
        let k = p.reduced_dim();
        let draws = 100_000;
        let mut acc = DMatrix::<f64>::zeros(k, k);
        let mu_r = p.reduce(mean.as_slice());
        for _ in 0..draws {
            let x = com_gaussian_sample(&mut rng, &mean, &cov, &p).unwrap();
            assert!(p.com_norm(x.as_slice()) < 1e-12);
            let y = p.reduce(x.as_slice()) - &mu_r;
            acc += &y * y.transpose();
        }
        acc /= draws as f64;
        let pm = p.matrix();
        let expected = &pm * cov.dense() * pm.transpose();
        for i in 0..k {
            assert!((acc[(i, i)] / expected[(i, i)] - 1.0).abs() < 0.05);
        }
        let scale = expected.diagonal().amax();
        assert!((acc - expected).amax() < 0.05 * scale);
    }

    #[test]
    fn isotropic_draws_match_subtract_com_shortcut() {
        // Compare the distribution of a 1-D projection via a two-sample KS statistic.
        let (m, n) = (4, 2);
        let p = ComProjection::new(m, n).unwrap();
        let cov = CovarianceSpec::isotropic(m * n, 1.0, 1.3).unwrap();
        let mean = DVector::zeros(m * n);
        let tree = SeedTree::new(21);
        let mut r1 = tree.stream(0);
        let mut r2 = tree.stream(1);
        let dir = DVector::from_vec(vec![0.3, -0.1, 0.5, 0.2, -0.7, 0.4, 0.1, 0.0]);
        let count = 20_000;
        let mut a: Vec<f64> = (0..count).map(|_| com_gaussian_sample(&mut r1, &mean, &cov, &p).unwrap().dot(&dir)).collect();
        let mut b: Vec<f64> = (0..count)
            .map(|_| com_project(&(standard_normal(&mut r2, m * n) * 1.3f64.sqrt()), m, n).dot(&dir))
            .collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut dmax) = (0, 0, 0.0f64);
        while i < count && j < count {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            dmax = dmax.max((i as f64 - j as f64).abs() / count as f64);
        }
        // 0.1% critical value for n = m = 20000 is about 1.95 * sqrt(2 / n)
        assert!(dmax < 1.95 * (2.0 / count as f64).sqrt(), "KS {dmax}");
        assert_eq!(
            com_gaussian_sample(&mut tree.stream(5), &mean, &cov, &p).unwrap(),
            com_gaussian_sample(&mut tree.stream(5), &mean, &cov, &p).unwrap()
        );
    }
}
