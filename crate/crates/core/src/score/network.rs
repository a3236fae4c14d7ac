//! Trainable preconditioned denoisers.
//!
//! `D(x, t) = c_skip x + c_out F(c_in x, c_noise)`. Two choices of `F`:
//!
//! * `Mlp`: a plain network on `[c_in x, c_noise]`.
//! * `Pairwise`: `F_i = sum_{j != i} phi(|r_ij|^2, c_noise) r_ij` with
//!   `r_ij = c_in (x_i - x_j)` and a shared scalar network `phi`. This is
//!   equivariant under rotations, reflections, translations and particle
//!   permutations, and `sum_i F_i = 0`.

use nalgebra::DVector;
use rand::Rng;

use super::mlp::{Mlp, MlpCache};
use super::{check_finite, Precond, ScoreModel};
use crate::error::{check_dim, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mlp { dim: usize },
    Pairwise { particles: usize, spatial: usize },
}

impl Architecture {
    pub fn dim(&self) -> usize {
        match *self {
            Architecture::Mlp { dim } => dim,
            Architecture::Pairwise { particles, spatial } => particles * spatial,
        }
    }

    fn layer_sizes(&self, hidden: &[usize]) -> Vec<usize> {
        let (inp, out) = match *self {
            Architecture::Mlp { dim } => (dim + 1, dim),
            Architecture::Pairwise { .. } => (2, 1),
        };
        let mut s = vec![inp];
        s.extend_from_slice(hidden);
        s.push(out);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    arch: Architecture,
    net: Mlp,
    sigma_data: f64,
}

impl ScoreNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, arch: Architecture, hidden: &[usize], sigma_data: f64) -> Result<Self> {
        Self::validate(arch, sigma_data)?;
        Ok(Self { arch, net: Mlp::random(rng, &arch.layer_sizes(hidden), 0.1), sigma_data })
    }

    /// All weights zero: `D(x, t) = c_skip(t) x`.
    pub fn zeroed(arch: Architecture, hidden: &[usize], sigma_data: f64) -> Result<Self> {
        Self::validate(arch, sigma_data)?;
        Ok(Self { arch, net: Mlp::zeros(&arch.layer_sizes(hidden)), sigma_data })
    }

    pub fn from_parts(arch: Architecture, net: Mlp, sigma_data: f64) -> Result<Self> {
        Self::validate(arch, sigma_data)?;
        let expect = arch.layer_sizes(&net.sizes()[1..net.sizes().len() - 1]);
        if expect != net.sizes() {
            return Err(Error::Format(format!("layer sizes {:?} do not fit the architecture", net.sizes())));
        }
        Ok(Self { arch, net, sigma_data })
    }

    fn validate(arch: Architecture, sigma_data: f64) -> Result<()> {
        if !(sigma_data.is_finite() && sigma_data > 0.0) {
            return Err(invalid(format!("sigma_data must be positive, got {sigma_data}")));
        }
        match arch {
            Architecture::Mlp { dim } if dim == 0 => Err(invalid("network dimension must be positive")),
            Architecture::Pairwise { particles, spatial } if particles < 2 || spatial == 0 => {
                Err(invalid("pairwise network needs at least two particles"))
            }
            _ => Ok(()),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }

    /// The raw network output `F`.
    fn raw(&self, x: &[f64], p: &Precond) -> Vec<f64> {
        match self.arch {
            Architecture::Mlp { dim } => {
                let mut u: Vec<f64> = x.iter().map(|v| v * p.c_in).collect();
                u.push(p.c_noise);
                let f = self.net.forward(&u);
                debug_assert_eq!(f.len(), dim);
                f
            }
            Architecture::Pairwise { particles, spatial } => {
                let mut f = vec![0.0; x.len()];
                let mut r = vec![0.0; spatial];
                for i in 0..particles {
                    for j in i + 1..particles {
                        let mut r2 = 0.0;
                        for c in 0..spatial {
                            r[c] = p.c_in * (x[i * spatial + c] - x[j * spatial + c]);
                            r2 += r[c] * r[c];
                        }
                        let phi = self.net.forward(&[r2, p.c_noise])[0];
                        for c in 0..spatial {
                            f[i * spatial + c] += phi * r[c];
                            f[j * spatial + c] -= phi * r[c];
                        }
                    }
                }
                f
            }
        }
    }

    fn raw_jvp(&self, x: &[f64], v: &[f64], p: &Precond) -> (Vec<f64>, Vec<f64>) {
        match self.arch {
            Architecture::Mlp { .. } => {
                let mut u: Vec<f64> = x.iter().map(|a| a * p.c_in).collect();
                u.push(p.c_noise);
                let mut du: Vec<f64> = v.iter().map(|a| a * p.c_in).collect();
                du.push(0.0);
                self.net.jvp(&u, &du)
            }
            Architecture::Pairwise { particles, spatial } => {
                let mut f = vec![0.0; x.len()];
                let mut df = vec![0.0; x.len()];
                let mut r = vec![0.0; spatial];
                let mut dr = vec![0.0; spatial];
                for i in 0..particles {
                    for j in i + 1..particles {
                        let (mut r2, mut dr2) = (0.0, 0.0);
                        for c in 0..spatial {
                            r[c] = p.c_in * (x[i * spatial + c] - x[j * spatial + c]);
                            dr[c] = p.c_in * (v[i * spatial + c] - v[j * spatial + c]);
                            r2 += r[c] * r[c];
                            dr2 += 2.0 * r[c] * dr[c];
                        }
                        let (phi, dphi) = self.net.jvp(&[r2, p.c_noise], &[dr2, 0.0]);
                        for c in 0..spatial {
                            let (a, da) = (phi[0] * r[c], dphi[0] * r[c] + phi[0] * dr[c]);
                            f[i * spatial + c] += a;
                            f[j * spatial + c] -= a;
                            df[i * spatial + c] += da;
                            df[j * spatial + c] -= da;
                        }
                    }
                }
                (f, df)
            }
        }
    }

    /// Locate the first layer with a non-finite activation for diagnostics.
    fn nan_error(&self, x: &[f64], p: &Precond) -> Error {
        let input: Vec<f64> = match self.arch {
            Architecture::Mlp { .. } => x.iter().map(|v| v * p.c_in).chain([p.c_noise]).collect(),
            Architecture::Pairwise { spatial, .. } => {
                let r2: f64 = (0..spatial).map(|c| (p.c_in * (x[c] - x[spatial + c])).powi(2)).sum();
                vec![r2, p.c_noise]
            }
        };
        if input.iter().any(|v| !v.is_finite()) {
            return Error::Numerical { step: 0, reason: "non-finite network input".into() };
        }
        let mut act = input;
        let sizes = self.net.sizes().to_vec();
        for l in 0..sizes.len() - 1 {
            let sub = Mlp::from_params(&sizes[l..l + 2], self.layer_params(l).to_vec()).expect("layer slice");
            let z = sub.forward(&act);
            if z.iter().any(|v| !v.is_finite()) {
                return Error::Numerical { step: l, reason: format!("non-finite activation in layer {l}") };
            }
            act = if l + 2 < sizes.len() { z.iter().map(|&v| v / (1.0 + (-v).exp())).collect() } else { z };
        }
        Error::Numerical { step: sizes.len() - 1, reason: "non-finite network output".into() }
    }

    fn layer_params(&self, l: usize) -> &[f64] {
        let s = self.net.sizes();
        let off: usize = (0..l).map(|k| s[k] * s[k + 1] + s[k + 1]).sum();
        &self.net.params()[off..off + s[l] * s[l + 1] + s[l + 1]]
    }

    /// Per-dimension denoising loss `|F - (x0 - c_skip x_t) / c_out|^2 / d`,
    /// with its parameter gradient accumulated into `grad`.
    pub fn loss_and_grad(&self, x_t: &[f64], x0: &[f64], t: f64, grad: &mut [f64]) -> f64 {
        let p = Precond::new(t, self.sigma_data);
        let d = x_t.len() as f64;
        let target: Vec<f64> = x0.iter().zip(x_t).map(|(a, b)| (a - p.c_skip * b) / p.c_out).collect();
        match self.arch {
            Architecture::Mlp { .. } => {
                let mut u: Vec<f64> = x_t.iter().map(|v| v * p.c_in).collect();
                u.push(p.c_noise);
                let (f, cache) = self.net.forward_cached(&u);
                let g: Vec<f64> = f.iter().zip(&target).map(|(a, b)| 2.0 * (a - b) / d).collect();
                self.net.backward(&cache, &g, grad);
                f.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d
            }
            Architecture::Pairwise { particles, spatial } => {
                let mut f = vec![0.0; x_t.len()];
                let mut pairs: Vec<(usize, usize, Vec<f64>, MlpCache)> = Vec::new();
                for i in 0..particles {
                    for j in i + 1..particles {
                        let r: Vec<f64> = (0..spatial).map(|c| p.c_in * (x_t[i * spatial + c] - x_t[j * spatial + c])).collect();
                        let r2 = r.iter().map(|v| v * v).sum::<f64>();
                        let (phi, cache) = self.net.forward_cached(&[r2, p.c_noise]);
                        for c in 0..spatial {
                            f[i * spatial + c] += phi[0] * r[c];
                            f[j * spatial + c] -= phi[0] * r[c];
                        }
                        pairs.push((i, j, r, cache));
                    }
                }
                let g: Vec<f64> = f.iter().zip(&target).map(|(a, b)| 2.0 * (a - b) / d).collect();
                for (i, j, r, cache) in &pairs {
                    let dphi: f64 = (0..spatial).map(|c| (g[i * spatial + c] - g[j * spatial + c]) * r[c]).sum();
                    self.net.backward(cache, &[dphi], grad);
                }
                f.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d
            }
        }
    }
}

impl ScoreModel for ScoreNet {
    fn dim(&self) -> usize {
        self.arch.dim()
    }

    fn denoise(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        let p = Precond::new(t, self.sigma_data);
        let f = self.raw(x, &p);
        let d = DVector::from_fn(x.len(), |k, _| p.c_skip * x[k] + p.c_out * f[k]);
        if check_finite(&d, "network denoiser").is_err() {
            return Err(self.nan_error(x, &p));
        }
        Ok(d)
    }

    fn denoise_jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        let p = Precond::new(t, self.sigma_data);
        let (f, df) = self.raw_jvp(x, v, &p);
        let d = DVector::from_fn(x.len(), |k, _| p.c_skip * x[k] + p.c_out * f[k]);
        let dd = DVector::from_fn(x.len(), |k, _| p.c_skip * v[k] + p.c_out * df[k]);
        if check_finite(&d, "network denoiser").is_err() {
            return Err(self.nan_error(x, &p));
        }
        Ok((d, dd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn nets() -> Vec<ScoreNet> {
        let mut rng = SeedTree::new(11).rng();
        let mut a = ScoreNet::new(&mut rng, Architecture::Mlp { dim: 3 }, &[8, 8], 0.9).unwrap();
        let mut b = ScoreNet::new(&mut rng, Architecture::Pairwise { particles: 4, spatial: 2 }, &[8, 8], 1.3).unwrap();
        // larger output weights so every parameter matters
        for net in [&mut a, &mut b] {
            for w in net.params_mut() {
                *w += 0.2 * rng.random_range(-1.0..1.0);
            }
        }
        vec![a, b]
    }

    #[test]
    fn zero_network_is_skip_connection() {
        for arch in [Architecture::Mlp { dim: 2 }, Architecture::Pairwise { particles: 3, spatial: 2 }] {
            let net = ScoreNet::zeroed(arch, &[4], 0.7).unwrap();
            let x: Vec<f64> = (0..arch.dim()).map(|k| k as f64 - 1.0).collect();
            let t = 0.4;
            let c = Precond::new(t, 0.7).c_skip;
            let d = net.denoise(&x, t).unwrap();
            for k in 0..x.len() {
                assert!((d[k] - c * x[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = SeedTree::new(12).rng();
        for net in nets() {
            let dim = net.dim();
            let x0: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = 0.7;
            let x_t: Vec<f64> = x0.iter().map(|v| v + t * rng.random_range(-1.0..1.0)).collect();
            let mut grad = vec![0.0; net.params().len()];
            net.loss_and_grad(&x_t, &x0, t, &mut grad);
            let h = 1e-6;
            let mut scratch = vec![0.0; grad.len()];
            for i in 0..grad.len() {
                let mut a = net.clone();
                let mut b = net.clone();
                a.params_mut()[i] += h;
                b.params_mut()[i] -= h;
                let fd = (a.loss_and_grad(&x_t, &x0, t, &mut scratch) - b.loss_and_grad(&x_t, &x0, t, &mut scratch)) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-4 * grad[i].abs().max(1e-4), "{:?} param {i}: {fd} vs {}", net.architecture(), grad[i]);
            }
        }
    }

    #[test]
    fn loss_is_the_weighted_denoising_error() {
        for net in nets() {
            let dim = net.dim();
            let x0: Vec<f64> = (0..dim).map(|k| 0.3 * k as f64 - 0.5).collect();
            let x_t: Vec<f64> = x0.iter().map(|v| v + 0.2).collect();
            let t = 1.1;
            let p = Precond::new(t, net.sigma_data());
            let d = net.denoise(&x_t, t).unwrap();
            let direct = d.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (p.c_out * p.c_out * dim as f64);
            let mut g = vec![0.0; net.params().len()];
            assert!((net.loss_and_grad(&x_t, &x0, t, &mut g) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut rng = SeedTree::new(13).rng();
        for net in nets() {
            let dim = net.dim();
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = 0.9;
            let (d, dd) = net.denoise_jvp(&x, t, &v).unwrap();
            assert!((&d - net.denoise(&x, t).unwrap()).amax() < 1e-14);
            let h = 1e-6;
            let xa: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let xb: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let fd = (net.denoise(&xa, t).unwrap() - net.denoise(&xb, t).unwrap()) / (2.0 * h);
            assert!((fd - dd).amax() < 1e-7);
        }
    }

    #[test]
    fn pairwise_network_symmetries() {
        let net = nets().pop().unwrap();
        let x = [0.3, -1.0, 1.2, 0.4, -0.9, 0.8, 0.1, -0.6];
        let t = 0.5;
        let d = net.denoise(&x, t).unwrap();
        // permutation
        let perm = [2usize, 0, 3, 1];
        let px: Vec<f64> = (0..8).map(|k| x[perm[k / 2] * 2 + k % 2]).collect();
        let pd = net.denoise(&px, t).unwrap();
        for k in 0..8 {
            assert!((pd[k] - d[perm[k / 2] * 2 + k % 2]).abs() < 1e-12);
        }
        // rotation plus reflection
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |v: &[f64]| -> Vec<f64> { (0..4).flat_map(|i| [c * v[2 * i] + s * v[2 * i + 1], s * v[2 * i] - c * v[2 * i + 1]]).collect() };
        let rd = net.denoise(&rot(&x), t).unwrap();
        let expect = rot(d.as_slice());
        for k in 0..8 {
            assert!((rd[k] - expect[k]).abs() < 1e-12);
        }
        // output CoM tracks input CoM through c_skip only
        let com_in: f64 = (0..4).map(|i| x[2 * i]).sum();
        let com_out: f64 = (0..4).map(|i| d[2 * i]).sum();
        assert!((com_out - Precond::new(t, net.sigma_data()).c_skip * com_in).abs() < 1e-12);
    }

    #[test]
    fn nan_reports_layer() {
        let mut net = ScoreNet::zeroed(Architecture::Mlp { dim: 2 }, &[3], 1.0).unwrap();
        net.params_mut()[0] = f64::NAN;
        match net.denoise(&[1.0, 1.0], 1.0) {
            Err(Error::Numerical { step, .. }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
    }
}
