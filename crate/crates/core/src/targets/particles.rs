//! Pairwise particle energies: double well and Lennard-Jones.

use nalgebra::DVector;

/// Double-well pair potential `a delta + b delta^2 + c delta^4`, `delta = d_ij - d0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dw4Params {
    pub particles: usize,
    pub spatial: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d0: f64,
    pub tau: f64,
}

impl Default for Dw4Params {
    fn default() -> Self {
        Self { particles: 4, spatial: 2, a: 0.0, b: -4.0, c: 0.9, d0: 4.0, tau: 1.0 }
    }
}

/// Lennard-Jones with a harmonic pull toward the centre of mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lj13Params {
    pub particles: usize,
    pub spatial: usize,
    pub epsilon: f64,
    pub r_m: f64,
    pub c_osc: f64,
    pub tau: f64,
    /// Energies above this are clamped inside MCMC proposals.
    pub cap: f64,
}

impl Default for Lj13Params {
    fn default() -> Self {
        Self { particles: 13, spatial: 3, epsilon: 1.0, r_m: 1.0, c_osc: 0.5, tau: 1.0, cap: 1e6 }
    }
}

fn for_pairs(x: &[f64], particles: usize, spatial: usize, mut f: impl FnMut(usize, usize, f64)) {
    for i in 0..particles {
        for j in i + 1..particles {
            let mut r2 = 0.0;
            for c in 0..spatial {
                let d = x[i * spatial + c] - x[j * spatial + c];
                r2 += d * d;
            }
            f(i, j, r2.sqrt());
        }
    }
}

/// Sum of pair potentials; `dpair` supplies `dE/dr` for the gradient.
fn pair_gradient(x: &[f64], particles: usize, spatial: usize, dpair: impl Fn(f64) -> f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    for_pairs(x, particles, spatial, |i, j, r| {
        let s = dpair(r) / r;
        for c in 0..spatial {
            let d = (x[i * spatial + c] - x[j * spatial + c]) * s;
            g[i * spatial + c] += d;
            g[j * spatial + c] -= d;
        }
    });
    g
}

pub fn dw4_energy(x: &[f64], p: &Dw4Params) -> f64 {
    let mut e = 0.0;
    for_pairs(x, p.particles, p.spatial, |_, _, r| {
        let d = r - p.d0;
        let d2 = d * d;
        e += p.a * d + p.b * d2 + p.c * d2 * d2;
    });
    e
}

pub fn dw4_energy_grad(x: &[f64], p: &Dw4Params) -> DVector<f64> {
    pair_gradient(x, p.particles, p.spatial, |r| {
        let d = r - p.d0;
        p.a + 2.0 * p.b * d + 4.0 * p.c * d * d * d
    })
}

/// `+inf` for coincident particles.
pub fn lj13_energy(x: &[f64], p: &Lj13Params) -> f64 {
    let mut e = 0.0;
    for_pairs(x, p.particles, p.spatial, |_, _, r| {
        if r == 0.0 {
            e = f64::INFINITY;
            return;
        }
        let s6 = (p.r_m / r).powi(6);
        e += p.epsilon * (s6 * s6 - 2.0 * s6);
    });
    e + p.c_osc * centred_sq_norm(x, p.particles, p.spatial)
}

pub fn lj13_energy_grad(x: &[f64], p: &Lj13Params) -> DVector<f64> {
    let mut g = pair_gradient(x, p.particles, p.spatial, |r| {
        let s6 = (p.r_m / r).powi(6);
        12.0 * p.epsilon * (s6 - s6 * s6) / r
    });
    let com = com(x, p.particles, p.spatial);
    for k in 0..x.len() {
        g[k] += 2.0 * p.c_osc * (x[k] - com[k % p.spatial]);
    }
    g
}

fn com(x: &[f64], particles: usize, spatial: usize) -> Vec<f64> {
    let mut c = vec![0.0; spatial];
    for (k, v) in x.iter().enumerate() {
        c[k % spatial] += v / particles as f64;
    }
    c
}

fn centred_sq_norm(x: &[f64], particles: usize, spatial: usize) -> f64 {
    let c = com(x, particles, spatial);
    x.iter().enumerate().map(|(k, v)| (v - c[k % spatial]).powi(2)).sum()
}

/// All pairwise distances, row-major over `i < j`.
pub fn pair_distances(x: &[f64], particles: usize, spatial: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(particles * (particles - 1) / 2);
    for_pairs(x, particles, spatial, |_, _, r| out.push(r));
    out
}
