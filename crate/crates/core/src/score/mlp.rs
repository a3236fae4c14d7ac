//! Fully connected SiLU network with reverse- and forward-mode derivatives.
//!
//! Weights live in one flat vector. Layer `l` maps `sizes[l]` inputs to
//! `sizes[l + 1]` outputs and stores a row-major weight matrix followed by
//! its bias. All layers but the last apply SiLU.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub(crate) params: Vec<f64>,
}

/// Pre-activations of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_prime(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        let n = Self::count(sizes);
        Self { sizes: sizes.to_vec(), params: vec![0.0; n] }
    }

    /// He-style initialisation; the output layer is scaled by `out_scale`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize], out_scale: f64) -> Self {
        let mut net = Self::zeros(sizes);
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let mut scale = (2.0 / fan_in as f64).sqrt();
            if l + 2 == sizes.len() {
                scale *= out_scale;
            }
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Format(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != Self::count(sizes) {
            return Err(Error::DimensionMismatch { expected: Self::count(sizes), got: params.len() });
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn affine(&self, off: usize, l: usize, x: &[f64], out: &mut Vec<f64>) -> usize {
        let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[off..off + ni * no];
        let b = &self.params[off + ni * no..off + ni * no + no];
        out.clear();
        for o in 0..no {
            let row = &w[o * ni..(o + 1) * ni];
            out.push(b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>());
        }
        off + ni * no + no
    }

    /// Output only.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut z = Vec::new();
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for l in 0..=last {
            off = self.affine(off, l, &x, &mut z);
            if l < last {
                x.clear();
                x.extend(z.iter().map(|&v| silu(v)));
            } else {
                std::mem::swap(&mut x, &mut z);
            }
        }
        x
    }

    /// Output plus cache for [`Mlp::backward`].
    pub fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, MlpCache) {
        let layers = self.sizes.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut x = input.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let mut z = Vec::new();
            off = self.affine(off, l, &x, &mut z);
            let next: Vec<f64> = if l + 1 < layers { z.iter().map(|&v| silu(v)).collect() } else { z.clone() };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        (x, MlpCache { inputs, pre })
    }

    /// Accumulate parameter gradients into `grad`; returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, out_grad: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut offs = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offs.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = out_grad.to_vec();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                for (d, z) in delta.iter_mut().zip(&cache.pre[l]) {
                    *d *= silu_prime(*z);
                }
            }
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let o = offs[l];
            let x = &cache.inputs[l];
            let mut back = vec![0.0; ni];
            for r in 0..no {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = o + r * ni;
                for c in 0..ni {
                    grad[row + c] += d * x[c];
                    back[c] += d * self.params[row + c];
                }
                grad[o + ni * no + r] += d;
            }
            delta = back;
        }
        delta
    }

    /// Output and its directional derivative along `tangent`.
    pub fn jvp(&self, input: &[f64], tangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let layers = self.sizes.len() - 1;
        let mut x = input.to_vec();
        let mut dx = tangent.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + ni * no];
            let mut z = Vec::with_capacity(no);
            off = self.affine(off, l, &x, &mut z);
            let dz: Vec<f64> = (0..no).map(|r| w[r * ni..(r + 1) * ni].iter().zip(&dx).map(|(a, v)| a * v).sum()).collect();
            if l + 1 < layers {
                dx = dz.iter().zip(&z).map(|(d, z)| d * silu_prime(*z)).collect();
                x = z.iter().map(|&v| silu(v)).collect();
            } else {
                dx = dz;
                x = z;
            }
        }
        (x, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeedTree::new(1).rng();
        let net = Mlp::random(&mut rng, &[3, 5, 4, 2], 1.0);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = [0.7, -1.3];
        let loss = |n: &Mlp, x: &[f64]| n.forward(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = net.forward_cached(&x);
        let mut grad = vec![0.0; net.num_params()];
        let gin = net.backward(&cache, &w, &mut grad);
        let h = 1e-6;
        for i in 0..net.num_params() {
            let mut a = net.clone();
            let mut b = net.clone();
            a.params[i] += h;
            b.params[i] -= h;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * grad[i].abs().max(1e-3), "param {i}: {fd} vs {}", grad[i]);
        }
        for i in 0..3 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&net, &a) - loss(&net, &b)) / (2.0 * h);
            assert!((fd - gin[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut rng = SeedTree::new(2).rng();
        let net = Mlp::random(&mut rng, &[2, 6, 6, 3], 1.0);
        let x = [0.3, -0.8];
        let v = [1.5, 0.25];
        let (y, dy) = net.jvp(&x, &v);
        assert_eq!(y, net.forward(&x));
        let h = 1e-6;
        let a = net.forward(&[x[0] + h * v[0], x[1] + h * v[1]]);
        let b = net.forward(&[x[0] - h * v[0], x[1] - h * v[1]]);
        for k in 0..3 {
            assert!(((a[k] - b[k]) / (2.0 * h) - dy[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn cached_forward_agrees() {
        let net = Mlp::random(&mut SeedTree::new(3).rng(), &[4, 3, 1], 0.5);
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(net.forward(&x), net.forward_cached(&x).0);
        assert!(Mlp::from_params(&[2, 2], vec![0.0; 5]).is_err());
    }
}
