//! Denoising score matching with Adam and cosine decay.

use nalgebra::DVector;
use rand::Rng;

use super::network::{Architecture, ScoreNet};
use crate::equivariant::com_project;
use crate::error::{invalid, Error, Result};
use crate::gaussian::standard_normal;
use crate::optim::{adam_step, cosine_lr, AdamHyper, AdamState};
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Noise levels are drawn log-uniformly from `[t_min, t_max]`.
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 5000, batch: 256, lr: 1e-3, lr_floor: 1e-6, t_min: 1e-3, t_max: 1e2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Root-mean-square deviation from the data mean, over all coordinates.
pub fn estimate_sigma_data(data: &[DVector<f64>]) -> Result<f64> {
    let first = data.first().ok_or_else(|| invalid("empty dataset"))?;
    let n = data.len() as f64;
    let mean = data.iter().fold(DVector::zeros(first.len()), |a, x| a + x) / n;
    let ss: f64 = data.iter().map(|x| (x - &mean).norm_squared()).sum();
    let s = (ss / (n * first.len() as f64)).sqrt();
    if s.is_finite() && s > 0.0 {
        Ok(s)
    } else {
        Err(invalid("dataset has no spread"))
    }
}

/// Fit `model` to `data`; each step draws a batch, noise levels and noise.
///
/// Aborts when the batch loss stays above ten times the initial loss for 100
/// consecutive iterations.
pub fn train_dsm(seeds: &SeedTree, data: &[DVector<f64>], model: &mut ScoreNet, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    if cfg.iterations == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) || !(cfg.t_min > 0.0 && cfg.t_min < cfg.t_max) {
        return Err(invalid("training needs positive counts, learning rate and 0 < t_min < t_max"));
    }
    let dim = model.architecture().dim();
    let shape = match model.architecture() {
        Architecture::Pairwise { particles, spatial } => Some((particles, spatial)),
        Architecture::Mlp { .. } => None,
    };
    let data: Vec<DVector<f64>> = data
        .iter()
        .map(|x| {
            crate::error::check_dim(dim, x.len())?;
            Ok(match shape {
                Some((m, n)) => com_project(x, m, n),
                None => x.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut rng = seeds.rng();
    let mut adam = AdamState::new(model.params().len());
    let hyper = AdamHyper::default();
    let (lo, hi) = (cfg.t_min.ln(), cfg.t_max.ln());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut grad = vec![0.0; model.params().len()];
    let mut reference = None;
    let mut above = 0usize;
    for it in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let x0 = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(lo..hi).exp();
            let mut eps = standard_normal(&mut rng, dim);
            if let Some((m, n)) = shape {
                eps = com_project(&eps, m, n);
            }
            let x_t = x0 + eps * t;
            loss += model.loss_and_grad(x_t.as_slice(), x0.as_slice(), t, &mut grad);
        }
        let scale = 1.0 / cfg.batch as f64;
        loss *= scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical { step: it, reason: format!("training loss became {loss}") });
        }
        let r = *reference.get_or_insert(loss);
        above = if loss > 10.0 * r { above + 1 } else { 0 };
        if above >= 100 {
            return Err(Error::Numerical { step: it, reason: format!("training diverged: loss {loss:.3e} vs initial {r:.3e}") });
        }
        losses.push(loss);
        let lr = cosine_lr(it, cfg.iterations, cfg.lr, cfg.lr_floor);
        adam_step(model.params_mut(), &grad, &mut adam, lr, &hyper);
    }
    Ok(TrainReport { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ScoreModel;
    use crate::targets::Gmm;

    #[test]
    fn zero_network_loss_is_one_per_dimension() {
        // With sigma_data equal to the true data scale, E |c_skip x_t - x0|^2 / c_out^2 = 1 per dimension.
        let g = Gmm::gaussian(2, 0.49).unwrap();
        let mut rng = SeedTree::new(1).rng();
        let data = g.sample(&mut rng, 20_000);
        let net = ScoreNet::zeroed(Architecture::Mlp { dim: 2 }, &[4], 0.7).unwrap();
        let mut grad = vec![0.0; net.params().len()];
        let mut acc = 0.0;
        for x0 in &data {
            let t = rng.random_range((1e-2f64).ln()..(10f64).ln()).exp();
            let x_t = x0 + standard_normal(&mut rng, 2) * t;
            acc += net.loss_and_grad(x_t.as_slice(), x0.as_slice(), t, &mut grad);
        }
        let mean = acc / data.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn training_approaches_the_posterior_mean() {
        let var = 0.5;
        let mu = DVector::from_vec(vec![1.5, -1.0]);
        let g = Gmm::new(vec![1.0], vec![mu.clone()], vec![var]).unwrap();
        let tree = SeedTree::new(2);
        let data = g.sample(&mut tree.named("data").rng(), 4000);
        let sd = estimate_sigma_data(&data).unwrap();
        let mut net = ScoreNet::new(&mut tree.named("init").rng(), Architecture::Mlp { dim: 2 }, &[16, 16], sd).unwrap();
        let cfg = TrainConfig { iterations: 1500, batch: 64, lr: 3e-3, lr_floor: 1e-5, t_min: 1e-2, t_max: 10.0 };
        let rep = train_dsm(&tree.named("train"), &data, &mut net, &cfg).unwrap();
        let head: f64 = rep.losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = rep.losses[rep.losses.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "{head} -> {tail}");
        let mut rng = tree.named("eval").rng();
        let mut err = 0.0;
        let n = 500;
        for _ in 0..n {
            let t = rng.random_range((1e-2f64).ln()..(10f64).ln()).exp();
            let x = g.sample_one(&mut rng) + standard_normal(&mut rng, 2) * t;
            let exact = (&x * var + &mu * (t * t)) / (var + t * t);
            err += (net.denoise(x.as_slice(), t).unwrap() - exact).norm_squared() / 2.0;
        }
        assert!(err / (n as f64) < 1e-2, "{}", err / n as f64);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut net = ScoreNet::zeroed(Architecture::Mlp { dim: 1 }, &[2], 1.0).unwrap();
        let tree = SeedTree::new(0);
        assert!(train_dsm(&tree, &[], &mut net, &TrainConfig::default()).is_err());
        let cfg = TrainConfig { t_min: 2.0, t_max: 1.0, ..TrainConfig::default() };
        assert!(train_dsm(&tree, &[DVector::zeros(1)], &mut net, &cfg).is_err());
        assert!(estimate_sigma_data(&[DVector::zeros(2), DVector::zeros(2)]).is_err());
    }
}
