use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MlpClassifier, ParamSet};
use crate::error::{Error, Result};

/// Per-example clipping bound and noise multiplier for DP-SGD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::invalid("noise_multiplier must be nonnegative"));
        }
        Ok(())
    }
}

/// SGD hyperparameters. Defaults follow the classic recipe: lr 0.1,
/// momentum 0.9, weight decay 5e-4, cosine annealing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cosine_schedule: bool,
    /// Std of Gaussian jitter added to every training input, drawn afresh
    /// each time the example is visited. 0 disables augmentation.
    pub augmentation_noise_std: f64,
    pub seed: u64,
    pub dp: Option<DpConfig>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 60,
            cosine_schedule: true,
            augmentation_noise_std: 0.0,
            seed: 0,
            dp: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if !(self.augmentation_noise_std >= 0.0 && self.augmentation_noise_std.is_finite()) {
            return Err(Error::invalid("augmentation_noise_std must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total`: `lr * (1 + cos(pi * step / total)) / 2`
/// under the cosine schedule, constant otherwise.
pub fn cosine_lr(config: &TrainingConfig, step: usize, total: usize) -> f64 {
    if !config.cosine_schedule || total == 0 {
        return config.learning_rate;
    }
    let progress = step.min(total) as f64 / total as f64;
    config.learning_rate * 0.5 * (1.0 + (PI * progress).cos())
}

/// One momentum-SGD update with L2 weight decay folded into the gradient:
/// `v = momentum * v + (g + wd * w)`, `w -= lr_t * v`.
pub fn sgd_step(
    model: &mut MlpClassifier,
    gradients: &ParamSet,
    config: &TrainingConfig,
    velocity: &mut ParamSet,
    step: usize,
    total_steps: usize,
) -> Result<()> {
    if !model.params.same_shape(gradients) || !model.params.same_shape(velocity) {
        return Err(Error::invalid("gradient or velocity shape does not match the model"));
    }
    let lr = cosine_lr(config, step, total_steps);
    for ((w, g), v) in model
        .params
        .iter_mut()
        .zip(gradients.iter())
        .zip(velocity.iter_mut())
    {
        let effective = g + config.weight_decay * *w;
        *v = config.momentum * *v + effective;
        *w -= lr * *v;
    }
    Ok(())
}

/// Elementwise mean of per-example gradients.
pub fn mean_gradients(per_example: &[ParamSet]) -> Result<ParamSet> {
    let first = per_example
        .first()
        .ok_or_else(|| Error::invalid("no per-example gradients"))?;
    let scale = 1.0 / per_example.len() as f64;
    let mut mean = first.zeros_like();
    for g in per_example {
        if !g.same_shape(&mean) {
            return Err(Error::invalid("per-example gradient shapes differ"));
        }
        for (m, v) in mean.iter_mut().zip(g.iter()) {
            *m += v * scale;
        }
    }
    Ok(mean)
}

/// Clips every per-example gradient to global L2 norm `clip_norm`, averages,
/// and adds `N(0, (noise_multiplier * clip_norm / batch)^2)` to each coordinate.
pub fn privatize<R: Rng + ?Sized>(per_example: &[ParamSet], dp: &DpConfig, rng: &mut R) -> Result<ParamSet> {
    dp.validate()?;
    let clipped: Vec<ParamSet> = per_example
        .iter()
        .map(|g| {
            let norm = g.l2_norm();
            let factor = if norm > dp.clip_norm { dp.clip_norm / norm } else { 1.0 };
            let mut g = g.clone();
            if factor != 1.0 {
                g.iter_mut().for_each(|v| *v *= factor);
            }
            g
        })
        .collect();
    let mut mean = mean_gradients(&clipped)?;
    let std = dp.noise_multiplier * dp.clip_norm / per_example.len() as f64;
    if std > 0.0 {
        for m in mean.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *m += std * z;
        }
    }
    Ok(mean)
}

/// DP-SGD update: privatize the per-example gradients, then apply `sgd_step`.
#[allow(clippy::too_many_arguments)]
pub fn dp_sgd_step<R: Rng + ?Sized>(
    model: &mut MlpClassifier,
    per_example: &[ParamSet],
    config: &TrainingConfig,
    velocity: &mut ParamSet,
    step: usize,
    total_steps: usize,
    rng: &mut R,
) -> Result<()> {
    let dp = config
        .dp
        .as_ref()
        .ok_or_else(|| Error::invalid("dp_sgd_step called without a DP config"))?;
    let noised = privatize(per_example, dp, rng)?;
    sgd_step(model, &noised, config, velocity, step, total_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{backward, init_classifier, CrossEntropy};
    use crate::seed;

    fn scalar_model(w: f64) -> MlpClassifier {
        let mut params = ParamSet::zeros(&[1, 1]);
        params.layers[0].weights[0] = w;
        MlpClassifier::from_params(&[1, 1], params).unwrap()
    }

    fn scalar_grad(g: f64) -> ParamSet {
        let mut params = ParamSet::zeros(&[1, 1]);
        params.layers[0].weights[0] = g;
        params
    }

    fn plain(lr: f64, momentum: f64, wd: f64) -> TrainingConfig {
        TrainingConfig {
            learning_rate: lr,
            momentum,
            weight_decay: wd,
            cosine_schedule: false,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut m = scalar_model(1.0);
        let mut v = ParamSet::zeros(&[1, 1]);
        sgd_step(&mut m, &scalar_grad(0.5), &plain(0.1, 0.0, 0.0), &mut v, 0, 10).unwrap();
        assert!((m.params().layers[0].weights[0] - 0.95).abs() < 1e-15);

        let mut m = scalar_model(1.0);
        let mut v = ParamSet::zeros(&[1, 1]);
        sgd_step(&mut m, &scalar_grad(0.5), &plain(0.1, 0.0, 5e-4), &mut v, 0, 10).unwrap();
        assert!((m.params().layers[0].weights[0] - 0.94995).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = scalar_model(0.0);
        let mut v = ParamSet::zeros(&[1, 1]);
        let cfg = plain(1.0, 0.9, 0.0);
        sgd_step(&mut m, &scalar_grad(1.0), &cfg, &mut v, 0, 2).unwrap();
        sgd_step(&mut m, &scalar_grad(1.0), &cfg, &mut v, 1, 2).unwrap();
        // v1 = 1, v2 = 1.9, w = -(1 + 1.9)
        assert!((m.params().layers[0].weights[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut m = scalar_model(1.0);
        let mut v = ParamSet::zeros(&[1, 1]);
        let g = ParamSet::zeros(&[1, 2]);
        assert!(sgd_step(&mut m, &g, &plain(0.1, 0.0, 0.0), &mut v, 0, 1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = TrainingConfig::default();
        assert_eq!(cosine_lr(&cfg, 0, 100), 0.1);
        assert!((cosine_lr(&cfg, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(&cfg, 100, 100).abs() < 1e-12);
        assert_eq!(cosine_lr(&plain(0.3, 0.0, 0.0), 100, 100), 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(plain(0.0, 0.0, 0.0).validate().is_err());
        assert!(plain(0.1, 1.0, 0.0).validate().is_err());
        assert!(plain(0.1, 0.5, -1.0).validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.dp = Some(DpConfig { clip_norm: 0.0, noise_multiplier: 1.0 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clipping_halves_norm_twenty_gradient() {
        let mut g = ParamSet::zeros(&[1, 2]);
        g.layers[0].weights = vec![12.0, 16.0];
        let dp = DpConfig { clip_norm: 10.0, noise_multiplier: 0.0 };
        let out = privatize(&[g], &dp, &mut seed::rng(0)).unwrap();
        assert!((out.l2_norm() - 10.0).abs() < 1e-12);
        assert!((out.layers[0].weights[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn dp_without_noise_equals_sgd_bitwise() {
        let model = init_classifier(&[3, 4, 2], 3).unwrap();
        let xs = [[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [-0.3, 0.0, 2.0]];
        let per_example: Vec<ParamSet> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| model.example_gradient(&CrossEntropy, x, i % 2).unwrap().0)
            .collect();
        let max_norm = per_example.iter().map(ParamSet::l2_norm).fold(0.0, f64::max);
        let mut cfg = TrainingConfig::default();
        cfg.dp = Some(DpConfig { clip_norm: max_norm + 1.0, noise_multiplier: 0.0 });

        let mut a = model.clone();
        let mut va = a.params().zeros_like();
        dp_sgd_step(&mut a, &per_example, &cfg, &mut va, 3, 10, &mut seed::rng(1)).unwrap();

        let mut b = model.clone();
        let mut vb = b.params().zeros_like();
        let mean = mean_gradients(&per_example).unwrap();
        sgd_step(&mut b, &mean, &cfg, &mut vb, 3, 10).unwrap();
        assert_eq!(a, b);

        // and the per-example mean agrees with batched backprop
        let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (&x[..], i % 2)).collect();
        let (batched, _) = backward(&model, &batch).unwrap();
        for (p, q) in batched.iter().zip(mean.iter()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn dp_step_requires_dp_config() {
        let mut m = scalar_model(1.0);
        let mut v = ParamSet::zeros(&[1, 1]);
        let err = dp_sgd_step(&mut m, &[scalar_grad(1.0)], &plain(0.1, 0.0, 0.0), &mut v, 0, 1, &mut seed::rng(0));
        assert!(err.is_err());
    }

    #[test]
    fn dp_noise_has_expected_scale() {
        // zero gradients, lr 1, no momentum or decay: the update is exactly -noise
        let mut cfg = plain(1.0, 0.0, 0.0);
        cfg.dp = Some(DpConfig { clip_norm: 10.0, noise_multiplier: 0.1 });
        let zeros = vec![ParamSet::zeros(&[1, 1]); 32];
        let mut rng = seed::rng(2024);
        let mut draws = Vec::with_capacity(20_000);
        for _ in 0..10_000 {
            let mut m = scalar_model(0.0);
            let mut v = ParamSet::zeros(&[1, 1]);
            dp_sgd_step(&mut m, &zeros, &cfg, &mut v, 0, 1, &mut rng).unwrap();
            draws.extend(m.params().iter().map(|w| -w));
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 0.1 * 10.0 / 32.0;
        assert!((var.sqrt() - expected).abs() < 0.05 * expected, "std {}", var.sqrt());
    }
}
