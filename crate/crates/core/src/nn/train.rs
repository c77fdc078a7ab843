use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::optim::{dp_sgd_step, sgd_step, TrainingConfig};
use super::{argmax, backward_with, init_classifier, CrossEntropy, MlpClassifier, Objective};
use crate::dataset::TabularDataset;
use crate::error::{Error, Result};
use crate::seed;

/// A trained model plus the mean training loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub model: MlpClassifier,
    pub epoch_losses: Vec<f64>,
}

/// Trains a softmax classifier on `dataset[indices]`.
pub fn train(
    dataset: &TabularDataset,
    indices: &[usize],
    config: &TrainingConfig,
    layer_sizes: &[usize],
) -> Result<MlpClassifier> {
    if layer_sizes.last() != Some(&dataset.num_classes()) {
        return Err(Error::invalid(format!(
            "output layer must have {} units, one per class",
            dataset.num_classes()
        )));
    }
    Ok(train_with(&CrossEntropy, dataset, indices, config, layer_sizes)?.model)
}

/// Generic mini-batch trainer. Initialization, batch order and DP noise each
/// draw from their own stream derived from `config.seed`.
pub fn train_with<O: Objective>(
    objective: &O,
    dataset: &TabularDataset,
    indices: &[usize],
    config: &TrainingConfig,
    layer_sizes: &[usize],
) -> Result<TrainingReport> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::invalid("empty training slice"));
    }
    if layer_sizes.first() != Some(&dataset.feature_dim()) {
        return Err(Error::invalid(format!(
            "input layer must have {} units to match the features",
            dataset.feature_dim()
        )));
    }
    let mut model = init_classifier(layer_sizes, seed::derive(config.seed, "init", 0))?;
    let mut velocity = model.params().zeros_like();
    let mut order_rng = seed::rng(seed::derive(config.seed, "batch-order", 0));
    let mut noise_rng = seed::rng(seed::derive(config.seed, "dp-noise", 0));
    let mut jitter_rng = seed::rng(seed::derive(config.seed, "augment", 0));
    let jitter = config.augmentation_noise_std;

    let steps_per_epoch = indices.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut order = indices.to_vec();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let jittered: Vec<Vec<f64>> = if jitter > 0.0 {
                chunk
                    .iter()
                    .map(|&i| {
                        dataset
                            .row(i)
                            .iter()
                            .map(|&v| v + jitter * jitter_rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let x = if jitter > 0.0 { jittered[k].as_slice() } else { dataset.row(i) };
                    (x, dataset.label(i))
                })
                .collect();
            if config.dp.is_some() {
                let mut per_example = Vec::with_capacity(batch.len());
                for &(x, y) in &batch {
                    let (g, loss) = model.example_gradient(objective, x, y)?;
                    epoch_loss += loss;
                    per_example.push(g);
                }
                dp_sgd_step(
                    &mut model,
                    &per_example,
                    config,
                    &mut velocity,
                    step,
                    total_steps,
                    &mut noise_rng,
                )?;
            } else {
                let (grads, loss) = backward_with(&model, objective, &batch)?;
                epoch_loss += loss * batch.len() as f64;
                sgd_step(&mut model, &grads, config, &mut velocity, step, total_steps)?;
            }
            step += 1;
        }
        epoch_losses.push(epoch_loss / indices.len() as f64);
    }
    if model.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training diverged to non-finite parameters"));
    }
    Ok(TrainingReport { model, epoch_losses })
}

/// Fraction of `dataset[indices]` whose argmax logit equals the label.
pub fn accuracy(model: &MlpClassifier, dataset: &TabularDataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("accuracy over an empty slice"));
    }
    let mut correct = 0usize;
    for &i in indices {
        if argmax(&model.forward(dataset.row(i))?) == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}
