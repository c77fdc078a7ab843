//! Small feed-forward classifiers trained with hand-written backpropagation.

mod optim;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use optim::{cosine_lr, dp_sgd_step, mean_gradients, privatize, sgd_step, DpConfig, TrainingConfig};
pub use train::{accuracy, train, train_with, TrainingReport};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Weights (row-major, `outputs x inputs`) and biases of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerParams {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }
}

/// A full parameter set. Gradients and optimizer velocity share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        Self {
            layers: layer_sizes
                .windows(2)
                .map(|w| LayerParams::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened view in a fixed order: per layer, weights then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }
}

/// Multi-layer perceptron: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    layer_sizes: Vec<usize>,
    params: ParamSet,
    activation: Activation,
}

/// Weights drawn from `N(0, 1/fan_in)`, zero biases.
pub fn init_classifier(layer_sizes: &[usize], seed: u64) -> Result<MlpClassifier> {
    validate_sizes(layer_sizes)?;
    let mut rng = seed::rng(seed);
    let mut params = ParamSet::zeros(layer_sizes);
    for layer in &mut params.layers {
        let scale = 1.0 / (layer.inputs as f64).sqrt();
        for w in &mut layer.weights {
            let z: f64 = rng.sample(StandardNormal);
            *w = scale * z;
        }
    }
    Ok(MlpClassifier {
        layer_sizes: layer_sizes.to_vec(),
        params,
        activation: Activation::Tanh,
    })
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid("a classifier needs at least input and output sizes"));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::invalid("layer sizes must be positive"));
    }
    Ok(())
}

/// Per-layer post-activation values from one forward pass, input included.
struct Trace {
    activations: Vec<Vec<f64>>,
}

impl MlpClassifier {
    /// Wraps explicit parameters, checking that the shapes chain.
    pub fn from_params(layer_sizes: &[usize], params: ParamSet) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        if !params.same_shape(&ParamSet::zeros(layer_sizes))
            || params
                .layers
                .iter()
                .any(|l| l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs)
        {
            return Err(Error::invalid("parameter shapes do not match layer sizes"));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
            activation: Activation::Tanh,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Output logits for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut trace = self.trace(x);
        Ok(trace.activations.pop().unwrap())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let last = self.params.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.params.layers.len() + 1);
        activations.push(x.to_vec());
        for (l, layer) in self.params.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let mut out = layer.biases.clone();
            for (o, row) in layer.weights.chunks_exact(layer.inputs).enumerate() {
                out[o] += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
            }
            if l != last {
                match self.activation {
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                }
            }
            activations.push(out);
        }
        Trace { activations }
    }

    /// Backpropagates `output_grad` (dLoss/dlogits) through a recorded pass,
    /// adding `scale` times the parameter gradient into `grads`.
    fn accumulate_backward(&self, trace: &Trace, output_grad: Vec<f64>, scale: f64, grads: &mut ParamSet) {
        let mut delta = output_grad;
        for l in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[l];
            let input = &trace.activations[l];
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                let sd = scale * d;
                g.biases[o] += sd;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += sd * a;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                // tanh'(z) = 1 - tanh(z)^2, and the stored activation is tanh(z)
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    /// Loss and parameter gradient for a single example.
    pub fn example_gradient<O: Objective>(
        &self,
        objective: &O,
        x: &[f64],
        target: usize,
    ) -> Result<(ParamSet, f64)> {
        self.check_input(x)?;
        let mut grads = self.params.zeros_like();
        let trace = self.trace(x);
        let (loss, output_grad) = objective.loss_and_grad(trace.activations.last().unwrap(), target)?;
        self.accumulate_backward(&trace, output_grad, 1.0, &mut grads);
        Ok((grads, loss))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

/// A loss on the network output.
pub trait Objective {
    /// Loss and its gradient w.r.t. the logits.
    fn loss_and_grad(&self, logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)>;
}

/// Softmax cross-entropy over class logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

/// Sigmoid binary cross-entropy on a single logit; targets are 0 or 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct BinaryCrossEntropy;

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax probabilities, shifted by the max logit for stability.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

impl Objective for CrossEntropy {
    fn loss_and_grad(&self, logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
        let loss = cross_entropy(logits, target)?;
        let mut grad = softmax(logits);
        grad[target] -= 1.0;
        Ok((loss, grad))
    }
}

impl Objective for BinaryCrossEntropy {
    fn loss_and_grad(&self, logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
        if logits.len() != 1 {
            return Err(Error::invalid("binary cross-entropy needs a single output"));
        }
        if target > 1 {
            return Err(Error::invalid(format!("binary target must be 0 or 1, got {target}")));
        }
        let z = logits[0];
        let t = target as f64;
        // softplus(z) - t*z without overflow
        let loss = z.max(0.0) - t * z + (-z.abs()).exp().ln_1p();
        Ok((loss, vec![sigmoid(z) - t]))
    }
}

/// Mean cross-entropy gradient over a batch of `(features, label)` pairs.
pub fn backward(model: &MlpClassifier, batch: &[(&[f64], usize)]) -> Result<(ParamSet, f64)> {
    backward_with(model, &CrossEntropy, batch)
}

pub fn backward_with<O: Objective>(
    model: &MlpClassifier,
    objective: &O,
    batch: &[(&[f64], usize)],
) -> Result<(ParamSet, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    for &(x, target) in batch {
        model.check_input(x)?;
        let trace = model.trace(x);
        let (l, output_grad) = objective.loss_and_grad(trace.activations.last().unwrap(), target)?;
        loss += l;
        model.accumulate_backward(&trace, output_grad, scale, &mut grads);
    }
    Ok((grads, loss * scale))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

impl From<&MlpClassifier> for ModelFile {
    fn from(model: &MlpClassifier) -> Self {
        Self {
            layer_sizes: model.layer_sizes.clone(),
            weights: model
                .params
                .layers
                .iter()
                .map(|l| l.weights.chunks(l.inputs).map(<[f64]>::to_vec).collect())
                .collect(),
            biases: model.params.layers.iter().map(|l| l.biases.clone()).collect(),
            activation: model.activation,
        }
    }
}

impl TryFrom<ModelFile> for MlpClassifier {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        validate_sizes(&file.layer_sizes)?;
        if file.weights.len() != file.layer_sizes.len() - 1 || file.biases.len() != file.weights.len() {
            return Err(Error::invalid("model file has the wrong number of layers"));
        }
        let layers = file
            .layer_sizes
            .windows(2)
            .zip(file.weights)
            .zip(file.biases)
            .map(|((w, rows), biases)| {
                if rows.len() != w[1] || rows.iter().any(|r| r.len() != w[0]) {
                    return Err(Error::invalid("weight matrix shape mismatch in model file"));
                }
                Ok(LayerParams {
                    inputs: w[0],
                    outputs: w[1],
                    weights: rows.into_iter().flatten().collect(),
                    biases,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = MlpClassifier::from_params(&file.layer_sizes, ParamSet { layers })?;
        model.activation = file.activation;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn random_model(sizes: &[usize], seed: u64) -> MlpClassifier {
        let mut model = init_classifier(sizes, seed).unwrap();
        // nonzero biases so their gradients are exercised away from the origin
        let mut rng = seed::rng(seed ^ 0xb1a5);
        for layer in &mut model.params_mut().layers {
            for b in &mut layer.biases {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        model
    }

    fn set_param(model: &mut MlpClassifier, k: usize, value: f64) {
        *model.params_mut().iter_mut().nth(k).unwrap() = value;
    }

    /// Central finite differences of the mean batch loss, one coordinate at a time.
    fn numeric_gradient<O: Objective>(
        model: &MlpClassifier,
        objective: &O,
        batch: &[(&[f64], usize)],
        h: f64,
    ) -> Vec<f64> {
        let mean_loss = |m: &MlpClassifier| -> f64 {
            batch
                .iter()
                .map(|&(x, y)| {
                    let logits = m.forward(x).unwrap();
                    objective.loss_and_grad(&logits, y).unwrap().0
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let base: Vec<f64> = model.params().iter().copied().collect();
        (0..base.len())
            .map(|k| {
                let mut plus = model.clone();
                set_param(&mut plus, k, base[k] + h);
                let mut minus = model.clone();
                set_param(&mut minus, k, base[k] - h);
                (mean_loss(&plus) - mean_loss(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn init_shapes() {
        let m = init_classifier(&[2, 2], 0).unwrap();
        assert_eq!(m.params().layers.len(), 1);
        assert_eq!(m.params().layers[0].weights.len(), 4);
        assert_eq!(m.params().layers[0].biases, vec![0.0, 0.0]);

        let m = init_classifier(&[4, 16, 3], 0).unwrap();
        let l = &m.params().layers;
        assert_eq!((l[0].outputs, l[0].inputs), (16, 4));
        assert_eq!((l[1].outputs, l[1].inputs), (3, 16));
        assert_eq!(init_classifier(&[4, 16, 3], 0).unwrap(), m);
        assert_ne!(init_classifier(&[4, 16, 3], 1).unwrap(), m);
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(init_classifier(&[3], 0).is_err());
        assert!(init_classifier(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn forward_zero_and_identity() {
        let zero = MlpClassifier::from_params(&[3, 4, 5], ParamSet::zeros(&[3, 4, 5])).unwrap();
        let logits = zero.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(logits, vec![0.0; 5]);
        assert!(softmax(&logits).iter().all(|p| (p - 0.2).abs() < 1e-15));

        let mut id = ParamSet::zeros(&[2, 2]);
        id.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        let id = MlpClassifier::from_params(&[2, 2], id).unwrap();
        assert_eq!(id.forward(&[0.3, -7.0]).unwrap(), vec![0.3, -7.0]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = init_classifier(&[3, 2], 0).unwrap();
        assert!(m.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_normalizes_random_logits() {
        let mut rng = seed::rng(3);
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..rng.random_range(2..10))
                .map(|_| rng.random_range(-1e3..1e3))
                .collect();
            let total: f64 = softmax(&logits).iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        }
        let m = random_model(&[4, 8, 3], 9);
        let logits = m.forward(&[0.1, 0.2, -0.3, 2.0]).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!((softmax(&logits).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let stable = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(stable.is_finite() && stable.abs() < 1e-300);
        // -ln(e^3 / (e^1 + e^2 + e^3)), evaluated with mpmath at 50 digits
        let expected = 0.4076059644443803;
        assert!((cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap() - expected).abs() < 1e-14);
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seed::rng(42);
        for trial in 0..20 {
            let sizes = [3, rng.random_range(2..6), rng.random_range(2..4)];
            let model = random_model(&sizes, trial);
            let xs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let batch: Vec<(&[f64], usize)> = xs
                .iter()
                .map(|x| (x.as_slice(), rng.random_range(0..sizes[2])))
                .collect();
            let (analytic, _) = backward(&model, &batch).unwrap();
            let numeric = numeric_gradient(&model, &CrossEntropy, &batch, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(relative_error(*a, *n) < 1e-4, "trial {trial}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let model = random_model(&[2, 5, 5, 1], 5);
        let xs = [vec![0.3, -1.2], vec![1.5, 0.4]];
        let batch: Vec<(&[f64], usize)> = vec![(&xs[0], 1), (&xs[1], 0)];
        let (analytic, _) = backward_with(&model, &BinaryCrossEntropy, &batch).unwrap();
        let numeric = numeric_gradient(&model, &BinaryCrossEntropy, &batch, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let model = random_model(&[3, 4, 2], 1);
        let x = [0.5, -0.5, 1.0];
        let (single, l1) = backward(&model, &[(&x, 1)]).unwrap();
        let (double, l2) = backward(&model, &[(&x, 1), (&x, 1)]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in single.iter().zip(double.iter()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn backward_rejects_empty_batch() {
        let model = init_classifier(&[2, 2], 0).unwrap();
        assert!(backward(&model, &[]).is_err());
    }

    #[test]
    fn bce_is_stable_for_extreme_logits() {
        let (loss, g) = BinaryCrossEntropy.loss_and_grad(&[800.0], 1).unwrap();
        assert!(loss.abs() < 1e-300 && g[0].abs() < 1e-300);
        let (loss, _) = BinaryCrossEntropy.loss_and_grad(&[800.0], 0).unwrap();
        assert!((loss - 800.0).abs() < 1e-9);
        assert!(BinaryCrossEntropy.loss_and_grad(&[0.0, 1.0], 0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let model = random_model(&[3, 7, 2], 77);
        let back = MlpClassifier::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let text = model.to_json().unwrap();
        assert!(text.contains("\"activation\":\"tanh\""));
    }
}
