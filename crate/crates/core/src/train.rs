//! Minibatch SGD on the mean-squared-error loss
//! `L = 1/B * sum_b ||F(x_b) - onehot(y_b)||^2`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mlp::{classify, gemm_ab, gemm_atb, Activation, Layer, MlpModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.5,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidTrainConfig(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidTrainConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size > dataset_len {
            return Err(Error::InvalidTrainConfig(format!(
                "batch size {} exceeds the dataset size {dataset_len}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Gradient with the same layout as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.layers().iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Parameter `index` in the same order as [`Gradient::flatten`].
pub fn parameter_mut(model: &mut MlpModel, mut index: usize) -> &mut f64 {
    for layer in model.layers_mut() {
        if index < layer.weights.len() {
            return &mut layer.weights[index];
        }
        index -= layer.weights.len();
        if index < layer.bias.len() {
            return &mut layer.bias[index];
        }
        index -= layer.bias.len();
    }
    panic!("parameter index out of range");
}

fn pack(model: &MlpModel, batch: &[(&[f64], usize)]) -> Result<(Vec<f64>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::InvalidTrainConfig("empty batch".into()));
    }
    let classes = model.output_size();
    let mut inputs = Vec::with_capacity(batch.len() * model.input_size());
    let mut labels = Vec::with_capacity(batch.len());
    for &(x, y) in batch {
        if x.len() != model.input_size() {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for a model expecting {}",
                x.len(),
                model.input_size()
            )));
        }
        if y >= classes {
            return Err(Error::InvalidLabel { label: y, classes });
        }
        inputs.extend_from_slice(x);
        labels.push(y);
    }
    Ok((inputs, labels))
}

/// Loss and gradient of a packed batch.
fn loss_and_gradient(
    model: &MlpModel,
    inputs: &[f64],
    labels: &[usize],
    want_gradient: bool,
) -> Result<(f64, Option<Gradient>)> {
    let batch = labels.len();
    let outputs = model.forward_batch(inputs, batch)?;
    let classes = model.output_size();
    let last = outputs.last().expect("output layer");
    let scale = 1.0 / batch as f64;

    let mut loss = 0.0;
    let mut delta = vec![0.0; batch * classes];
    for (b, &y) in labels.iter().enumerate() {
        for k in 0..classes {
            let target = if k == y { 1.0 } else { 0.0 };
            let diff = last[b * classes + k] - target;
            loss += diff * diff;
            delta[b * classes + k] = 2.0 * scale * diff;
        }
    }
    loss *= scale;
    if !want_gradient {
        return Ok((loss, None));
    }

    let layers = model.layers();
    let mut grad = Gradient::zeros_like(model);
    for l in (0..layers.len()).rev() {
        let layer: &Layer = &layers[l];
        let out = &outputs[l + 1];
        for (d, &a) in delta.iter_mut().zip(out) {
            *d *= layer.activation.derivative_from_output(a);
        }
        gemm_atb(layer.rows, batch, layer.cols, &delta, &outputs[l], &mut grad.weights[l]);
        for row in delta.chunks_exact(layer.rows) {
            for (g, d) in grad.biases[l].iter_mut().zip(row) {
                *g += d;
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; batch * layer.cols];
            gemm_ab(batch, layer.rows, layer.cols, &delta, &layer.weights, &mut prev);
            delta = prev;
        }
    }
    Ok((loss, Some(grad)))
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// `1/B * sum ||F(x) - onehot(y)||^2` over the batch.
pub fn mse_loss(model: &MlpModel, batch: &[(&[f64], usize)]) -> Result<f64> {
    let (inputs, labels) = pack(model, batch)?;
    Ok(loss_and_gradient(model, &inputs, &labels, false)?.0)
}

/// Analytic gradient of [`mse_loss`] by backpropagation.
pub fn backward(model: &MlpModel, batch: &[(&[f64], usize)]) -> Result<Gradient> {
    let (inputs, labels) = pack(model, batch)?;
    let (_, grad) = loss_and_gradient(model, &inputs, &labels, true)?;
    Ok(grad.expect("gradient requested"))
}

/// `theta <- theta - eta * grad`.
pub fn sgd_step(model: &mut MlpModel, gradient: &Gradient, eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidTrainConfig(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    if gradient.weights.len() != model.layers().len() {
        return Err(Error::DimensionMismatch("gradient does not match the model".into()));
    }
    for (layer, (gw, gb)) in model
        .layers_mut()
        .iter_mut()
        .zip(gradient.weights.iter().zip(&gradient.biases))
    {
        if gw.len() != layer.weights.len() || gb.len() != layer.bias.len() {
            return Err(Error::DimensionMismatch("gradient does not match the model".into()));
        }
        for (w, g) in layer.weights.iter_mut().zip(gw) {
            *w -= eta * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(gb) {
            *b -= eta * g;
        }
    }
    Ok(())
}

/// Parameters drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_model(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<MlpModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpModel::zeros(layer_sizes, activation)?;
    for layer in model.layers_mut() {
        let bound = 1.0 / (layer.cols as f64).sqrt();
        for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *p = rng.random_range(-bound..=bound);
        }
    }
    Ok(model)
}

/// Classification accuracy of the float backend.
pub fn accuracy(model: &MlpModel, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    const CHUNK: usize = 500;
    let classes = model.output_size();
    let features = dataset.features();
    let mut correct = 0usize;
    for start in (0..dataset.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(dataset.len());
        let inputs = &dataset.images()[start * features..end * features];
        let outputs = model.forward_batch(inputs, end - start)?;
        let last = outputs.last().expect("output layer");
        for (b, out) in last.chunks_exact(classes).enumerate() {
            if classify(out) == dataset.label(start + b) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} train_acc={:.4}",
            self.epoch, self.loss, self.train_acc
        )?;
        match self.test_acc {
            Some(acc) => write!(f, " test_acc={acc:.4}"),
            None => write!(f, " test_acc=nan"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub log: Vec<EpochLog>,
}

/// Trains a freshly initialised model on `dataset`.
pub fn train(
    layer_sizes: &[usize],
    dataset: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidTrainConfig("empty training set".into()));
    }
    let model = init_model(layer_sizes, Activation::Sigmoid, config.seed)?;
    train_model(model, dataset, test, config, &mut on_epoch)
}

/// Continues training `model`. Each epoch shuffles the data with the seeded
/// generator and walks it in `batch_size` slices; a trailing partial batch is
/// dropped.
pub fn train_model(
    mut model: MlpModel,
    dataset: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidTrainConfig("empty training set".into()));
    }
    config.validate(dataset.len())?;
    if dataset.features() != model.input_size() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} features, model expects {}",
            dataset.features(),
            model.input_size()
        )));
    }
    if let Some(&bad) = dataset
        .labels()
        .iter()
        .find(|&&l| l as usize >= model.output_size())
    {
        return Err(Error::InvalidLabel {
            label: bad as usize,
            classes: model.output_size(),
        });
    }

    // separate stream from the one used for initialisation
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let features = dataset.features();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut inputs = vec![0.0; config.batch_size * features];
    let mut labels = vec![0usize; config.batch_size];
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks_exact(config.batch_size) {
            for (slot, &i) in chunk.iter().enumerate() {
                inputs[slot * features..(slot + 1) * features].copy_from_slice(dataset.image(i));
                labels[slot] = dataset.label(i);
            }
            let (loss, grad) = loss_and_gradient(&model, &inputs, &labels, true)?;
            sgd_step(&mut model, &grad.expect("gradient requested"), config.learning_rate)?;
            loss_sum += loss;
            batches += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            train_acc: accuracy(&model, dataset)?,
            test_acc: test.map(|t| accuracy(&model, t)).transpose()?,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
