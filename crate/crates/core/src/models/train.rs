//! Softmax cross-entropy, backpropagation, and mini-batch SGD with momentum.

use rand::seq::SliceRandom;

use super::mlp::MlpModel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::sampling::UniformBatches;
use crate::seed;

/// Softmax probabilities and `-log p[target]`, computed with max-subtraction.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} outside output width {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    let loss = sum.ln() - (logits[target] - max);
    Ok((loss.max(0.0), probs))
}

/// Parameter gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Summed gradients over a batch; frozen layers are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
    /// Summed loss over the batch.
    pub loss: f64,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weights.iter().chain(&g.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient of the summed cross-entropy over `(features, target)` pairs.
///
/// The output error for each sample is `p - t`; it is backpropagated through the
/// rectifiers down to the lowest unfrozen layer.
pub fn gradients(model: &MlpModel, batch: &[(&[f64], usize)]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let layers = model.layers();
    let lowest_trainable = layers.iter().position(|l| !l.frozen);
    let mut grads: Vec<Option<LayerGrad>> = layers
        .iter()
        .map(|l| {
            (!l.frozen).then(|| LayerGrad {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
        })
        .collect();
    let mut loss = 0.0;
    for &(x, target) in batch {
        let acts = model.activations(x)?;
        let logits = acts.last().expect("output");
        let (l, mut delta) = softmax_xent(logits, target)?;
        loss += l;
        delta[target] -= 1.0;
        let Some(lowest) = lowest_trainable else { continue };
        for k in (lowest..layers.len()).rev() {
            let layer = &layers[k];
            let input = &acts[k];
            if let Some(g) = grads[k].as_mut() {
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                    g.bias[o] += d;
                }
            }
            if k == lowest {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // Rectifier derivative: the activation is positive exactly where the unit was active.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    Ok(Gradients { layers: grads, loss })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSource {
    /// Each epoch is a fresh shuffle of the pool cut into consecutive batches.
    Shuffled,
    /// Class-uniform batches (see [`UniformBatches`]); an epoch is
    /// `ceil(pool / batch_size)` batches.
    ClassUniform { pos_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub batch_source: BatchSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 32,
            batch_source: BatchSource::Shuffled,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Mean per-sample loss of each epoch.
pub type LossTrace = Vec<f64>;

/// Train on explicit `(inputs, targets)`; targets index the model's output slots.
///
/// Updates are `v ← μv − η(g/|B| + λw)`, `w ← w + v` on unfrozen layers
/// (no decay on biases). Single-threaded, so the result is a pure function of
/// the inputs and `config.seed`.
pub fn train_on_targets(
    model: &MlpModel,
    inputs: &[&[f64]],
    targets: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, LossTrace)> {
    config.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::invalid("inputs and targets differ in length"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= model.output_width()) {
        return Err(Error::invalid(format!("target {t} outside output width")));
    }
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    if inputs.is_empty() || config.epochs == 0 {
        return Ok((model, trace));
    }
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = model
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
        .collect();
    let mut rng = seed::rng(config.seed);
    let mut uniform = match config.batch_source {
        BatchSource::Shuffled => None,
        BatchSource::ClassUniform { pos_fraction } => Some(UniformBatches::new(
            targets,
            model.output_width(),
            config.batch_size.max(2),
            pos_fraction,
            seed::derive(config.seed, &[1]),
        )?),
    };
    let batches_per_epoch = inputs.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..config.epochs {
        let batches: Vec<Vec<usize>> = match uniform.as_mut() {
            None => {
                order.shuffle(&mut rng);
                order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
            }
            Some(it) => it.by_ref().take(batches_per_epoch).collect(),
        };
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in batches {
            let pairs: Vec<(&[f64], usize)> = batch.iter().map(|&i| (inputs[i], targets[i])).collect();
            // Targets are pre-validated, so an `Invalid` here means non-finite logits.
            let g = match gradients(&model, &pairs) {
                Err(Error::Invalid(_)) => return Err(Error::Divergence { epoch }),
                other => other?,
            };
            if !g.loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += g.loss;
            seen += pairs.len();
            let scale = 1.0 / pairs.len() as f64;
            for ((layer, grad), (vw, vb)) in model.layers_mut().iter_mut().zip(&g.layers).zip(&mut velocity) {
                let Some(grad) = grad else { continue };
                for ((w, gw), v) in layer.weights.iter_mut().zip(&grad.weights).zip(vw.iter_mut()) {
                    *v = config.momentum * *v - config.learning_rate * (gw * scale + config.weight_decay * *w);
                    *w += *v;
                }
                for ((b, gb), v) in layer.bias.iter_mut().zip(&grad.bias).zip(vb.iter_mut()) {
                    *v = config.momentum * *v - config.learning_rate * gb * scale;
                    *b += *v;
                }
            }
        }
        let mean = epoch_loss / seen.max(1) as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        trace.push(mean);
    }
    Ok((model, trace))
}

/// Train on dataset samples; every label must be background or in the model's class set.
pub fn train(
    model: &MlpModel,
    dataset: &Dataset,
    pool: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, LossTrace)> {
    let mut inputs = Vec::with_capacity(pool.len());
    let mut targets = Vec::with_capacity(pool.len());
    for &i in pool {
        let s = dataset.sample(i);
        let t = model.target_of(s.label).ok_or_else(|| {
            Error::invalid(format!("label {} of sample '{}' is outside the model's class set", s.label, s.id))
        })?;
        inputs.push(s.features.as_slice());
        targets.push(t);
    }
    train_on_targets(model, &inputs, &targets, config)
}

/// Fraction of `pool` whose argmax output slot equals its target, per class in
/// the model's class set (classes without samples get `None`).
pub fn per_class_accuracy(model: &MlpModel, dataset: &Dataset, pool: &[usize]) -> Result<Vec<Option<f64>>> {
    let mut hits = vec![0usize; model.class_set().len()];
    let mut totals = vec![0usize; model.class_set().len()];
    for &i in pool {
        let s = dataset.sample(i);
        let Some(t) = model.target_of(s.label).filter(|&t| t > 0) else { continue };
        let logits = model.forward(&s.features)?.logits;
        let best = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("non-empty");
        totals[t - 1] += 1;
        if best == t {
            hits[t - 1] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect())
}
