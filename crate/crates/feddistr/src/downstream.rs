//! Data regeneration from broadcast distribution parameters and the
//! downstream classifier: multinomial logistic regression trained with
//! mini-batch SGD on cross-entropy.

use crate::client::DistributionParameter;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const BATCH_SIZE: usize = 64;

/// Draws `counts[i]` samples from the Gaussian decoded from `payload[i].v`,
/// labeled with the parameter's superclass label.
pub fn generate<R: Rng>(
    payload: &[DistributionParameter],
    counts: &[usize],
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, usize)>> {
    if payload.len() != counts.len() {
        return Err(Error::Input(format!(
            "generate: {} payload entries, {} counts",
            payload.len(),
            counts.len()
        )));
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (p, &n) in payload.iter().zip(counts) {
        let mean = p.mean();
        let stds = p.stds();
        for _ in 0..n {
            let x = mean
                .iter()
                .zip(&stds)
                .map(|(&m, &s)| Normal::new(m, s).unwrap().sample(rng))
                .collect();
            out.push((x, p.label));
        }
    }
    Ok(out)
}

/// Multinomial logistic regression; one weight row per class, bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// num_classes x (dim + 1), bias in the last column.
    pub weights: Vec<Vec<f64>>,
    /// Sorted superclass labels, defining the row order of `weights`.
    pub classes: Vec<usize>,
}

impl Classifier {
    pub fn zeros(classes: Vec<usize>, dim: usize) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        let mut sorted = classes;
        sorted.sort_unstable();
        sorted.dedup();
        Ok(Classifier { weights: vec![vec![0.0; dim + 1]; sorted.len()], classes: sorted })
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn class_index(&self, label: usize) -> Option<usize> {
        self.classes.binary_search(&label).ok()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| crate::linalg::dot(&w[..x.len()], x) + w[x.len()])
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        self.classes[best]
    }

    pub fn num_parameters(&self) -> usize {
        self.num_classes() * (self.dim() + 1)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A trained model plus its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Classifier,
    pub epoch_loss: Vec<f64>,
}

/// Trains from zero weights on `data`.
pub fn train_classifier<R: Rng>(
    data: &[(Vec<f64>, usize)],
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("train_classifier: empty dataset".into()));
    }
    let mut labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Config("train_classifier: need at least 2 distinct labels".into()));
    }
    let mut model = Classifier::zeros(labels, data[0].0.len())?;
    let epoch_loss = sgd_epochs(&mut model, data, epochs, lr, rng)?;
    Ok(TrainReport { model, epoch_loss })
}

/// Runs `epochs` shuffled mini-batch SGD passes on an existing model.
/// Returns the mean cross-entropy per epoch.
pub fn sgd_epochs<R: Rng>(
    model: &mut Classifier,
    data: &[(Vec<f64>, usize)],
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if data.iter().any(|(x, _)| x.len() != model.dim()) {
        return Err(Error::Input("training point dimension mismatch".into()));
    }
    for (_, y) in data {
        if model.class_index(*y).is_none() {
            return Err(Error::Input(format!("label {y} outside model classes")));
        }
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(BATCH_SIZE) {
            let (grad, loss) = batch_gradient(model, data, batch);
            epoch_total += loss * batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
        }
        losses.push(epoch_total / data.len() as f64);
    }
    Ok(losses)
}

/// Mean cross-entropy gradient over a batch: (p - onehot) outer x, averaged.
/// Returns the gradient (one row per class, bias last) and the mean loss.
pub fn batch_gradient(
    model: &Classifier,
    data: &[(Vec<f64>, usize)],
    batch: &[usize],
) -> (Vec<Vec<f64>>, f64) {
    let d = model.dim();
    let mut grad = vec![vec![0.0; d + 1]; model.num_classes()];
    let mut loss = 0.0;
    for &i in batch {
        let (x, y) = &data[i];
        let probs = model.probabilities(x);
        let target = model.class_index(*y).expect("label checked before training");
        loss -= probs[target].max(1e-300).ln();
        for (c, &p) in probs.iter().enumerate() {
            let err = p - if c == target { 1.0 } else { 0.0 };
            for j in 0..d {
                grad[c][j] += err * x[j];
            }
            grad[c][d] += err;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for row in &mut grad {
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    (grad, loss * scale)
}

/// Accuracy and mean cross-entropy on a held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_test: usize,
}

pub fn evaluate(model: &Classifier, test: &[(Vec<f64>, usize)]) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Input("evaluate: empty test set".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, y) in test {
        let target = model
            .class_index(*y)
            .ok_or_else(|| Error::Input(format!("test label {y} outside model classes")))?;
        let probs = model.probabilities(x);
        loss -= probs[target].max(1e-300).ln();
        if model.predict(x) == *y {
            correct += 1;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / test.len() as f64,
        mean_loss: loss / test.len() as f64,
        n_test: test.len(),
    })
}

/// Excess test loss of `model_hat` over `model_star`; may be slightly
/// negative under sampling noise and is reported as-is.
pub fn utility_loss(
    model_hat: &Classifier,
    model_star: &Classifier,
    test: &[(Vec<f64>, usize)],
) -> Result<f64> {
    if model_hat.classes != model_star.classes {
        return Err(Error::Input("utility_loss: label spaces differ".into()));
    }
    Ok(evaluate(model_hat, test)?.mean_loss - evaluate(model_star, test)?.mean_loss)
}
