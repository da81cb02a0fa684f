//! Mini-batch SGD with momentum, softmax cross-entropy and explicit backprop.

use crate::error::{Error, Result};
use crate::model::{forward, predict, Model};
use crate::synth::LabeledSet;
use crate::tensor::{matmul, matmul_at, RngStream, Tensor};

/// Rows evaluated per forward pass in [`evaluate`].
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::domain(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be >= 1"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::domain("lr_decay_every must be >= 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::domain("lr_decay_factor must be > 0"));
        }
        Ok(())
    }

    /// Step schedule: `lr · factor^(epoch / every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    /// FNV-1a over the canonical text of every field.
    pub fn hash(&self) -> u64 {
        fnv1a(
            format!(
                "lr={:e};momentum={:e};decay={:e}/{};epochs={};batch={};seed={}",
                self.lr,
                self.momentum,
                self.lr_decay_factor,
                self.lr_decay_every,
                self.epochs,
                self.batch_size,
                self.seed
            )
            .as_bytes(),
        )
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub final_val_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Softmax cross-entropy against the label.
    CrossEntropy,
    /// `½‖logits − onehot‖²`.
    Squared,
}

/// Trains a copy of `model`. The per-epoch shuffle comes from the stream
/// `(cfg.seed, model.meta.stream)`, so pool members with different init
/// streams also see different batch orders.
pub fn train(model: &Model, train_set: &LabeledSet, val_set: &LabeledSet, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if train_set.dim() != model.input_dim() || val_set.dim() != model.input_dim() {
        return Err(Error::shape(
            "train",
            format!(
                "model input {} vs train {} / val {}",
                model.input_dim(),
                train_set.dim(),
                val_set.dim()
            ),
        ));
    }
    let mut model = model.clone();
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    if train_set.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    model.meta.config_hash = cfg.hash();
    let mut rng = RngStream::new(cfg.seed, model.meta.stream);
    let mut velocity: Vec<(Tensor, Tensor)> = model
        .layers()
        .iter()
        .map(|l| (Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())))
        .collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train_set.gather(batch)?;
            let (loss, grads) = loss_and_gradients(&model, &x, &labels, Loss::CrossEntropy)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss * batch.len() as f64;
            for ((layer, (vw, vb)), (gw, gb)) in model.layers_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                momentum_step(layer.weight.data_mut(), vw.data_mut(), gw.data(), lr, cfg.momentum);
                momentum_step(layer.bias.data_mut(), vb.data_mut(), gb.data(), lr, cfg.momentum);
            }
        }
        log.train_loss.push(loss_sum / train_set.len() as f64);
        let val = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(&model, val_set)?.accuracy
        };
        log.val_accuracy.push(val);
    }
    log.final_val_accuracy = *log.val_accuracy.last().expect("epochs > 0");
    Ok((model, log))
}

fn momentum_step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Mean batch loss and its gradient with respect to every layer's `(W, b)`.
pub fn loss_and_gradients(model: &Model, x: &Tensor, labels: &[usize], loss: Loss) -> Result<(f64, Vec<(Tensor, Tensor)>)> {
    let trace = forward(model, x)?;
    let n = labels.len();
    if n != x.rows() {
        return Err(Error::shape("loss_and_gradients", format!("{} rows, {n} labels", x.rows())));
    }
    let logits = trace.logits();
    let classes = logits.cols();
    let mut delta = vec![0.0; n * classes];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::domain(format!("label {label} >= {classes} outputs")));
        }
        let row = logits.row(i);
        let d = &mut delta[i * classes..(i + 1) * classes];
        match loss {
            Loss::CrossEntropy => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
                total += max + sum_exp.ln() - row[label];
                for (j, (dj, v)) in d.iter_mut().zip(row).enumerate() {
                    let p = (v - max).exp() / sum_exp;
                    *dj = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            Loss::Squared => {
                for (j, (dj, v)) in d.iter_mut().zip(row).enumerate() {
                    let r = v - if j == label { 1.0 } else { 0.0 };
                    total += 0.5 * r * r;
                    *dj = r / n as f64;
                }
            }
        }
    }
    let mut delta = Tensor::matrix(n, classes, delta)?;
    let layers = model.layers();
    let mut grads = Vec::with_capacity(layers.len());
    for m in (0..layers.len()).rev() {
        let input = if m == 0 { trace.input() } else { &trace.outputs[m - 1] };
        let grad_w = matmul_at(&delta, input)?;
        let out = delta.cols();
        let mut grad_b = vec![0.0; out];
        for row in delta.data().chunks(out) {
            for (g, d) in grad_b.iter_mut().zip(row) {
                *g += d;
            }
        }
        grads.push((grad_w, Tensor::vector(grad_b)?));
        if m > 0 {
            let upstream = matmul(&delta, &layers[m].weight)?;
            let act = layers[m - 1].activation;
            delta = upstream.zip_map(&trace.pre_activations[m - 1], "backprop", |g, z| g * act.derivative(z))?;
        }
    }
    grads.reverse();
    Ok((total / n as f64, grads))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("accuracy of an empty set"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "accuracy_from_logits",
            format!("{} logit rows vs {} labels", logits.rows(), labels.len()),
        ));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("loss of an empty set"));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    Ok(total / labels.len() as f64)
}

/// Accuracy and mean cross-entropy of logits produced by `logits_fn`, which
/// is applied to consecutive chunks of `set`.
pub fn evaluate_with(set: &LabeledSet, mut logits_fn: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<EvalResult> {
    if set.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty set"));
    }
    let mut correct = 0.0;
    let mut loss = 0.0;
    let mut start = 0;
    while start < set.len() {
        let chunk = set.slice(start, start + EVAL_CHUNK)?;
        let logits = logits_fn(&chunk.images()?)?;
        let n = chunk.len() as f64;
        correct += accuracy_from_logits(&logits, chunk.labels())? * n;
        loss += mean_cross_entropy(&logits, chunk.labels())? * n;
        start += EVAL_CHUNK;
    }
    let n = set.len() as f64;
    Ok(EvalResult {
        accuracy: correct / n,
        mean_loss: loss / n,
    })
}

pub fn evaluate(model: &Model, set: &LabeledSet) -> Result<EvalResult> {
    evaluate_with(set, |x| predict(model, x))
}

/// Largest relative error between backprop and central finite differences
/// (`ε = 1e-5`) over every parameter. The relative error of a pair `(a, b)`
/// is `|a − b| / max(|a|, |b|, 1e-3)`; the floor keeps near-zero gradients
/// from amplifying finite-difference rounding.
pub fn gradient_check(model: &Model, x: &Tensor, labels: &[usize], loss: Loss) -> Result<f64> {
    const EPS: f64 = 1e-5;
    const FLOOR: f64 = 1e-3;
    let (_, grads) = loss_and_gradients(model, x, labels, loss)?;
    let loss_at = |m: &Model| loss_and_gradients(m, x, labels, loss).map(|(l, _)| l);
    let mut probe = model.clone();
    let mut worst = 0.0_f64;
    for (li, (gw, gb)) in grads.iter().enumerate() {
        for (is_bias, analytic) in [(false, gw), (true, gb)] {
            for (k, &a) in analytic.data().iter().enumerate() {
                let original = *param_mut(&mut probe, li, is_bias, k);
                *param_mut(&mut probe, li, is_bias, k) = original + EPS;
                let plus = loss_at(&probe)?;
                *param_mut(&mut probe, li, is_bias, k) = original - EPS;
                let minus = loss_at(&probe)?;
                *param_mut(&mut probe, li, is_bias, k) = original;
                let numeric = (plus - minus) / (2.0 * EPS);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

fn param_mut(model: &mut Model, layer: usize, is_bias: bool, k: usize) -> &mut f64 {
    let layer = &mut model.layers_mut()[layer];
    let t = if is_bias { &mut layer.bias } else { &mut layer.weight };
    &mut t.data_mut()[k]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, Layer};
    use crate::tensor::sample_gaussian;

    fn blobs(seed: u64, n_per_class: usize) -> LabeledSet {
        let mut rng = RngStream::new(seed, 0);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let class = i % 2;
            let center = if class == 0 { [-2.0, -1.0] } else { [2.0, 1.5] };
            images.push(center[0] + 0.5 * rng.standard_normal());
            images.push(center[1] + 0.5 * rng.standard_normal());
            labels.push(class);
        }
        LabeledSet::new(2, 2, images, labels).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            epochs: 50,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let m = init_model(&[2, 2], Activation::Identity, &mut RngStream::new(0, 0)).unwrap();
        let set = blobs(1, 10);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, log) = train(&m, &set, &set, &cfg).unwrap();
        assert_eq!(trained, m);
        assert!(log.train_loss.is_empty());
    }

    #[test]
    fn separable_blobs_are_learned() {
        let m = init_model(&[2, 2], Activation::Identity, &mut RngStream::new(0, 0)).unwrap();
        let (trained, log) = train(&m, &blobs(1, 100), &blobs(2, 50), &small_cfg()).unwrap();
        assert_eq!(log.train_loss.len(), 50);
        assert_eq!(log.val_accuracy.len(), 50);
        assert!(log.final_val_accuracy >= 0.95, "{}", log.final_val_accuracy);
        assert!(evaluate(&trained, &blobs(3, 50)).unwrap().accuracy >= 0.95);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let m = init_model(&[2, 4, 2], Activation::Relu, &mut RngStream::new(4, 1)).unwrap();
        let a = train(&m, &blobs(1, 40), &blobs(2, 10), &small_cfg()).unwrap();
        let b = train(&m, &blobs(1, 40), &blobs(2, 10), &small_cfg()).unwrap();
        assert_eq!(a, b);
        for (la, lb) in a.0.layers().iter().zip(b.0.layers()) {
            assert!(la.weight.bit_eq(&lb.weight) && la.bias.bit_eq(&lb.bias));
        }
    }

    #[test]
    fn full_batch_convex_loss_is_non_increasing() {
        let m = init_model(&[2, 2], Activation::Identity, &mut RngStream::new(0, 3)).unwrap();
        let set = blobs(5, 30);
        let cfg = TrainConfig {
            lr: 0.01,
            momentum: 0.0,
            epochs: 40,
            batch_size: set.len(),
            ..TrainConfig::default()
        };
        let (_, log) = train(&m, &set, &set, &cfg).unwrap();
        for w in log.train_loss.windows(2) {
            assert!(w[1] <= w[0], "{:?}", log.train_loss);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let m = init_model(&[2, 8, 2], Activation::Identity, &mut RngStream::new(0, 0)).unwrap();
        let m = Model::from_layers(vec![
            Layer::from_weight(m.layers()[0].weight.scale(1e150), Activation::Relu).unwrap(),
            Layer::from_weight(m.layers()[1].weight.scale(1e150), Activation::Identity).unwrap(),
        ])
        .unwrap();
        let cfg = TrainConfig {
            lr: 1e10,
            ..small_cfg()
        };
        let err = train(&m, &blobs(1, 20), &blobs(2, 5), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn evaluate_examples() {
        // always predicts class 0 on a balanced 10-class set
        let w = Tensor::zeros(&[10, 3]);
        let mut bias = vec![0.0; 10];
        bias[0] = 1.0;
        let m = Model::from_layers(vec![Layer::new(w, Tensor::vector(bias).unwrap(), Activation::Identity).unwrap()])
            .unwrap();
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let set = LabeledSet::new(3, 10, vec![0.5; 150], labels).unwrap();
        assert_eq!(evaluate(&m, &set).unwrap().accuracy, 0.1);

        let empty = LabeledSet::new(3, 10, vec![], vec![]).unwrap();
        assert!(matches!(evaluate(&m, &empty), Err(Error::Domain(_))));

        let logits = Tensor::from_rows(&[[2.0, 1.0], [0.0, 3.0], [1.0, 1.0]]).unwrap();
        let acc = accuracy_from_logits(&logits, &[0, 1, 1]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_linear_squared() {
        let m = init_model(&[5, 3], Activation::Identity, &mut RngStream::new(8, 0)).unwrap();
        let x = sample_gaussian(&mut RngStream::new(8, 1), &[6, 5], 0.0, 1.0).unwrap();
        let err = gradient_check(&m, &x, &[0, 1, 2, 0, 1, 2], Loss::Squared).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn gradient_check_zero_weights() {
        let m = init_model(&[4, 5, 3], Activation::Relu, &mut RngStream::new(0, 0))
            .unwrap()
            .map_params(|_| 0.0);
        let x = sample_gaussian(&mut RngStream::new(1, 1), &[3, 4], 0.0, 1.0).unwrap();
        let err = gradient_check(&m, &x, &[0, 1, 2], Loss::CrossEntropy).unwrap();
        assert!(err.is_finite() && err <= 1e-4, "{err}");
    }
}
