//! Weight-space soups, output-space ensembles, greedy selection, magnitude
//! scaling and template arithmetic.
//!
//! Averages over models use [`order_free_mean`], so a soup or ensemble does
//! not depend on pool order and a pool of identical models reproduces that
//! model bit for bit.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{forward, predict, Layer, Model};
use crate::synth::LabeledSet;
use crate::tensor::{order_free_mean, Tensor};
use crate::train::{evaluate, evaluate_with, EvalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeMethod {
    UniformSoup,
    GreedySoup,
    EnsLogits,
    EnsFeatures,
    /// Averaged features through the first model's head.
    EnsFeaturesStar,
    GreedyEnsLogits,
    GreedyEnsFeatures,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 7] = [
        MergeMethod::UniformSoup,
        MergeMethod::GreedySoup,
        MergeMethod::EnsLogits,
        MergeMethod::EnsFeatures,
        MergeMethod::EnsFeaturesStar,
        MergeMethod::GreedyEnsLogits,
        MergeMethod::GreedyEnsFeatures,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            MergeMethod::UniformSoup => "uniform_soup",
            MergeMethod::GreedySoup => "greedy_soup",
            MergeMethod::EnsLogits => "ens_logits",
            MergeMethod::EnsFeatures => "ens_features",
            MergeMethod::EnsFeaturesStar => "ens_features_star",
            MergeMethod::GreedyEnsLogits => "greedy_ens_logits",
            MergeMethod::GreedyEnsFeatures => "greedy_ens_features",
        }
    }

    /// Whether the method needs a penultimate feature layer.
    pub fn needs_features(self) -> bool {
        matches!(
            self,
            MergeMethod::EnsFeatures | MergeMethod::EnsFeaturesStar | MergeMethod::GreedyEnsFeatures
        )
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::domain(format!("unknown merge method {s:?}")))
    }
}

/// Models sharing one architecture.
#[derive(Debug, Clone)]
pub struct ModelPool {
    models: Vec<Model>,
}

impl ModelPool {
    pub fn new(models: Vec<Model>) -> Result<Self> {
        check_compatible(&models.iter().collect::<Vec<_>>())?;
        Ok(Self { models })
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// The first `n` models.
    pub fn prefix(&self, n: usize) -> Result<ModelPool> {
        if n == 0 || n > self.len() {
            return Err(Error::domain(format!("prefix {n} of a pool of {}", self.len())));
        }
        Ok(Self {
            models: self.models[..n].to_vec(),
        })
    }

    pub fn refs(&self) -> Vec<&Model> {
        self.models.iter().collect()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&Model> {
        indices.iter().map(|&i| &self.models[i]).collect()
    }

    /// Every member scaled by `c`.
    pub fn scaled(&self, c: f64) -> ModelPool {
        Self {
            models: self.models.iter().map(|m| scale_weights(m, c)).collect(),
        }
    }
}

fn check_compatible(models: &[&Model]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::domain("pool is empty"))?;
    for (i, m) in models.iter().enumerate().skip(1) {
        if !first.same_architecture(m) {
            return Err(Error::IncompatiblePool(format!(
                "model {i} has architecture {} / {:?}, model 0 has {} / {:?}",
                m.meta.arch,
                m.layers().iter().map(|l| l.activation).collect::<Vec<_>>(),
                first.meta.arch,
                first.layers().iter().map(|l| l.activation).collect::<Vec<_>>(),
            )));
        }
    }
    Ok(())
}

/// Elementwise average of same-shaped tensors, independent of their order.
pub fn mean_tensor(tensors: &[&Tensor]) -> Result<Tensor> {
    let first = tensors.first().ok_or_else(|| Error::domain("mean of no tensors"))?;
    if let Some(t) = tensors.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape("mean_tensor", format!("{:?} vs {:?}", first.shape(), t.shape())));
    }
    let mut column = Vec::with_capacity(tensors.len());
    let data = (0..first.len())
        .map(|i| {
            column.clear();
            column.extend(tensors.iter().map(|t| t.data()[i]));
            order_free_mean(&mut column)
        })
        .collect();
    Tensor::new(first.shape().to_vec(), data)
}

fn weighted_tensor(tensors: &[&Tensor], weights: &[f64]) -> Result<Tensor> {
    let mut data = vec![0.0; tensors[0].len()];
    for (t, &w) in tensors.iter().zip(weights) {
        for (acc, v) in data.iter_mut().zip(t.data()) {
            *acc += w * v;
        }
    }
    Tensor::new(tensors[0].shape().to_vec(), data)
}

/// Parameter average over `models`: uniform when `weights` is `None`,
/// otherwise the given convex combination.
pub fn uniform_soup(models: &[&Model], weights: Option<&[f64]>) -> Result<Model> {
    check_compatible(models)?;
    if let Some(w) = weights {
        if w.len() != models.len() {
            return Err(Error::domain(format!("{} weights for {} models", w.len(), models.len())));
        }
        if w.iter().any(|&x| x.is_nan() || x < 0.0 || !x.is_finite()) {
            return Err(Error::domain(format!("soup weights must be nonnegative, got {w:?}")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("soup weights sum to {total}, expected 1")));
        }
    }
    let mut layers = Vec::with_capacity(models[0].depth());
    for li in 0..models[0].depth() {
        let ws: Vec<&Tensor> = models.iter().map(|m| &m.layers()[li].weight).collect();
        let bs: Vec<&Tensor> = models.iter().map(|m| &m.layers()[li].bias).collect();
        let (weight, bias) = match weights {
            None => (mean_tensor(&ws)?, mean_tensor(&bs)?),
            Some(w) => (weighted_tensor(&ws, w)?, weighted_tensor(&bs, w)?),
        };
        layers.push(Layer::new(weight, bias, models[0].layers()[li].activation)?);
    }
    let mut meta = models[0].meta.clone();
    meta.constituents = models
        .iter()
        .flat_map(|m| {
            if m.meta.constituents.is_empty() {
                vec![m.meta.stream]
            } else {
                m.meta.constituents.clone()
            }
        })
        .collect();
    Model::new(layers, meta)
}

/// Mean of per-model logits.
pub fn ens_logits(models: &[&Model], x: &Tensor) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::domain("ensemble of no models"));
    }
    let logits = models
        .iter()
        .map(|m| predict(m, x))
        .collect::<Result<Vec<_>>>()?;
    mean_tensor(&logits.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureHead {
    /// Elementwise average of every member's final layer.
    Merged,
    /// The first member's final layer.
    FirstModel,
}

/// Averages penultimate activations across models, then applies the chosen head.
pub fn ens_features(models: &[&Model], x: &Tensor, head: FeatureHead) -> Result<Tensor> {
    check_compatible(models)?;
    let depth = models[0].depth();
    if depth < 2 {
        return Err(Error::UnsupportedArch(
            "feature ensembles need models with a hidden layer".into(),
        ));
    }
    let features = models
        .iter()
        .map(|m| forward(m, x).map(|t| t.features().clone()))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_tensor(&features.iter().collect::<Vec<_>>())?;
    let head_layer = match head {
        FeatureHead::FirstModel => models[0].layers()[depth - 1].clone(),
        FeatureHead::Merged => {
            let ws: Vec<&Tensor> = models.iter().map(|m| &m.layers()[depth - 1].weight).collect();
            let bs: Vec<&Tensor> = models.iter().map(|m| &m.layers()[depth - 1].bias).collect();
            Layer::new(mean_tensor(&ws)?, mean_tensor(&bs)?, models[0].layers()[depth - 1].activation)?
        }
    };
    head_layer.pre_activation(&mean)
}

/// Output of a greedy selection: chosen pool indices in acceptance order and
/// the validation accuracy of the final combination.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedySelection {
    pub selected: Vec<usize>,
    pub val_accuracy: f64,
    /// Individual validation accuracies, indexed by pool position.
    pub individual_val: Vec<f64>,
}

/// Pool indices sorted by descending score; ties keep ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Generic greedy loop: rank members by their own validation accuracy, start
/// from the best, and keep each next candidate iff the combined validation
/// accuracy does not drop. The ranking is fixed up front.
fn greedy_select(
    pool: &ModelPool,
    val: &LabeledSet,
    mut combined_accuracy: impl FnMut(&[&Model]) -> Result<f64>,
) -> Result<GreedySelection> {
    if pool.is_empty() {
        return Err(Error::domain("greedy selection over an empty pool"));
    }
    if val.is_empty() {
        return Err(Error::domain("greedy selection needs a nonempty validation set"));
    }
    let individual_val = pool
        .models()
        .iter()
        .map(|m| evaluate(m, val).map(|r| r.accuracy))
        .collect::<Result<Vec<_>>>()?;
    let order = rank_by_score(&individual_val);
    let mut selected = vec![order[0]];
    let mut best = individual_val[order[0]];
    for &candidate in &order[1..] {
        let mut trial = selected.clone();
        trial.push(candidate);
        let acc = combined_accuracy(&pool.select(&trial))?;
        if acc >= best {
            selected = trial;
            best = acc;
        }
    }
    Ok(GreedySelection {
        selected,
        val_accuracy: best,
        individual_val,
    })
}

pub fn greedy_soup(pool: &ModelPool, val: &LabeledSet) -> Result<(Model, GreedySelection)> {
    let selection = greedy_select(pool, val, |models| {
        let soup = uniform_soup(models, None)?;
        Ok(evaluate(&soup, val)?.accuracy)
    })?;
    let soup = uniform_soup(&pool.select(&selection.selected), None)?;
    Ok((soup, selection))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleLevel {
    Logits,
    /// Feature averaging with a merged head.
    Features,
}

/// Logits of the ensemble of `models` at `level`.
pub fn ensemble_logits(models: &[&Model], x: &Tensor, level: EnsembleLevel) -> Result<Tensor> {
    match level {
        EnsembleLevel::Logits => ens_logits(models, x),
        EnsembleLevel::Features => ens_features(models, x, FeatureHead::Merged),
    }
}

pub fn evaluate_ensemble(models: &[&Model], set: &LabeledSet, level: EnsembleLevel) -> Result<EvalResult> {
    evaluate_with(set, |x| ensemble_logits(models, x, level))
}

/// Greedy selection where the tentative combination is an ensemble.
pub fn greedy_ensemble(pool: &ModelPool, val: &LabeledSet, level: EnsembleLevel) -> Result<GreedySelection> {
    if level == EnsembleLevel::Features {
        if let Some(m) = pool.models().first() {
            if m.depth() < 2 {
                return Err(Error::UnsupportedArch(
                    "feature ensembles need models with a hidden layer".into(),
                ));
            }
        }
    }
    greedy_select(pool, val, |models| Ok(evaluate_ensemble(models, val, level)?.accuracy))
}

/// Multiplies every weight and bias by `c`.
pub fn scale_weights(model: &Model, c: f64) -> Model {
    model.map_params(|v| v * c)
}

/// `½(row_i + row_j)` of a linear classifier's weight matrix.
pub fn merge_templates(classifier: &Model, i: usize, j: usize) -> Result<Tensor> {
    let rows = crate::model::template_rows(classifier)?;
    let k = rows.rows();
    if i >= k || j >= k {
        return Err(Error::domain(format!("template indices ({i}, {j}) out of range for {k} classes")));
    }
    let merged = rows
        .row(i)
        .iter()
        .zip(rows.row(j))
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Tensor::vector(merged)
}
