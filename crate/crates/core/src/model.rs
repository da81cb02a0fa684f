//! Fully connected networks: linear classifiers and MLPs.
//!
//! Layer `m` computes `y⁽ᵐ⁾ = φ(W⁽ᵐ⁾ y⁽ᵐ⁻¹⁾ + b⁽ᵐ⁾)` with `W⁽ᵐ⁾` stored as an
//! `out × in` matrix. The last layer always uses the identity activation, so
//! its output is the pre-softmax logits.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{matmul_bt, sample_gaussian, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    /// Lipschitz constant; all supported activations are 1-Lipschitz with `φ(0) = 0`.
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at `z`; ReLU uses 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::domain(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || bias.len() != weight.rows() {
            return Err(Error::shape(
                "Layer::new",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Bias-free layer.
    pub fn from_weight(weight: Tensor, activation: Activation) -> Result<Self> {
        let bias = Tensor::zeros(&[weight.rows()]);
        Self::new(weight, bias, activation)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `z = x Wᵀ + b` for a batch `x: [n × in]`.
    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = matmul_bt(x, &self.weight)?;
        let out = self.out_dim();
        let bias = self.bias.data();
        for row in z.data_mut().chunks_mut(out) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn map_params(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            weight: self.weight.map(&f),
            bias: self.bias.map(&f),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelMeta {
    /// Seed of the stream the model was initialised from.
    pub seed: u64,
    /// Stream id of that init stream (the model's index in its pool).
    pub stream: u64,
    /// Width chain, e.g. `"256-64-10"`.
    pub arch: String,
    /// Hash of the training configuration that produced the weights (0 if untrained).
    pub config_hash: u64,
    /// Streams of the models averaged into this one; empty for a trained model.
    pub constituents: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    pub meta: ModelMeta,
}

impl Model {
    /// Checks that layer widths chain and that the last layer is linear.
    pub fn new(layers: Vec<Layer>, meta: ModelMeta) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::UnsupportedArch("a model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Model::new",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::UnsupportedArch(
                "the final layer must use the identity activation (logits)".into(),
            ));
        }
        Ok(Self { layers, meta })
    }

    /// Model built from layers with a generated arch tag and default metadata.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut model = Self::new(layers, ModelMeta::default())?;
        model.meta.arch = arch_tag(&model.widths());
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// True when both models have identical layer shapes and activations.
    pub fn same_architecture(&self, other: &Model) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.activation == b.activation
            })
    }

    /// Applies `f` to every weight and bias entry.
    pub fn map_params(&self, f: impl Fn(f64) -> f64) -> Model {
        Model {
            layers: self.layers.iter().map(|l| l.map_params(&f)).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Rounds every parameter to the nearest `f32`, as stored on disk.
    pub fn quantized_f32(&self) -> Model {
        self.map_params(|v| v as f32 as f64)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

pub fn arch_tag(widths: &[usize]) -> String {
    widths
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

/// He-style init: weights `N(0, 2/fan_in)`, biases zero. Hidden layers use
/// `activation`; the last layer is always identity.
pub fn init_model(widths: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Model> {
    if widths.len() < 2 {
        return Err(Error::domain(format!(
            "architecture needs at least 2 widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::domain(format!("layer widths must be positive, got {widths:?}")));
    }
    let n_layers = widths.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for (i, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = sample_gaussian(rng, &[fan_out, fan_in], 0.0, std)?;
        let act = if i + 1 == n_layers {
            Activation::Identity
        } else {
            activation
        };
        layers.push(Layer::from_weight(weight, act)?);
    }
    Model::new(
        layers,
        ModelMeta {
            seed: rng.seed(),
            stream: rng.stream_id(),
            arch: arch_tag(widths),
            config_hash: 0,
            constituents: Vec::new(),
        },
    )
}

/// Per-layer values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    /// Pre-activations `z⁽ᵐ⁾`, one per layer.
    pub pre_activations: Vec<Tensor>,
    /// Post-activations `y⁽ᵐ⁾`, one per layer; the last one is the logits.
    pub outputs: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("models have at least one layer")
    }

    /// Input to the final affine layer (the raw input for a linear classifier).
    pub fn features(&self) -> &Tensor {
        match self.outputs.len() {
            1 => &self.input,
            n => &self.outputs[n - 2],
        }
    }

    pub fn into_logits(mut self) -> Tensor {
        self.outputs.pop().expect("models have at least one layer")
    }
}

pub fn forward(model: &Model, x: &Tensor) -> Result<ForwardTrace> {
    if x.ndim() != 2 || x.cols() != model.input_dim() {
        return Err(Error::shape(
            "forward",
            format!("input {:?} for model expecting {} features", x.shape(), model.input_dim()),
        ));
    }
    let mut pre_activations = Vec::with_capacity(model.depth());
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.depth());
    for layer in model.layers() {
        let prev = outputs.last().unwrap_or(x);
        let z = layer.pre_activation(prev)?;
        let act = layer.activation;
        let y = match act {
            Activation::Identity => z.clone(),
            _ => z.map(|v| act.apply(v)),
        };
        pre_activations.push(z);
        outputs.push(y);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        pre_activations,
        outputs,
    })
}

/// Logits only.
pub fn predict(model: &Model, x: &Tensor) -> Result<Tensor> {
    Ok(forward(model, x)?.into_logits())
}

/// Class templates of a linear classifier: row `k` scores class `k` by inner
/// product with the flattened input and reshapes to the input image.
pub fn template_rows(model: &Model) -> Result<Tensor> {
    if model.depth() != 1 {
        return Err(Error::UnsupportedArch(format!(
            "template rows need a single-layer classifier, model has {} layers",
            model.depth()
        )));
    }
    Ok(model.layers()[0].weight.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(rows: &[&[f64]], bias: &[f64], act: Activation) -> Layer {
        Layer::new(
            Tensor::from_rows(rows).unwrap(),
            Tensor::vector(bias.to_vec()).unwrap(),
            act,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_model(&[4, 3], Activation::Relu, &mut RngStream::new(9, 2)).unwrap();
        let b = init_model(&[4, 3], Activation::Relu, &mut RngStream::new(9, 2)).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
        assert_eq!(a.meta.arch, "4-3");
        assert_eq!((a.meta.seed, a.meta.stream), (9, 2));
        assert_eq!(a.layers()[0].activation, Activation::Identity);
    }

    #[test]
    fn init_linear_classifier_shape() {
        let m = init_model(&[3072, 100], Activation::Identity, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(template_rows(&m).unwrap().shape(), &[100, 3072]);
    }

    #[test]
    fn init_rejects_bad_widths() {
        let mut rng = RngStream::new(0, 0);
        assert!(init_model(&[4], Activation::Relu, &mut rng).is_err());
        assert!(init_model(&[4, 0, 2], Activation::Relu, &mut rng).is_err());
    }

    #[test]
    fn identity_network_returns_input() {
        let m = Model::from_layers(vec![Layer::from_weight(Tensor::identity(3), Activation::Identity).unwrap()])
            .unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]]).unwrap();
        assert_eq!(predict(&m, &x).unwrap(), x);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let m = Model::from_layers(vec![
            Layer::from_weight(Tensor::identity(2), Activation::Relu).unwrap(),
            Layer::from_weight(Tensor::identity(2), Activation::Identity).unwrap(),
        ])
        .unwrap();
        let x = Tensor::from_rows(&[[-1.0, 2.0]]).unwrap();
        let trace = forward(&m, &x).unwrap();
        assert_eq!(trace.outputs[0].data(), &[0.0, 2.0]);
        assert_eq!(trace.features().data(), &[0.0, 2.0]);
    }

    #[test]
    fn two_layer_forward_matches_hand_computation() {
        // z1 = [1*1 + 2*(-1) + 0.5, -1*1 + 1*(-1) + 0] = [-0.5, -2]  -> relu -> [0, 0]
        // with x = [2, 1]: z1 = [2 + 2 + 0.5, -2 + 1] = [4.5, -1] -> [4.5, 0]
        // logits = [[1, -1], [2, 3]] · [4.5, 0] + [0.25, -1] = [4.75, 8]
        let m = Model::from_layers(vec![
            layer(&[&[1.0, 2.0], &[-1.0, 1.0]], &[0.5, 0.0], Activation::Relu),
            layer(&[&[1.0, -1.0], &[2.0, 3.0]], &[0.25, -1.0], Activation::Identity),
        ])
        .unwrap();
        let x = Tensor::from_rows(&[[1.0, -1.0], [2.0, 1.0]]).unwrap();
        let trace = forward(&m, &x).unwrap();
        assert_eq!(trace.outputs[0].data(), &[0.0, 0.0, 4.5, 0.0]);
        assert_eq!(trace.logits().data(), &[0.25, -1.0, 4.75, 8.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_model(&[3, 2], Activation::Identity, &mut RngStream::new(0, 0)).unwrap();
        assert!(forward(&m, &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn model_requires_linear_head_and_chained_widths() {
        let bad_head = Model::from_layers(vec![Layer::from_weight(Tensor::identity(2), Activation::Relu).unwrap()]);
        assert!(matches!(bad_head, Err(Error::UnsupportedArch(_))));
        let unchained = Model::from_layers(vec![
            Layer::from_weight(Tensor::zeros(&[3, 2]), Activation::Relu).unwrap(),
            Layer::from_weight(Tensor::zeros(&[2, 2]), Activation::Identity).unwrap(),
        ]);
        assert!(matches!(unchained, Err(Error::Shape { .. })));
        assert!(Model::from_layers(vec![]).is_err());
    }

    #[test]
    fn template_rows_is_the_weight_matrix() {
        let m = init_model(&[4, 2], Activation::Identity, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(template_rows(&m).unwrap(), m.layers()[0].weight);
        let mlp = init_model(&[4, 3, 2], Activation::Relu, &mut RngStream::new(1, 1)).unwrap();
        assert!(matches!(template_rows(&mlp), Err(Error::UnsupportedArch(_))));
    }

    #[test]
    fn activation_parsing_and_lipschitz() {
        for a in [Activation::Identity, Activation::Relu, Activation::Tanh] {
            assert_eq!(a.as_str().parse::<Activation>().unwrap(), a);
            assert_eq!(a.lipschitz(), 1.0);
            assert_eq!(a.apply(0.0), 0.0);
        }
        assert!("gelu".parse::<Activation>().is_err());
    }
}
