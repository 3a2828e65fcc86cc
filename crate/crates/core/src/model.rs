//! Dense feed-forward classifier with analytic gradients.
//!
//! Teachers and students share this architecture. Layer weights are stored
//! row-major with shape `(out_dim, in_dim)`; the final layer is linear and
//! produces logits.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, LogitVector, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`. ReLU uses 0 at 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
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
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArchitecture(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dims: vec![32],
            num_classes: 3,
            activation: Activation::Relu,
        }
    }
}

impl MlpArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArchitecture("input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArchitecture(
                "hidden layer widths must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArchitecture("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// `(in_dim, out_dim)` for each layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.in_dim + inp]
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            out.push(dot + self.biases[o]);
        }
    }
}

/// Weights and biases of every layer, plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParameters {
    activation: Activation,
    layers: Vec<DenseLayer>,
}

/// Values cached by a forward pass for use by [`MlpParameters::accumulate_gradients`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` feeds layer `l`.
    activations: Vec<Vec<f64>>,
    /// Pre-activation values of each hidden layer.
    pre_activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probabilities(&self) -> Result<ProbVector> {
        softmax_slice(&self.logits)
    }
}

/// `∂L/∂θ`, shape-congruent with the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &MlpParameters) -> Self {
        Self {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// All gradient entries in parameter order (layer by layer, weights then biases).
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub(crate) fn is_congruent(&self, params: &MlpParameters) -> bool {
        self.weights.len() == params.layers.len()
            && params.layers.iter().enumerate().all(|(i, l)| {
                self.weights[i].len() == l.weights.len() && self.biases[i].len() == l.biases.len()
            })
    }
}

/// Glorot-uniform weights `U[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_parameters(arch: &MlpArchitecture, seed: u64) -> Result<MlpParameters> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(in_dim, out_dim)| {
            let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite positive bound");
            let mut layer = DenseLayer::zeros(in_dim, out_dim);
            layer.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
            layer
        })
        .collect();
    Ok(MlpParameters {
        activation: arch.activation,
        layers,
    })
}

impl MlpParameters {
    /// Builds parameters from explicit layers, checking that consecutive shapes chain.
    pub fn from_layers(activation: Activation, layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.len() != layer.in_dim * layer.out_dim {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    message: format!(
                        "expected {} weights, found {}",
                        layer.in_dim * layer.out_dim,
                        layer.weights.len()
                    ),
                });
            }
            if layer.biases.len() != layer.out_dim {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    message: format!(
                        "expected {} biases, found {}",
                        layer.out_dim,
                        layer.biases.len()
                    ),
                });
            }
            if i > 0 && layers[i - 1].out_dim != layer.in_dim {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    message: format!(
                        "input width {} does not match previous output width {}",
                        layer.in_dim,
                        layers[i - 1].out_dim
                    ),
                });
            }
            if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    message: "non-finite parameter".into(),
                });
            }
        }
        let params = Self { activation, layers };
        params.architecture().validate()?;
        Ok(params)
    }

    pub fn architecture(&self) -> MlpArchitecture {
        MlpArchitecture {
            input_dim: self.layers[0].in_dim,
            hidden_dims: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.out_dim)
                .collect(),
            num_classes: self.layers[self.layers.len() - 1].out_dim,
            activation: self.activation,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }


    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters in the same order as [`GradientSet::iter`].
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// Euclidean distance between two parameter sets of the same shape.
    pub fn distance(&self, other: &MlpParameters) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite feature".into()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<LogitVector> {
        let trace = self.forward_trace(input)?;
        LogitVector::new(trace.logits)
    }

    pub fn predict_proba(&self, input: &[f64]) -> Result<ProbVector> {
        softmax_slice(&self.forward_trace(input)?.logits)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        activations.push(input.to_vec());
        let mut z = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&activations[l], &mut z);
            if l == last {
                break;
            }
            activations.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            pre_activations.push(std::mem::take(&mut z));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("non-finite logits".into()));
        }
        Ok(ForwardTrace {
            activations,
            pre_activations,
            logits: z,
        })
    }

    /// Gradient of a scalar loss with upstream `∂L/∂logits` at `input`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<GradientSet> {
        let trace = self.forward_trace(input)?;
        let mut grads = GradientSet::zeros_like(self);
        self.accumulate_gradients(&trace, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale · ∂L/∂θ` into `grads`, reusing the activations in `trace`.
    pub fn accumulate_gradients(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        scale: f64,
        grads: &mut GradientSet,
    ) -> Result<()> {
        if upstream.len() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient",
                expected: self.num_classes(),
                found: upstream.len(),
            });
        }
        if !grads.is_congruent(self) {
            return Err(Error::DimensionMismatch {
                context: "gradient set",
                expected: self.layers.len(),
                found: grads.weights.len(),
            });
        }
        let mut delta: Vec<f64> = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_prev = &trace.activations[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for (o, &d) in delta.iter().enumerate() {
                let sd = scale * d;
                gb[o] += sd;
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &a) in row.iter_mut().zip(a_prev) {
                    *g += sd * a;
                }
            }
            if l == 0 {
                break;
            }
            let z_prev = &trace.pre_activations[l - 1];
            let mut next = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (n, &w) in next.iter_mut().zip(row) {
                    *n += w * d;
                }
            }
            for (n, &z) in next.iter_mut().zip(z_prev) {
                *n *= self.activation.derivative(z);
            }
            delta = next;
        }
        Ok(())
    }
}
