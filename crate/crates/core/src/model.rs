//! Feedforward MLP, its loss heads, and the exact backpropagation oracle
//! every learning rule is measured against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EbmError, Result};
use crate::linalg::{activation_derivative, apply_activation, ActivationKind, Matrix, Vector};

/// Loss head applied at the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Softmax output with cross-entropy loss.
    SoftmaxCrossEntropy,
    /// Linear output with `0.5 * |x_L - T|^2`.
    LinearSquaredError,
}

impl OutputHead {
    pub fn activation(self) -> ActivationKind {
        match self {
            OutputHead::SoftmaxCrossEntropy => ActivationKind::Softmax,
            OutputHead::LinearSquaredError => ActivationKind::Linear,
        }
    }
}

impl std::str::FromStr for OutputHead {
    type Err = EbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_crossentropy" | "softmax" | "ce" => Ok(Self::SoftmaxCrossEntropy),
            "linear_squared_error" | "squared" | "mse" => Ok(Self::LinearSquaredError),
            other => Err(EbmError::InvalidConfig(format!("unknown output head '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: ActivationKind,
    pub output_head: OutputHead,
}

impl NetworkSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden_activation: ActivationKind,
        output_head: OutputHead,
    ) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            hidden_activation,
            output_head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(EbmError::InvalidConfig(format!(
                "need at least one hidden layer, got sizes {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(EbmError::InvalidConfig("layer sizes must be positive".into()));
        }
        if self.hidden_activation == ActivationKind::Softmax {
            return Err(EbmError::InvalidConfig(
                "softmax is only allowed in the output head".into(),
            ));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_sizes[self.depth()]
    }

    /// Activation producing layer `l` (1-based; `l == L` is the head).
    pub fn activation_of(&self, l: usize) -> ActivationKind {
        if l == self.depth() {
            self.output_head.activation()
        } else {
            self.hidden_activation
        }
    }

    /// Human-readable `784-128-64-10` form.
    pub fn sizes_label(&self) -> String {
        self.layer_sizes
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Weights `W_l` (shape `sizes[l+1] x sizes[l]`) and biases `b_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

/// Per-parameter gradients, shaped exactly like a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vector,
    pub target: Vector,
}

impl Sample {
    pub fn new(input: Vector, target: Vector) -> Self {
        Self { input, target }
    }

    /// Index of the hot entry of a one-hot target.
    pub fn label(&self) -> usize {
        self.target.argmax()
    }
}

pub fn one_hot(label: usize, classes: usize) -> Vector {
    Vector::basis(classes, label)
}

impl ParameterSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let s = &spec.layer_sizes;
        Self {
            weights: (0..spec.depth()).map(|l| Matrix::zeros(s[l + 1], s[l])).collect(),
            biases: (0..spec.depth()).map(|l| Vector::zeros(s[l + 1])).collect(),
        }
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let s = &spec.layer_sizes;
        if self.weights.len() != spec.depth() || self.biases.len() != spec.depth() {
            return Err(EbmError::Shape(format!(
                "parameter set has {} weight / {} bias layers, network has {}",
                self.weights.len(),
                self.biases.len(),
                spec.depth()
            )));
        }
        for l in 0..spec.depth() {
            if self.weights[l].shape() != (s[l + 1], s[l]) || self.biases[l].len() != s[l + 1] {
                return Err(EbmError::Shape(format!(
                    "layer {l}: weight {:?} / bias {} vs expected {}x{}",
                    self.weights[l].shape(),
                    self.biases[l].len(),
                    s[l + 1],
                    s[l]
                )));
            }
        }
        Ok(())
    }

    /// Every weight multiplied by `factor`; biases untouched.
    pub fn scaled_weights(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w.scale(factor)).collect(),
            biases: self.biases.clone(),
        }
    }

    /// `self - lr * step`
    pub fn apply_step(&self, lr: f64, step: &GradientSet) -> Result<Self> {
        Ok(Self {
            weights: self
                .weights
                .iter()
                .zip(&step.weight_grads)
                .map(|(w, g)| w.axpy(-lr, g))
                .collect::<Result<_>>()?,
            biases: self
                .biases
                .iter()
                .zip(&step.bias_grads)
                .map(|(b, g)| b.axpy(-lr, g))
                .collect::<Result<_>>()?,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Matrix::all_finite) && self.biases.iter().all(Vector::all_finite)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>()
            + self.biases.iter().map(Vector::len).sum::<usize>()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    /// Mutable access to scalar parameter `index` in [`flatten`](Self::flatten) order.
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        param_mut(&mut self.weights, &mut self.biases, index)
    }
}

impl GradientSet {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            weight_grads: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            bias_grads: params.biases.iter().map(|b| Vector::zeros(b.len())).collect(),
        }
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self::zeros_like(&ParameterSet::zeros(spec))
    }

    pub fn depth(&self) -> usize {
        self.weight_grads.len()
    }

    pub fn same_shape(&self, other: &GradientSet) -> bool {
        self.weight_grads.len() == other.weight_grads.len()
            && self.bias_grads.len() == other.bias_grads.len()
            && self
                .weight_grads
                .iter()
                .zip(&other.weight_grads)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .bias_grads
                .iter()
                .zip(&other.bias_grads)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn mirrors(&self, params: &ParameterSet) -> bool {
        self.same_shape(&GradientSet::zeros_like(params))
    }

    fn check_shape(&self, other: &GradientSet) -> Result<()> {
        if !self.same_shape(other) {
            return Err(EbmError::Shape("gradient sets have different shapes".into()));
        }
        Ok(())
    }

    pub fn add(&self, other: &GradientSet) -> Result<GradientSet> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &GradientSet) -> Result<GradientSet> {
        self.axpy(-1.0, other)
    }

    /// `self + factor * other`
    pub fn axpy(&self, factor: f64, other: &GradientSet) -> Result<GradientSet> {
        self.check_shape(other)?;
        Ok(GradientSet {
            weight_grads: self
                .weight_grads
                .iter()
                .zip(&other.weight_grads)
                .map(|(a, b)| a.axpy(factor, b))
                .collect::<Result<_>>()?,
            bias_grads: self
                .bias_grads
                .iter()
                .zip(&other.bias_grads)
                .map(|(a, b)| a.axpy(factor, b))
                .collect::<Result<_>>()?,
        })
    }

    pub fn scale(&self, factor: f64) -> GradientSet {
        GradientSet {
            weight_grads: self.weight_grads.iter().map(|m| m.scale(factor)).collect(),
            bias_grads: self.bias_grads.iter().map(|v| v.scale(factor)).collect(),
        }
    }

    /// Scale the gradients of weight layer `l` (weight and bias) by `factor`.
    pub fn scale_layer(&mut self, l: usize, factor: f64) {
        self.weight_grads[l] = self.weight_grads[l].scale(factor);
        self.bias_grads[l] = self.bias_grads[l].scale(factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.weight_grads, &self.bias_grads)
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        param_mut(&mut self.weight_grads, &mut self.bias_grads, index)
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn max_abs_diff(&self, other: &GradientSet) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.weight_grads.iter().all(Matrix::all_finite)
            && self.bias_grads.iter().all(Vector::all_finite)
    }

    /// Mean of a non-empty list of gradient sets, summed in list order.
    pub fn mean(sets: &[GradientSet]) -> Result<GradientSet> {
        let (first, rest) = sets
            .split_first()
            .ok_or_else(|| EbmError::Usage("mean of zero gradient sets".into()))?;
        let mut acc = first.clone();
        for g in rest {
            acc = acc.add(g)?;
        }
        Ok(acc.scale(1.0 / sets.len() as f64))
    }
}

/// Weights (row-major, layer by layer) then biases.
fn flatten(weights: &[Matrix], biases: &[Vector]) -> Vec<f64> {
    let mut out = Vec::new();
    for w in weights {
        out.extend_from_slice(w.as_slice());
    }
    for b in biases {
        out.extend_from_slice(b.as_slice());
    }
    out
}

fn param_mut<'a>(weights: &'a mut [Matrix], biases: &'a mut [Vector], mut index: usize) -> &'a mut f64 {
    for w in weights.iter_mut() {
        let n = w.as_slice().len();
        if index < n {
            return &mut w.as_mut_slice()[index];
        }
        index -= n;
    }
    for b in biases.iter_mut() {
        if index < b.len() {
            return &mut b.as_mut_slice()[index];
        }
        index -= b.len();
    }
    panic!("parameter index out of range");
}

/// Xavier-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = &spec.layer_sizes;
    let weights = (0..spec.depth())
        .map(|l| {
            let (fan_in, fan_out) = (s[l], s[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Matrix::new(fan_out, fan_in, data).expect("shape is consistent by construction")
        })
        .collect();
    ParameterSet {
        weights,
        biases: (0..spec.depth()).map(|l| Vector::zeros(s[l + 1])).collect(),
    }
}

/// Activities and pre-activations of one forward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `x_0 .. x_L`
    pub activities: Vec<Vector>,
    /// `z_1 .. z_L` stored at indices `1..=L`; index 0 is empty.
    pub preactivations: Vec<Vector>,
}

/// Pre-activation `W_{l-1} x_{l-1} + b_{l-1}` of layer `l`.
pub fn preactivation(params: &ParameterSet, l: usize, below: &Vector) -> Result<Vector> {
    params.weights[l - 1].matvec(below)?.add(&params.biases[l - 1])
}

pub fn forward_trace(spec: &NetworkSpec, params: &ParameterSet, input: &Vector) -> Result<ForwardTrace> {
    params.check_against(spec)?;
    if input.len() != spec.input_dim() {
        return Err(EbmError::Shape(format!(
            "input of length {} fed to a network expecting {}",
            input.len(),
            spec.input_dim()
        )));
    }
    let mut activities = vec![input.clone()];
    let mut preactivations = vec![Vector::zeros(0)];
    for l in 1..=spec.depth() {
        let z = preactivation(params, l, &activities[l - 1])?;
        activities.push(apply_activation(spec.activation_of(l), &z));
        preactivations.push(z);
    }
    Ok(ForwardTrace {
        activities,
        preactivations,
    })
}

/// `x_0 = input`, `x_l = f(W_{l-1} x_{l-1} + b_{l-1})`, head at layer L.
pub fn forward_pass(spec: &NetworkSpec, params: &ParameterSet, input: &Vector) -> Result<Vec<Vector>> {
    Ok(forward_trace(spec, params, input)?.activities)
}

/// Cross-entropy for the softmax head, `0.5 * |output - target|^2` for the
/// squared head.
pub fn supervised_loss(head: OutputHead, output: &Vector, target: &Vector) -> Result<f64> {
    if output.len() != target.len() {
        return Err(EbmError::Shape(format!(
            "output length {} vs target length {}",
            output.len(),
            target.len()
        )));
    }
    match head {
        OutputHead::LinearSquaredError => Ok(0.5 * output.sub(target)?.norm_sq()),
        OutputHead::SoftmaxCrossEntropy => {
            let is_distribution = output.iter().all(|&p| (0.0..=1.0).contains(&p))
                && (output.sum() - 1.0).abs() <= 1e-9;
            if !is_distribution {
                return Err(EbmError::Domain(
                    "cross-entropy needs a probability vector as output".into(),
                ));
            }
            Ok(-output
                .iter()
                .zip(target.iter())
                .filter(|(_, &t)| t != 0.0)
                .map(|(&p, &t)| t * p.max(f64::MIN_POSITIVE).ln())
                .sum::<f64>())
        }
    }
}

/// Gradient of the supervised loss w.r.t. the output pre-activation.
/// Both heads reduce to `x_L - T` (softmax is fused with cross-entropy).
pub fn output_delta(output: &Vector, target: &Vector) -> Result<Vector> {
    output.sub(target)
}

/// Gradients and per-layer adjoints from one reverse sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BackpropResult {
    pub grads: GradientSet,
    /// `∂L/∂x_l` for `l = 0..=L` (index L holds `∂L/∂z_L`).
    pub adjoints: Vec<Vector>,
    pub loss: f64,
    pub trace: ForwardTrace,
}

/// Exact reverse-mode gradients of [`supervised_loss`].
pub fn backprop_oracle(spec: &NetworkSpec, params: &ParameterSet, sample: &Sample) -> Result<GradientSet> {
    Ok(backprop_full(spec, params, sample)?.grads)
}

pub fn backprop_full(spec: &NetworkSpec, params: &ParameterSet, sample: &Sample) -> Result<BackpropResult> {
    let trace = forward_trace(spec, params, &sample.input)?;
    let depth = spec.depth();
    let x = &trace.activities;
    let loss = supervised_loss(spec.output_head, &x[depth], &sample.target)?;

    let mut grads = GradientSet::zeros_like(params);
    let mut adjoints = vec![Vector::zeros(0); depth + 1];
    let mut delta = output_delta(&x[depth], &sample.target)?;
    adjoints[depth] = delta.clone();
    for l in (1..=depth).rev() {
        grads.weight_grads[l - 1] = Matrix::outer(&delta, &x[l - 1]);
        grads.bias_grads[l - 1] = delta.clone();
        let adjoint = params.weights[l - 1].matvec_transposed(&delta)?;
        if l > 1 {
            let d = activation_derivative(spec.activation_of(l - 1), &trace.preactivations[l - 1])?;
            delta = adjoint.hadamard(&d)?;
        }
        adjoints[l - 1] = adjoint;
    }
    Ok(BackpropResult {
        grads,
        adjoints,
        loss,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize], act: ActivationKind, head: OutputHead) -> NetworkSpec {
        NetworkSpec::new(sizes.to_vec(), act, head).unwrap()
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(NetworkSpec::new(vec![3, 2], ActivationKind::Relu, OutputHead::LinearSquaredError).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2], ActivationKind::Relu, OutputHead::LinearSquaredError).is_err());
        assert!(NetworkSpec::new(vec![3, 4, 2], ActivationKind::Softmax, OutputHead::LinearSquaredError).is_err());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let s = spec(&[784, 128, 64, 10], ActivationKind::Relu, OutputHead::SoftmaxCrossEntropy);
        let a = init_params(&s, 7);
        let b = init_params(&s, 7);
        assert_eq!(a, b);
        let shapes: Vec<_> = a.weights.iter().map(Matrix::shape).collect();
        assert_eq!(shapes, vec![(128, 784), (64, 128), (10, 64)]);
        assert!(a.biases.iter().all(|b| b.max_abs() == 0.0));
        assert_ne!(init_params(&s, 8), a);
    }

    #[test]
    fn init_bounds_and_zero_mean() {
        // 400x250 = 10^5 draws from U(-a, a); the mean has standard error a / sqrt(3 * 10^5).
        let s = spec(&[250, 400, 2], ActivationKind::Relu, OutputHead::LinearSquaredError);
        let p = init_params(&s, 1);
        let w = p.weights[0].as_slice();
        assert_eq!(w.len(), 100_000);
        let bound = (6.0f64 / 650.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let se = bound / (3.0 * w.len() as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean} vs 3se {}", 3.0 * se);
    }

    #[test]
    fn forward_identity_relu() {
        let s = spec(&[3, 3, 3], ActivationKind::Relu, OutputHead::LinearSquaredError);
        let mut p = ParameterSet::zeros(&s);
        p.weights[0] = Matrix::identity(3);
        let v = Vector::new(vec![0.5, 0.0, 2.0]);
        let x = forward_pass(&s, &p, &v).unwrap();
        assert_eq!(x[1], v);
    }

    #[test]
    fn forward_zero_weights_softmax_is_uniform() {
        let s = spec(&[5, 4, 10], ActivationKind::Relu, OutputHead::SoftmaxCrossEntropy);
        let p = ParameterSet::zeros(&s);
        let x = forward_pass(&s, &p, &Vector::filled(5, 0.3)).unwrap();
        assert!(x[2].iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let s = spec(&[5, 4, 3], ActivationKind::Relu, OutputHead::LinearSquaredError);
        let p = init_params(&s, 0);
        assert!(matches!(forward_pass(&s, &p, &Vector::zeros(4)), Err(EbmError::Shape(_))));
    }

    #[test]
    fn forward_matches_hand_rolled_loop() {
        let s = spec(&[4, 3, 2], ActivationKind::Tanh, OutputHead::LinearSquaredError);
        let mut p = init_params(&s, 3);
        p.biases[0] = Vector::new(vec![0.1, -0.2, 0.3]);
        p.biases[1] = Vector::new(vec![-0.05, 0.07]);
        let input = [0.2, 0.9, 0.4, 0.1];
        // Independent scalar-loop forward pass.
        let mut h = [0.0; 3];
        for (i, hi) in h.iter_mut().enumerate() {
            let mut z = p.biases[0][i];
            for (j, xj) in input.iter().enumerate() {
                z += p.weights[0].get(i, j) * xj;
            }
            *hi = z.tanh();
        }
        let mut y = [0.0; 2];
        for (i, yi) in y.iter_mut().enumerate() {
            let mut z = p.biases[1][i];
            for (j, hj) in h.iter().enumerate() {
                z += p.weights[1].get(i, j) * hj;
            }
            *yi = z;
        }
        let x = forward_pass(&s, &p, &Vector::new(input.to_vec())).unwrap();
        for i in 0..3 {
            assert!((x[1][i] - h[i]).abs() < 1e-15);
        }
        for i in 0..2 {
            assert!((x[2][i] - y[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_examples() {
        let t = Vector::new(vec![0.0, 1.0]);
        assert_eq!(supervised_loss(OutputHead::LinearSquaredError, &t, &t).unwrap(), 0.0);
        let out = Vector::new(vec![1.0, 0.0]);
        assert_eq!(supervised_loss(OutputHead::LinearSquaredError, &out, &t).unwrap(), 1.0);
        let uniform = Vector::filled(10, 0.1);
        let ce = supervised_loss(OutputHead::SoftmaxCrossEntropy, &uniform, &one_hot(3, 10)).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        assert!((ce - std::f64::consts::LN_10).abs() < 1e-6);
        assert!(matches!(
            supervised_loss(OutputHead::SoftmaxCrossEntropy, &Vector::filled(10, 0.5), &one_hot(3, 10)),
            Err(EbmError::Domain(_))
        ));
    }

    #[test]
    fn oracle_zero_when_output_hits_target() {
        let s = spec(&[3, 4, 2], ActivationKind::Tanh, OutputHead::LinearSquaredError);
        let p = init_params(&s, 2);
        let input = Vector::new(vec![0.3, 0.1, 0.7]);
        let out = forward_pass(&s, &p, &input).unwrap().pop().unwrap();
        let g = backprop_oracle(&s, &p, &Sample::new(input, out)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(g.mirrors(&p));
    }

    #[test]
    fn oracle_output_layer_closed_form() {
        // dL/dW for the top linear layer is (W x + b - T) x^T.
        let s = spec(&[2, 3, 2], ActivationKind::Relu, OutputHead::LinearSquaredError);
        let p = init_params(&s, 11);
        let sample = Sample::new(Vector::new(vec![0.4, 0.8]), Vector::new(vec![1.0, -1.0]));
        let x = forward_pass(&s, &p, &sample.input).unwrap();
        let g = backprop_oracle(&s, &p, &sample).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let expected = (x[2][i] - sample.target[i]) * x[1][j];
                assert!((g.weight_grads[1].get(i, j) - expected).abs() < 1e-15);
            }
        }
    }
}
