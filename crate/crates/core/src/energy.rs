//! Energy functions of the layered networks and their analytic gradients.
//!
//! Two energies are supported:
//!
//! * **Predictive coding**: `E = Σ_{l<L} s_l Σ_i Π_{l,i} e_{l,i}^2 + λ S`, with
//!   `e_l = x_l - f(W_{l-1} x_{l-1} + b_{l-1})`. The output layer is not a free
//!   variable; its prediction error against the target forms the supervised
//!   term `S` (`Σ Π_L (T - μ_L)^2` for the squared head, cross-entropy of the
//!   softmax prediction for the softmax head). No ½ factor is used, so every
//!   derived gradient carries a factor 2.
//! * **Hopfield** (layered, linear units, unit leak):
//!   `E_l = ½|x_l|^2 - x_lᵀ(W_{l-1} x_{l-1} + b_{l-1})` for `l = 1..=L`, with
//!   `S = ½|x_L - T|^2`.
//!
//! The feedback gain `γ` weighs every top-down contribution to a layer's
//! dynamics. It is realised as the layer scaling `s_l = γ^(l-L)`, so the
//! dynamics stay a (layer-preconditioned) gradient descent on one scalar
//! energy. At `γ = 1` all scales are 1.

use serde::{Deserialize, Serialize};

use crate::error::{EbmError, Result};
use crate::linalg::{activation_derivative, apply_activation, ActivationKind, Matrix, Vector};
use crate::model::{
    forward_pass, preactivation, GradientSet, NetworkSpec, OutputHead, ParameterSet, Sample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    PredictiveCoding,
    Hopfield,
}

impl std::str::FromStr for EnergyKind {
    type Err = EbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pc" | "predictive_coding" => Ok(Self::PredictiveCoding),
            "hopfield" => Ok(Self::Hopfield),
            other => Err(EbmError::InvalidConfig(format!("unknown energy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Output unconstrained, supervised term switched off.
    Free,
    /// Output pinned to the target.
    Clamped,
    /// Output pulled toward the target by the λ-weighted loss.
    Nudged,
}

impl OutputMode {
    pub fn name(self) -> &'static str {
        match self {
            OutputMode::Free => "free",
            OutputMode::Clamped => "clamped",
            OutputMode::Nudged => "nudged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub lambda: f64,
    pub feedback_gain: f64,
    /// Diagonal precisions for layers `1..=L` (entry `l - 1`). Empty means identity.
    pub precisions: Vec<Vector>,
    pub output_mode: OutputMode,
}

impl PhaseConfig {
    pub fn free() -> Self {
        Self {
            lambda: 0.0,
            feedback_gain: 1.0,
            precisions: Vec::new(),
            output_mode: OutputMode::Free,
        }
    }

    pub fn clamped(lambda: f64) -> Self {
        Self {
            lambda,
            output_mode: OutputMode::Clamped,
            ..Self::free()
        }
    }

    pub fn nudged(lambda: f64) -> Self {
        Self {
            lambda,
            output_mode: OutputMode::Nudged,
            ..Self::free()
        }
    }

    pub fn with_feedback_gain(mut self, gamma: f64) -> Self {
        self.feedback_gain = gamma;
        self
    }

    pub fn with_precisions(mut self, precisions: Vec<Vector>) -> Self {
        self.precisions = precisions;
        self
    }

    /// λ as seen by the dynamics: always 0 in the free phase.
    pub fn effective_lambda(&self) -> f64 {
        match self.output_mode {
            OutputMode::Free => 0.0,
            _ => self.lambda,
        }
    }

    /// The same configuration with the output released.
    pub fn as_free(&self) -> Self {
        Self {
            output_mode: OutputMode::Free,
            ..self.clone()
        }
    }

    pub fn has_unit_precisions(&self) -> bool {
        self.precisions
            .iter()
            .all(|p| p.iter().all(|&v| v == 1.0))
    }

    fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(EbmError::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.feedback_gain > 0.0 && self.feedback_gain <= 1.0) {
            return Err(EbmError::InvalidConfig(format!(
                "feedback gain must lie in (0, 1], got {}",
                self.feedback_gain
            )));
        }
        if !self.precisions.is_empty() {
            if self.precisions.len() != spec.depth() {
                return Err(EbmError::Shape(format!(
                    "{} precision vectors for {} layers",
                    self.precisions.len(),
                    spec.depth()
                )));
            }
            for (l, p) in self.precisions.iter().enumerate() {
                if p.len() != spec.layer_sizes[l + 1] {
                    return Err(EbmError::Shape(format!(
                        "precision of layer {} has length {}, layer has {}",
                        l + 1,
                        p.len(),
                        spec.layer_sizes[l + 1]
                    )));
                }
                if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                    return Err(EbmError::Domain(format!(
                        "precision of layer {} has negative or non-finite entries",
                        l + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Network activities `x_0 .. x_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityState {
    pub activities: Vec<Vector>,
}

impl ActivityState {
    pub fn new(activities: Vec<Vector>) -> Self {
        Self { activities }
    }

    /// The free-phase predictive-coding equilibrium: the forward pass.
    pub fn feedforward(spec: &NetworkSpec, params: &ParameterSet, input: &Vector) -> Result<Self> {
        Ok(Self::new(forward_pass(spec, params, input)?))
    }

    pub fn depth(&self) -> usize {
        self.activities.len() - 1
    }

    pub fn layer(&self, l: usize) -> &Vector {
        &self.activities[l]
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let ok = self.activities.len() == spec.layer_sizes.len()
            && self
                .activities
                .iter()
                .zip(&spec.layer_sizes)
                .all(|(x, &n)| x.len() == n);
        if !ok {
            return Err(EbmError::Shape(format!(
                "activity sizes {:?} vs network {:?}",
                self.activities.iter().map(Vector::len).collect::<Vec<_>>(),
                spec.layer_sizes
            )));
        }
        Ok(())
    }

    /// `self + factor * other` over every layer (including `x_0`).
    pub fn axpy(&self, factor: f64, other: &[Vector]) -> Result<Self> {
        Ok(Self::new(
            self.activities
                .iter()
                .zip(other)
                .map(|(a, b)| a.axpy(factor, b))
                .collect::<Result<_>>()?,
        ))
    }

    /// Per-layer difference `self - other`.
    pub fn diff(&self, other: &ActivityState) -> Result<Vec<Vector>> {
        if self.activities.len() != other.activities.len() {
            return Err(EbmError::Shape("activity states of different depth".into()));
        }
        self.activities
            .iter()
            .zip(&other.activities)
            .map(|(a, b)| a.sub(b))
            .collect()
    }
}

/// Decomposition `E = I + λ L` of an energy value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub internal: f64,
    pub supervised: f64,
    /// λ actually applied (0 in the free phase).
    pub lambda: f64,
    /// Scaled layer energies `s_l E_l`; index 0 is always 0.
    pub per_layer_internal: Vec<f64>,
    /// Predictive-coding prediction errors `x_l - μ_l` (index 0 empty); the
    /// entry at `L` is the output error `T - μ_L`. Empty for Hopfield.
    pub prediction_errors: Vec<Vector>,
}

/// A fully evaluated energy at one activity state.
///
/// Built once per state and shared by the energy value and both gradients.
#[derive(Debug, Clone)]
pub struct Evaluation {
    state: ActivityState,
    /// `z_l` for `l = 1..=L` (index 0 empty).
    pre: Vec<Vector>,
    /// `f(z_l)`, the bottom-up prediction of layer l.
    prediction: Vec<Vector>,
    /// `f'(z_l)` for hidden layers (index 0 and L empty).
    slope: Vec<Vector>,
    /// `x_l - μ_l` for PC hidden layers; `T - μ_L` at index L.
    errors: Vec<Vector>,
}

impl Evaluation {
    pub fn state(&self) -> &ActivityState {
        &self.state
    }

    pub fn prediction(&self, l: usize) -> &Vector {
        &self.prediction[l]
    }

    pub fn preactivation(&self, l: usize) -> &Vector {
        &self.pre[l]
    }

    pub fn slope(&self, l: usize) -> &Vector {
        &self.slope[l]
    }

    /// Prediction error of layer `l` (PC only; empty for Hopfield).
    pub fn error(&self, l: usize) -> &Vector {
        &self.errors[l]
    }
}

/// An energy bound to one network, sample and phase.
///
/// The input layer never moves, so its outgoing pre-activation is computed
/// once here.
#[derive(Debug, Clone)]
pub struct EnergyModel<'a> {
    pub kind: EnergyKind,
    pub spec: &'a NetworkSpec,
    pub params: &'a ParameterSet,
    pub sample: &'a Sample,
    pub phase: PhaseConfig,
    first_pre: Vector,
    scales: Vec<f64>,
}

impl<'a> EnergyModel<'a> {
    pub fn new(
        kind: EnergyKind,
        spec: &'a NetworkSpec,
        params: &'a ParameterSet,
        sample: &'a Sample,
        phase: &PhaseConfig,
    ) -> Result<Self> {
        params.check_against(spec)?;
        phase.validate(spec)?;
        if sample.input.len() != spec.input_dim() || sample.target.len() != spec.output_dim() {
            return Err(EbmError::Shape(format!(
                "sample ({} -> {}) does not fit network {}",
                sample.input.len(),
                sample.target.len(),
                spec.sizes_label()
            )));
        }
        if kind == EnergyKind::Hopfield
            && (spec.hidden_activation != ActivationKind::Linear
                || spec.output_head != OutputHead::LinearSquaredError)
        {
            return Err(EbmError::InvalidConfig(
                "the Hopfield energy uses linear units: need linear hidden activation \
                 and the linear squared-error head"
                    .into(),
            ));
        }
        let depth = spec.depth();
        let gamma = phase.feedback_gain;
        let scales = (0..=depth)
            .map(|l| if l == 0 { 0.0 } else { gamma.powi(l as i32 - depth as i32) })
            .collect();
        Ok(Self {
            kind,
            spec,
            params,
            sample,
            phase: phase.clone(),
            first_pre: preactivation(params, 1, &sample.input)?,
            scales,
        })
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    /// Energy scale `s_l = γ^(l-L)` of layer `l`.
    pub fn layer_scale(&self, l: usize) -> f64 {
        self.scales[l]
    }

    /// Layers moved by the inference dynamics.
    pub fn free_layers(&self) -> std::ops::RangeInclusive<usize> {
        free_layers(self.kind, self.spec, self.phase.output_mode)
    }

    fn precision(&self, l: usize) -> Option<&Vector> {
        self.phase.precisions.get(l - 1)
    }

    fn weigh(&self, l: usize, v: &Vector) -> Vector {
        match self.precision(l) {
            Some(p) => v.hadamard(p).expect("precision shape validated"),
            None => v.clone(),
        }
    }

    /// State at which a phase starts: the given activities with the output
    /// layer set according to the mode.
    pub fn prepare(&self, state: &ActivityState) -> Result<ActivityState> {
        state.check_against(self.spec)?;
        if state.activities[0] != self.sample.input {
            return Err(EbmError::Precondition(
                "x_0 must equal the sample input".into(),
            ));
        }
        let mut s = state.clone();
        let depth = self.depth();
        match (self.kind, self.phase.output_mode) {
            (_, OutputMode::Clamped) => s.activities[depth] = self.sample.target.clone(),
            (EnergyKind::PredictiveCoding, _) => {
                s.activities[depth] = self.output_prediction(&s.activities[depth - 1])?;
            }
            (EnergyKind::Hopfield, _) => {}
        }
        Ok(s)
    }

    fn output_prediction(&self, below: &Vector) -> Result<Vector> {
        let z = if self.depth() == 1 {
            self.first_pre.clone()
        } else {
            preactivation(self.params, self.depth(), below)?
        };
        Ok(apply_activation(self.spec.output_head.activation(), &z))
    }

    pub fn evaluate(&self, state: &ActivityState) -> Result<Evaluation> {
        state.check_against(self.spec)?;
        let depth = self.depth();
        let x = &state.activities;
        let mut pre = vec![Vector::zeros(0); depth + 1];
        let mut prediction = vec![Vector::zeros(0); depth + 1];
        let mut slope = vec![Vector::zeros(0); depth + 1];
        let mut errors = vec![Vector::zeros(0); depth + 1];
        for l in 1..=depth {
            let z = if l == 1 {
                self.first_pre.clone()
            } else {
                preactivation(self.params, l, &x[l - 1])?
            };
            let act = self.spec.activation_of(l);
            prediction[l] = apply_activation(act, &z);
            if l < depth {
                slope[l] = activation_derivative(act, &z)?;
            }
            pre[l] = z;
        }
        let mut state = state.clone();
        if self.kind == EnergyKind::PredictiveCoding {
            for l in 1..depth {
                errors[l] = x[l].sub(&prediction[l])?;
            }
            errors[depth] = self.sample.target.sub(&prediction[depth])?;
            // An unclamped PC output just tracks its prediction.
            if self.phase.output_mode != OutputMode::Clamped {
                state.activities[depth] = prediction[depth].clone();
            }
        }
        Ok(Evaluation {
            state,
            pre,
            prediction,
            slope,
            errors,
        })
    }

    pub fn breakdown(&self, ev: &Evaluation) -> Result<EnergyBreakdown> {
        let depth = self.depth();
        let x = &ev.state.activities;
        let mut per_layer = vec![0.0; depth + 1];
        let supervised;
        match self.kind {
            EnergyKind::PredictiveCoding => {
                for l in 1..depth {
                    let weighted = self.weigh(l, &ev.errors[l]);
                    per_layer[l] = self.scales[l] * weighted.dot(&ev.errors[l])?;
                }
                supervised = match self.spec.output_head {
                    OutputHead::LinearSquaredError => {
                        self.weigh(depth, &ev.errors[depth]).dot(&ev.errors[depth])?
                    }
                    OutputHead::SoftmaxCrossEntropy => {
                        cross_entropy(&ev.prediction[depth], &self.sample.target)
                    }
                };
            }
            EnergyKind::Hopfield => {
                for l in 1..=depth {
                    let drive = &ev.pre[l];
                    per_layer[l] = self.scales[l] * (0.5 * x[l].norm_sq() - x[l].dot(drive)?);
                }
                supervised = 0.5 * x[depth].sub(&self.sample.target)?.norm_sq();
            }
        }
        let internal: f64 = per_layer.iter().sum();
        let lambda = self.phase.effective_lambda();
        Ok(EnergyBreakdown {
            total: internal + lambda * supervised,
            internal,
            supervised,
            lambda,
            per_layer_internal: per_layer,
            prediction_errors: ev.errors.clone(),
        })
    }

    /// Gradient of the supervised term `S` w.r.t. the penultimate layer (PC only).
    fn pc_supervised_activity_grad(&self, ev: &Evaluation) -> Result<Vector> {
        let depth = self.depth();
        let w = &self.params.weights[depth - 1];
        match self.spec.output_head {
            OutputHead::LinearSquaredError => {
                let weighted = self.weigh(depth, &ev.errors[depth]);
                Ok(w.matvec_transposed(&weighted)?.scale(-2.0))
            }
            OutputHead::SoftmaxCrossEntropy => {
                w.matvec_transposed(&ev.prediction[depth].sub(&self.sample.target)?)
            }
        }
    }

    /// `(1 / s_l) ∂E/∂x_l` for every free layer: the bottom-up term plus the
    /// top-down term scaled by `γ`, and the loss term scaled by `λ`.
    /// Entries for fixed layers (x_0, and the output unless it is free) are zero.
    pub fn activity_grad(&self, ev: &Evaluation) -> Result<Vec<Vector>> {
        let depth = self.depth();
        let gamma = self.phase.feedback_gain;
        let lambda = self.phase.effective_lambda();
        let x = &ev.state.activities;
        let mut grads: Vec<Vector> = x.iter().map(|v| Vector::zeros(v.len())).collect();
        match self.kind {
            EnergyKind::PredictiveCoding => {
                for l in 1..depth {
                    let bottom_up = self.weigh(l, &ev.errors[l]).scale(2.0);
                    let top_down = if l + 1 < depth {
                        let signal = self
                            .weigh(l + 1, &ev.errors[l + 1])
                            .hadamard(&ev.slope[l + 1])?;
                        self.params.weights[l]
                            .matvec_transposed(&signal)?
                            .scale(-2.0 * gamma)
                    } else {
                        self.pc_supervised_activity_grad(ev)?.scale(gamma * lambda)
                    };
                    grads[l] = bottom_up.add(&top_down)?;
                }
            }
            EnergyKind::Hopfield => {
                let last_free = *self.free_layers().end();
                for l in 1..=last_free {
                    let mut g = x[l].sub(&ev.pre[l])?;
                    if l < depth {
                        let top_down = self.params.weights[l].matvec_transposed(&x[l + 1])?;
                        g = g.axpy(-gamma, &top_down)?;
                    } else {
                        g = g.axpy(lambda, &x[l].sub(&self.sample.target)?)?;
                    }
                    grads[l] = g;
                }
            }
        }
        Ok(grads)
    }

    /// `∂E/∂W_l`, `∂E/∂b_l` with the activities held fixed.
    pub fn weight_grad(&self, ev: &Evaluation) -> Result<GradientSet> {
        let depth = self.depth();
        let lambda = self.phase.effective_lambda();
        let x = &ev.state.activities;
        let mut g = GradientSet::zeros_like(self.params);
        match self.kind {
            EnergyKind::PredictiveCoding => {
                for l in 1..depth {
                    let signal = self
                        .weigh(l, &ev.errors[l])
                        .hadamard(&ev.slope[l])?
                        .scale(-2.0 * self.scales[l]);
                    g.weight_grads[l - 1] = Matrix::outer(&signal, &x[l - 1]);
                    g.bias_grads[l - 1] = signal;
                }
                let signal = match self.spec.output_head {
                    OutputHead::LinearSquaredError => {
                        self.weigh(depth, &ev.errors[depth]).scale(-2.0 * lambda)
                    }
                    OutputHead::SoftmaxCrossEntropy => ev.prediction[depth]
                        .sub(&self.sample.target)?
                        .scale(lambda),
                };
                g.weight_grads[depth - 1] = Matrix::outer(&signal, &x[depth - 1]);
                g.bias_grads[depth - 1] = signal;
            }
            EnergyKind::Hopfield => {
                for l in 1..=depth {
                    let signal = x[l].scale(-self.scales[l]);
                    g.weight_grads[l - 1] = Matrix::outer(&signal, &x[l - 1]);
                    g.bias_grads[l - 1] = signal;
                }
            }
        }
        Ok(g)
    }
}

fn cross_entropy(prediction: &Vector, target: &Vector) -> f64 {
    -prediction
        .iter()
        .zip(target.iter())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| t * p.max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
}

/// Layers that the inference dynamics update for a given energy and mode.
pub fn free_layers(
    kind: EnergyKind,
    spec: &NetworkSpec,
    mode: OutputMode,
) -> std::ops::RangeInclusive<usize> {
    let depth = spec.depth();
    match (kind, mode) {
        (EnergyKind::PredictiveCoding, _) | (EnergyKind::Hopfield, OutputMode::Clamped) => 1..=depth - 1,
        (EnergyKind::Hopfield, _) => 1..=depth,
    }
}

pub fn energy(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    state: &ActivityState,
    sample: &Sample,
    phase: &PhaseConfig,
) -> Result<EnergyBreakdown> {
    let model = EnergyModel::new(kind, spec, params, sample, phase)?;
    model.breakdown(&model.evaluate(state)?)
}

pub fn pc_energy(
    spec: &NetworkSpec,
    params: &ParameterSet,
    state: &ActivityState,
    sample: &Sample,
    phase: &PhaseConfig,
) -> Result<EnergyBreakdown> {
    energy(EnergyKind::PredictiveCoding, spec, params, state, sample, phase)
}

pub fn hopfield_energy(
    spec: &NetworkSpec,
    params: &ParameterSet,
    state: &ActivityState,
    sample: &Sample,
    phase: &PhaseConfig,
) -> Result<EnergyBreakdown> {
    energy(EnergyKind::Hopfield, spec, params, state, sample, phase)
}

pub fn energy_activity_grad(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    state: &ActivityState,
    sample: &Sample,
    phase: &PhaseConfig,
) -> Result<Vec<Vector>> {
    let model = EnergyModel::new(kind, spec, params, sample, phase)?;
    model.activity_grad(&model.evaluate(state)?)
}

pub fn energy_weight_grad(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    state: &ActivityState,
    sample: &Sample,
    phase: &PhaseConfig,
) -> Result<GradientSet> {
    let model = EnergyModel::new(kind, spec, params, sample, phase)?;
    model.weight_grad(&model.evaluate(state)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, one_hot};

    fn relu_net() -> (NetworkSpec, ParameterSet, Sample) {
        let spec = NetworkSpec::new(vec![4, 5, 3, 2], ActivationKind::Relu, OutputHead::LinearSquaredError).unwrap();
        let mut params = init_params(&spec, 5);
        params.biases[0] = Vector::new(vec![0.1, 0.2, -0.1, 0.05, 0.3]);
        let sample = Sample::new(Vector::new(vec![0.2, 0.7, 0.1, 0.9]), Vector::new(vec![0.5, -0.5]));
        (spec, params, sample)
    }

    #[test]
    fn forward_pass_state_is_free_equilibrium() {
        let (spec, params, sample) = relu_net();
        let state = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let e = pc_energy(&spec, &params, &state, &sample, &PhaseConfig::free()).unwrap();
        assert_eq!(e.internal, 0.0);
        assert_eq!(e.total, 0.0);
        assert!(e.prediction_errors[1..spec.depth()].iter().all(|v| v.max_abs() == 0.0));
    }

    #[test]
    fn internal_is_squared_injected_error() {
        let spec = NetworkSpec::new(vec![3, 2, 2], ActivationKind::Tanh, OutputHead::LinearSquaredError).unwrap();
        let params = init_params(&spec, 1);
        let sample = Sample::new(Vector::new(vec![0.1, 0.2, 0.3]), Vector::new(vec![0.0, 1.0]));
        let mut state = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let e = Vector::new(vec![0.25, -0.5]);
        state.activities[1] = state.activities[1].add(&e).unwrap();
        let b = pc_energy(&spec, &params, &state, &sample, &PhaseConfig::free()).unwrap();
        assert!((b.internal - e.norm_sq()).abs() < 1e-15);
    }

    #[test]
    fn precision_scales_layer_energy_linearly() {
        let (spec, params, sample) = relu_net();
        let mut state = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        state.activities[1] = state.activities[1].add(&Vector::filled(5, 0.1)).unwrap();
        let unit = PhaseConfig::free();
        let doubled = PhaseConfig::free().with_precisions(vec![
            Vector::filled(5, 2.0),
            Vector::filled(3, 1.0),
            Vector::filled(2, 1.0),
        ]);
        let a = pc_energy(&spec, &params, &state, &sample, &unit).unwrap();
        let b = pc_energy(&spec, &params, &state, &sample, &doubled).unwrap();
        assert!((b.per_layer_internal[1] - 2.0 * a.per_layer_internal[1]).abs() < 1e-15);
        assert_eq!(b.per_layer_internal[2], a.per_layer_internal[2]);
    }

    #[test]
    fn negative_precision_is_rejected() {
        let (spec, params, sample) = relu_net();
        let state = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let phase = PhaseConfig::free().with_precisions(vec![
            Vector::filled(5, -1.0),
            Vector::filled(3, 1.0),
            Vector::filled(2, 1.0),
        ]);
        assert!(matches!(
            pc_energy(&spec, &params, &state, &sample, &phase),
            Err(EbmError::Domain(_))
        ));
    }

    #[test]
    fn hopfield_zero_state_has_zero_internal() {
        let spec = NetworkSpec::new(vec![3, 4, 2], ActivationKind::Linear, OutputHead::LinearSquaredError).unwrap();
        let params = init_params(&spec, 4);
        let sample = Sample::new(Vector::new(vec![0.3, 0.2, 0.1]), one_hot(1, 2));
        let state = ActivityState::new(vec![sample.input.clone(), Vector::zeros(4), Vector::zeros(2)]);
        let b = hopfield_energy(&spec, &params, &state, &sample, &PhaseConfig::free()).unwrap();
        assert_eq!(b.internal, 0.0);
    }

    #[test]
    fn hopfield_rejects_nonlinear_units() {
        let (spec, params, sample) = relu_net();
        let state = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        assert!(hopfield_energy(&spec, &params, &state, &sample, &PhaseConfig::free()).is_err());
    }

    #[test]
    fn nudged_gradient_at_free_equilibrium_is_loss_force_on_penultimate_layer() {
        let (spec, params, sample) = relu_net();
        let state = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let lambda = 0.3;
        let g = energy_activity_grad(
            EnergyKind::PredictiveCoding,
            &spec,
            &params,
            &state,
            &sample,
            &PhaseConfig::nudged(lambda),
        )
        .unwrap();
        assert_eq!(g[1].max_abs(), 0.0);
        // S = |T - W x + b|^2  =>  dS/dx = 2 Wᵀ (μ - T).
        let x = &state.activities;
        let expected = params.weights[2]
            .matvec_transposed(&x[3].sub(&sample.target).unwrap())
            .unwrap()
            .scale(2.0 * lambda);
        assert!(g[2].sub(&expected).unwrap().max_abs() < 1e-15);
        assert_eq!(g[3].max_abs(), 0.0);
    }

    #[test]
    fn gamma_zero_is_rejected() {
        let (spec, params, sample) = relu_net();
        let state = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let phase = PhaseConfig::clamped(1.0).with_feedback_gain(0.0);
        assert!(pc_energy(&spec, &params, &state, &sample, &phase).is_err());
    }
}
