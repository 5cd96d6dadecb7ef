//! Weight-update rules. Every rule returns an estimate of the supervised-loss
//! gradient, so the result can be compared with [`backprop_oracle`] directly
//! and descended on.
//!
//! The predictive-coding energy carries no ½ factor, so its raw weight
//! gradients are `c` times the loss gradient, with `c = 2` for the squared
//! head and `c = 1` for softmax/cross-entropy. CHL and EP divide this out;
//! PC-Nudge keeps the raw scale of the energy, as its learning rate absorbs it.

use serde::{Deserialize, Serialize};

use crate::dynamics::{run_free_phase_with, run_perturbed_phase, EquilibriumResult, InferenceConfig};
use crate::energy::{ActivityState, EnergyKind, EnergyModel, OutputMode, PhaseConfig};
use crate::error::{EbmError, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{
    backprop_oracle, forward_pass, supervised_loss, GradientSet, NetworkSpec, OutputHead, ParameterSet, Sample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Pc,
    Chl,
    Ep,
    PcNudge,
    FirstStep,
    Backprop,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Pc => "pc",
            Rule::Chl => "chl",
            Rule::Ep => "ep",
            Rule::PcNudge => "pc_nudge",
            Rule::FirstStep => "first_step",
            Rule::Backprop => "backprop",
        }
    }
}

impl std::str::FromStr for Rule {
    type Err = EbmError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pc" => Rule::Pc,
            "chl" => Rule::Chl,
            "ep" => Rule::Ep,
            "pc_nudge" | "pcnudge" => Rule::PcNudge,
            "first_step" | "firststep" => Rule::FirstStep,
            "bp" | "backprop" => Rule::Backprop,
            other => return Err(EbmError::InvalidConfig(format!("unknown rule `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub rule: Rule,
    pub energy: EnergyKind,
    pub phase: PhaseConfig,
    pub inference: InferenceConfig,
    pub weight_lr: f64,
    /// Train on the raw energy gradient with learning rate `weight_lr / λ`.
    pub effective_lr_scaling: bool,
}

impl RuleConfig {
    /// PC-Nudge with the training protocol defaults: 50 inference steps of 0.1.
    pub fn pc_nudge(lambda: f64, weight_lr: f64) -> Self {
        Self {
            rule: Rule::PcNudge,
            energy: EnergyKind::PredictiveCoding,
            phase: PhaseConfig::nudged(lambda),
            inference: InferenceConfig::fixed(0.1, 50),
            weight_lr,
            effective_lr_scaling: true,
        }
    }

    pub fn backprop(weight_lr: f64) -> Self {
        Self {
            rule: Rule::Backprop,
            energy: EnergyKind::PredictiveCoding,
            phase: PhaseConfig::free(),
            inference: InferenceConfig::default(),
            weight_lr,
            effective_lr_scaling: false,
        }
    }

    pub fn first_step(lambda: f64, step_size: f64, weight_lr: f64) -> Self {
        Self {
            rule: Rule::FirstStep,
            energy: EnergyKind::PredictiveCoding,
            phase: PhaseConfig::nudged(lambda),
            inference: InferenceConfig::fixed(step_size, 1),
            weight_lr,
            effective_lr_scaling: false,
        }
    }

    pub fn ep(energy: EnergyKind, lambda: f64, inference: InferenceConfig) -> Self {
        Self {
            rule: Rule::Ep,
            energy,
            phase: PhaseConfig::nudged(lambda),
            inference,
            weight_lr: 0.0,
            effective_lr_scaling: false,
        }
    }

    pub fn chl(energy: EnergyKind, gamma: f64, inference: InferenceConfig) -> Self {
        Self {
            rule: Rule::Chl,
            energy,
            phase: PhaseConfig::clamped(1.0).with_feedback_gain(gamma),
            inference,
            weight_lr: 0.0,
            effective_lr_scaling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight_lr >= 0.0 && self.weight_lr.is_finite()) {
            return Err(EbmError::InvalidConfig(format!(
                "weight learning rate must be nonnegative, got {}",
                self.weight_lr
            )));
        }
        let needs_lambda = matches!(self.rule, Rule::Ep | Rule::PcNudge | Rule::FirstStep | Rule::Chl)
            || self.effective_lr_scaling;
        if needs_lambda && self.phase.lambda <= 0.0 {
            return Err(EbmError::InvalidConfig(format!(
                "rule {} needs lambda > 0",
                self.rule.name()
            )));
        }
        if matches!(self.rule, Rule::PcNudge | Rule::FirstStep | Rule::Pc)
            && self.energy != EnergyKind::PredictiveCoding
        {
            return Err(EbmError::InvalidConfig(format!(
                "rule {} needs the predictive-coding energy",
                self.rule.name()
            )));
        }
        Ok(())
    }
}

/// Ratio between the raw PC energy gradient and the loss gradient.
pub fn head_factor(head: OutputHead) -> f64 {
    match head {
        OutputHead::LinearSquaredError => 2.0,
        OutputHead::SoftmaxCrossEntropy => 1.0,
    }
}

/// Factor taking a raw two-phase difference to the loss scale.
pub fn estimate_scale(kind: EnergyKind, spec: &NetworkSpec) -> f64 {
    match kind {
        EnergyKind::PredictiveCoding => 1.0 / head_factor(spec.output_head),
        EnergyKind::Hopfield => 1.0,
    }
}

/// Free and perturbed equilibria for one sample.
#[derive(Debug, Clone)]
pub struct TwoPhase {
    pub free: EquilibriumResult,
    pub perturbed: EquilibriumResult,
}

/// Runs the free phase and then the phase of `phase`, starting from the free
/// equilibrium. Non-converged runs are refused unless the budget is fixed.
pub fn run_two_phases(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    phase: &PhaseConfig,
    inference: &InferenceConfig,
) -> Result<TwoPhase> {
    let free = run_free_phase_with(kind, spec, params, sample, inference, phase)?;
    free.require_usable(inference)?;
    let perturbed = run_perturbed_phase(kind, spec, params, sample, inference, phase, &free.state)?;
    perturbed.require_usable(inference)?;
    Ok(TwoPhase { free, perturbed })
}

/// `∂E/∂W` at `state` under `phase`.
pub fn weight_grad_at(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    phase: &PhaseConfig,
    state: &ActivityState,
) -> Result<GradientSet> {
    let model = EnergyModel::new(kind, spec, params, sample, phase)?;
    model.weight_grad(&model.evaluate(state)?)
}

/// `(1/λ)[∂E^λ/∂W(x_λ) − ∂E^0/∂W(x̄)]`, normalized to the loss scale.
pub fn contrastive_estimate(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    phase: &PhaseConfig,
    phases: &TwoPhase,
) -> Result<GradientSet> {
    let lambda = phase.lambda;
    if lambda <= 0.0 {
        return Err(EbmError::InvalidConfig("contrastive update needs lambda > 0".into()));
    }
    let perturbed = weight_grad_at(kind, spec, params, sample, phase, &phases.perturbed.state)?;
    let free = weight_grad_at(kind, spec, params, sample, &phase.as_free(), &phases.free.state)?;
    Ok(perturbed.sub(&free)?.scale(estimate_scale(kind, spec) / lambda))
}

fn require_mode(cfg: &RuleConfig, mode: OutputMode) -> Result<()> {
    cfg.validate()?;
    if cfg.phase.output_mode != mode {
        return Err(EbmError::InvalidConfig(format!(
            "rule {} runs in {} mode, config has {}",
            cfg.rule.name(),
            mode.name(),
            cfg.phase.output_mode.name()
        )));
    }
    Ok(())
}

/// Contrastive Hebbian update: clamped minus free Hebbian terms.
pub fn chl_update(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &RuleConfig,
) -> Result<GradientSet> {
    require_mode(cfg, OutputMode::Clamped)?;
    let phases = run_two_phases(kind, spec, params, sample, &cfg.phase, &cfg.inference)?;
    contrastive_estimate(kind, spec, params, sample, &cfg.phase, &phases)
}

/// Equilibrium propagation: nudged minus free, divided by λ.
pub fn ep_update(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &RuleConfig,
) -> Result<GradientSet> {
    require_mode(cfg, OutputMode::Nudged)?;
    let phases = run_two_phases(kind, spec, params, sample, &cfg.phase, &cfg.inference)?;
    contrastive_estimate(kind, spec, params, sample, &cfg.phase, &phases)
}

/// `(1/λ) ∂E^λ/∂W` at the nudged PC equilibrium, at the raw energy scale.
/// The free-phase term of the PC energy vanishes and is not computed.
pub fn pc_nudge_update(
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &RuleConfig,
) -> Result<GradientSet> {
    cfg.validate()?;
    if cfg.phase.lambda <= 0.0 {
        return Err(EbmError::InvalidConfig("PC-Nudge needs lambda > 0".into()));
    }
    let kind = EnergyKind::PredictiveCoding;
    let phase = PhaseConfig {
        output_mode: OutputMode::Nudged,
        ..cfg.phase.clone()
    };
    let phases = run_two_phases(kind, spec, params, sample, &phase, &cfg.inference)?;
    Ok(weight_grad_at(kind, spec, params, sample, &phase, &phases.perturbed.state)?.scale(1.0 / phase.lambda))
}

/// Weight updates formed from the first inference step of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStepResult {
    /// Normalized update; equals the loss gradient.
    pub update: GradientSet,
    /// Raw energy gradients before normalization.
    pub raw: GradientSet,
    /// Factor dividing each raw layer gradient (index `l - 1` for `W_{l-1}`).
    pub factors: Vec<f64>,
    /// Prediction errors at their first perturbed step, `ε_l` for `l = 1..L-1` (index 0 empty).
    pub errors: Vec<Vector>,
    /// `ε_l` rescaled to `∂L/∂x_l`, comparable with the backprop adjoints.
    pub adjoints: Vec<Vector>,
}

/// First-step update at the free equilibrium (the forward pass).
pub fn first_step_update(
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &RuleConfig,
) -> Result<GradientSet> {
    Ok(first_step_full(spec, params, sample, cfg)?.update)
}

pub fn first_step_full(
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &RuleConfig,
) -> Result<FirstStepResult> {
    let state = ActivityState::new(forward_pass(spec, params, &sample.input)?);
    first_step_from_state(spec, params, sample, cfg, &state)
}

/// As [`first_step_full`], refusing any state other than the free equilibrium.
///
/// Starting from zero errors, the nudge reaches layer `L-1-k` only at step
/// `k+1`, and at that step the layer's error is a scaled copy of its
/// backprop adjoint:
/// `ε_{L-1} = -η γ λ c ∂L/∂x_{L-1}` and `ε_l = 2ηγ Wᵀ(ε_{l+1} ⊙ f'_{l+1})`.
pub fn first_step_from_state(
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &RuleConfig,
    state: &ActivityState,
) -> Result<FirstStepResult> {
    cfg.validate()?;
    if cfg.energy != EnergyKind::PredictiveCoding {
        return Err(EbmError::InvalidConfig("first-step update needs the PC energy".into()));
    }
    if !cfg.phase.has_unit_precisions() {
        return Err(EbmError::InvalidConfig("first-step update assumes unit precisions".into()));
    }
    let lambda = cfg.phase.lambda;
    let eta = cfg.inference.step_size;
    let gamma = cfg.phase.feedback_gain;
    let phase = PhaseConfig::nudged(lambda).with_feedback_gain(gamma);
    let model = EnergyModel::new(EnergyKind::PredictiveCoding, spec, params, sample, &phase)?;
    let ev = model.evaluate(&model.prepare(state)?)?;
    let depth = spec.depth();
    let off = (1..depth).map(|l| ev.error(l).max_abs()).fold(0.0, f64::max);
    if off != 0.0 {
        return Err(EbmError::Precondition(format!(
            "first-step update needs the free equilibrium; hidden prediction errors reach {off:.3e}"
        )));
    }

    let c = head_factor(spec.output_head);
    let x = &ev.state().activities;
    let mut raw = GradientSet::zeros_like(params);
    let mut factors = vec![0.0; depth];
    let mut errors = vec![Vector::zeros(0); depth];
    let mut adjoints = vec![Vector::zeros(0); depth];

    // Output layer: its weight gradient is already nonzero at the free equilibrium.
    let top = match spec.output_head {
        OutputHead::LinearSquaredError => ev.error(depth).scale(-2.0 * lambda),
        OutputHead::SoftmaxCrossEntropy => ev.prediction(depth).sub(&sample.target)?.scale(lambda),
    };
    raw.weight_grads[depth - 1] = Matrix::outer(&top, &x[depth - 1]);
    raw.bias_grads[depth - 1] = top.clone();
    factors[depth - 1] = lambda * c;

    // Error signal sent down from layer l+1, as a multiple of ∂L/∂x_l.
    let mut down = params.weights[depth - 1].matvec_transposed(&top)?.scale(gamma);
    let mut k = eta * gamma;
    for l in (1..depth).rev() {
        let eps = down.scale(-eta);
        adjoints[l] = eps.scale(-1.0 / (k * lambda * c));
        let signal = eps.hadamard(ev.slope(l))?.scale(-2.0 * model.layer_scale(l));
        raw.weight_grads[l - 1] = Matrix::outer(&signal, &x[l - 1]);
        raw.bias_grads[l - 1] = signal;
        factors[l - 1] = 2.0 * model.layer_scale(l) * k * lambda * c;
        if l > 1 {
            let sent = eps.hadamard(ev.slope(l))?;
            down = params.weights[l - 1].matvec_transposed(&sent)?.scale(-2.0 * gamma);
        }
        errors[l] = eps;
        k *= 2.0 * eta * gamma;
    }

    let mut update = raw.clone();
    for (l, f) in factors.iter().enumerate() {
        update.scale_layer(l, 1.0 / f);
    }
    Ok(FirstStepResult {
        update,
        raw,
        factors,
        errors,
        adjoints,
    })
}

/// Loss-gradient estimate of `cfg.rule` for one sample.
pub fn rule_update(
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &RuleConfig,
) -> Result<GradientSet> {
    match cfg.rule {
        Rule::Backprop => backprop_oracle(spec, params, sample),
        Rule::FirstStep => first_step_update(spec, params, sample, cfg),
        Rule::PcNudge => {
            let g = pc_nudge_update(spec, params, sample, cfg)?;
            Ok(g.scale(1.0 / head_factor(spec.output_head)))
        }
        Rule::Ep => ep_update(cfg.energy, spec, params, sample, cfg),
        Rule::Chl => chl_update(cfg.energy, spec, params, sample, cfg),
        Rule::Pc => {
            let clamped = RuleConfig {
                phase: PhaseConfig {
                    output_mode: OutputMode::Clamped,
                    ..cfg.phase.clone()
                },
                ..cfg.clone()
            };
            chl_update(EnergyKind::PredictiveCoding, spec, params, sample, &clamped)
        }
    }
}

/// Rule estimate averaged over a batch, summed in sample order.
pub fn batch_update(
    spec: &NetworkSpec,
    params: &ParameterSet,
    batch: &[Sample],
    cfg: &RuleConfig,
) -> Result<GradientSet> {
    if batch.is_empty() {
        return Err(EbmError::EmptyDataset);
    }
    let mut sum = GradientSet::zeros_like(params);
    for s in batch {
        sum = sum.add(&rule_update(spec, params, s, cfg)?)?;
    }
    Ok(sum.scale(1.0 / batch.len() as f64))
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − η v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    pub momentum: f64,
    pub velocity: Option<GradientSet>,
}

impl Default for MomentumSgd {
    fn default() -> Self {
        Self::new(0.9)
    }
}

impl MomentumSgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &ParameterSet, lr: f64, grad: &GradientSet) -> Result<ParameterSet> {
        let v = match self.velocity.take() {
            Some(v) => v.scale(self.momentum).add(grad)?,
            None => grad.clone(),
        };
        let next = params.apply_step(lr, &v)?;
        self.velocity = Some(v);
        Ok(next)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub batch: usize,
    /// Accuracy and mean loss of the batch under the parameters it was trained from.
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub batches: Vec<BatchMetrics>,
}

impl EpochMetrics {
    pub fn mean_accuracy(&self) -> f64 {
        let n = self.batches.len().max(1) as f64;
        self.batches.iter().map(|b| b.accuracy).sum::<f64>() / n
    }
}

/// Accuracy and mean loss of the feedforward network on `samples`.
pub fn evaluate_batch(spec: &NetworkSpec, params: &ParameterSet, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(EbmError::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in samples {
        let out = forward_pass(spec, params, &s.input)?;
        let y = &out[spec.depth()];
        if y.argmax() == s.target.argmax() {
            correct += 1;
        }
        loss += supervised_loss(spec.output_head, y, &s.target)?;
    }
    let n = samples.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// One pass over `batches`, one momentum-SGD step per batch.
pub fn train_epoch(
    cfg: &RuleConfig,
    spec: &NetworkSpec,
    params: &ParameterSet,
    batches: &[Vec<Sample>],
    optimizer: &mut MomentumSgd,
) -> Result<(ParameterSet, EpochMetrics)> {
    cfg.validate()?;
    let mut params = params.clone();
    let mut metrics = EpochMetrics::default();
    for (i, batch) in batches.iter().enumerate() {
        let (accuracy, loss) = evaluate_batch(spec, &params, batch)?;
        if !loss.is_finite() {
            return Err(EbmError::NonFinite(format!(
                "loss is {loss} at batch {i} with rule {}; lower the learning rate",
                cfg.rule.name()
            )));
        }
        metrics.batches.push(BatchMetrics { batch: i, accuracy, loss });
        let (grad, lr) = training_step(spec, &params, batch, cfg)?;
        params = optimizer.step(&params, lr, &grad)?;
        if !params.all_finite() {
            return Err(EbmError::NonFinite(format!(
                "parameters became non-finite after batch {i} with rule {}",
                cfg.rule.name()
            )));
        }
    }
    Ok((params, metrics))
}

/// Gradient and learning rate of one training step. With
/// `effective_lr_scaling` the step descends the raw energy gradient (λ times
/// the loss-scale estimate) with learning rate `η/λ`.
pub fn training_step(
    spec: &NetworkSpec,
    params: &ParameterSet,
    batch: &[Sample],
    cfg: &RuleConfig,
) -> Result<(GradientSet, f64)> {
    let mut grad = batch_update(spec, params, batch, cfg)?;
    let mut lr = cfg.weight_lr;
    if cfg.effective_lr_scaling {
        let lambda = cfg.phase.lambda;
        let raw = match cfg.rule {
            Rule::PcNudge => head_factor(spec.output_head) * lambda,
            _ => lambda,
        };
        grad = grad.scale(raw);
        lr /= lambda;
    }
    Ok((grad, lr))
}
