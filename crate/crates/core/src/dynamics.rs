//! Inference: explicit-Euler descent of the activities on the energy.

use serde::{Deserialize, Serialize};

use crate::energy::{ActivityState, EnergyBreakdown, EnergyKind, EnergyModel, OutputMode, PhaseConfig};
use crate::error::{EbmError, Result};
use crate::model::{NetworkSpec, ParameterSet, Sample};

/// Default largest energy increase tolerated between two steps before the run
/// is declared divergent.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-6;

fn default_divergence_tol() -> Option<f64> {
    Some(DIVERGENCE_TOLERANCE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub step_size: f64,
    pub max_steps: usize,
    /// Max-norm of the per-step activity change that counts as converged.
    /// Zero means a fixed budget: exactly `max_steps` steps are taken.
    pub convergence_tol: f64,
    pub record_trace: bool,
    /// Energy increase between two steps that aborts the run; `None` turns
    /// the check off (ReLU kinks can raise the energy by small amounts
    /// without any instability).
    #[serde(default = "default_divergence_tol")]
    pub divergence_tol: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_steps: 50,
            convergence_tol: 1e-8,
            record_trace: false,
            divergence_tol: default_divergence_tol(),
        }
    }
}

impl InferenceConfig {
    /// Fixed number of steps, no early stop.
    pub fn fixed(step_size: f64, steps: usize) -> Self {
        Self {
            step_size,
            max_steps: steps,
            convergence_tol: 0.0,
            record_trace: false,
            divergence_tol: default_divergence_tol(),
        }
    }

    /// Run until the activity change drops below `tol`.
    pub fn until_converged(step_size: f64, max_steps: usize, tol: f64) -> Self {
        Self {
            step_size,
            max_steps,
            convergence_tol: tol,
            record_trace: false,
            divergence_tol: default_divergence_tol(),
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn without_divergence_check(mut self) -> Self {
        self.divergence_tol = None;
        self
    }

    pub fn is_fixed_budget(&self) -> bool {
        self.convergence_tol == 0.0
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(EbmError::InvalidConfig(format!(
                "inference step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.max_steps == 0 || self.convergence_tol < 0.0 {
            return Err(EbmError::InvalidConfig(
                "max_steps must be positive and convergence_tol nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub phase: OutputMode,
    pub state: ActivityState,
    pub steps_taken: usize,
    pub converged: bool,
    /// Max-norm activity change of the last step taken (0 if none).
    pub last_change: f64,
    /// One entry per step, starting with the initial state. Empty unless recorded.
    pub energy_trace: Vec<EnergyBreakdown>,
    pub activity_trace: Vec<ActivityState>,
}

impl EquilibriumResult {
    /// The run either converged or was a fixed-budget run.
    pub fn usable(&self, cfg: &InferenceConfig) -> bool {
        self.converged || cfg.is_fixed_budget()
    }

    pub fn require_usable(&self, cfg: &InferenceConfig) -> Result<()> {
        if self.usable(cfg) {
            Ok(())
        } else {
            Err(EbmError::NotConverged {
                phase: self.phase.name(),
                steps: self.steps_taken,
                last_change: self.last_change,
            })
        }
    }
}

/// Free phase with default (unit-gain, unit-precision) settings.
pub fn run_free_phase(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &InferenceConfig,
) -> Result<EquilibriumResult> {
    run_free_phase_with(kind, spec, params, sample, cfg, &PhaseConfig::free())
}

/// Free phase under the gain and precisions of `phase` (its output mode is
/// ignored). Predictive coding returns the forward pass directly; the
/// Hopfield energy is relaxed from the linear forward pass.
pub fn run_free_phase_with(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &InferenceConfig,
    phase: &PhaseConfig,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    let free = phase.as_free();
    let init = ActivityState::feedforward(spec, params, &sample.input)?;
    match kind {
        EnergyKind::PredictiveCoding => {
            let model = EnergyModel::new(kind, spec, params, sample, &free)?;
            let (energy_trace, activity_trace) = if cfg.record_trace {
                let ev = model.evaluate(&init)?;
                (vec![model.breakdown(&ev)?], vec![init.clone()])
            } else {
                (Vec::new(), Vec::new())
            };
            Ok(EquilibriumResult {
                phase: OutputMode::Free,
                state: init,
                steps_taken: 0,
                converged: true,
                last_change: 0.0,
                energy_trace,
                activity_trace,
            })
        }
        EnergyKind::Hopfield => relax(kind, spec, params, sample, cfg, &free, &init),
    }
}

/// Clamped or nudged phase started from `init` (usually a free equilibrium).
pub fn run_perturbed_phase(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &InferenceConfig,
    phase: &PhaseConfig,
    init: &ActivityState,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    relax(kind, spec, params, sample, cfg, phase, init)
}

fn relax(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &InferenceConfig,
    phase: &PhaseConfig,
    init: &ActivityState,
) -> Result<EquilibriumResult> {
    let model = EnergyModel::new(kind, spec, params, sample, phase)?;
    let free_layers = model.free_layers();
    let mut ev = model.evaluate(&model.prepare(init)?)?;
    let mut energy = model.breakdown(&ev)?;

    let mut energy_trace = Vec::new();
    let mut activity_trace = Vec::new();
    if cfg.record_trace {
        energy_trace.push(energy.clone());
        activity_trace.push(ev.state().clone());
    }

    let mut steps_taken = 0;
    let mut last_change = 0.0;
    let mut converged = false;
    while steps_taken < cfg.max_steps {
        let grads = model.activity_grad(&ev)?;
        let mut next = ev.state().clone();
        let mut change = 0.0f64;
        for l in free_layers.clone() {
            change = change.max(cfg.step_size * grads[l].max_abs());
            next.activities[l] = next.activities[l].axpy(-cfg.step_size, &grads[l])?;
        }
        steps_taken += 1;
        last_change = change;

        let next_ev = model.evaluate(&next)?;
        let next_energy = model.breakdown(&next_ev)?;
        if !next_energy.total.is_finite() || !change.is_finite() {
            return Err(EbmError::NonFinite(format!(
                "energy became non-finite at inference step {steps_taken}"
            )));
        }
        let increase = next_energy.total - energy.total;
        if cfg.divergence_tol.is_some_and(|tol| increase > tol) {
            return Err(EbmError::Divergence {
                step: steps_taken,
                increase,
                step_size: cfg.step_size,
            });
        }
        ev = next_ev;
        energy = next_energy;
        if cfg.record_trace {
            energy_trace.push(energy.clone());
            activity_trace.push(ev.state().clone());
        }
        if cfg.convergence_tol > 0.0 && change <= cfg.convergence_tol {
            converged = true;
            break;
        }
    }

    Ok(EquilibriumResult {
        phase: phase.output_mode,
        state: ev.state().clone(),
        steps_taken,
        converged,
        last_change,
        energy_trace,
        activity_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub step: usize,
    pub internal: f64,
    pub supervised: f64,
    pub total: f64,
}

/// Per-step energy decomposition of a recorded run.
pub fn energy_trace_decomposition(result: &EquilibriumResult) -> Result<Vec<EnergyRow>> {
    if result.energy_trace.is_empty() {
        return Err(EbmError::Usage(
            "no energy trace recorded; run inference with record_trace = true".into(),
        ));
    }
    Ok(result
        .energy_trace
        .iter()
        .enumerate()
        .map(|(step, e)| EnergyRow {
            step,
            internal: e.internal,
            supervised: e.supervised,
            total: e.total,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ActivationKind, Vector};
    use crate::model::{init_params, OutputHead};

    fn relu_net(seed: u64) -> (NetworkSpec, ParameterSet, Sample) {
        let spec = NetworkSpec::new(vec![6, 5, 4, 3], ActivationKind::Relu, OutputHead::LinearSquaredError).unwrap();
        let mut params = init_params(&spec, seed);
        for b in params.biases.iter_mut() {
            *b = Vector::filled(b.len(), 0.1);
        }
        let sample = Sample::new(
            Vector::new(vec![0.9, 0.1, 0.5, 0.3, 0.7, 0.2]),
            Vector::new(vec![1.0, 0.0, -1.0]),
        );
        (spec, params, sample)
    }

    #[test]
    fn pc_free_phase_is_forward_pass() {
        let (spec, params, sample) = relu_net(1);
        let r = run_free_phase(EnergyKind::PredictiveCoding, &spec, &params, &sample, &InferenceConfig::default()).unwrap();
        assert_eq!(r.steps_taken, 0);
        assert!(r.converged);
        assert_eq!(r.state, ActivityState::feedforward(&spec, &params, &sample.input).unwrap());
    }

    #[test]
    fn zero_lambda_leaves_free_equilibrium_untouched() {
        let (spec, params, sample) = relu_net(2);
        let init = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let cfg = InferenceConfig::fixed(0.1, 20);
        let r = run_perturbed_phase(EnergyKind::PredictiveCoding, &spec, &params, &sample, &cfg, &PhaseConfig::nudged(0.0), &init).unwrap();
        assert_eq!(r.state, init);
        assert_eq!(r.steps_taken, 20);
    }

    #[test]
    fn one_nudged_step_moves_only_penultimate_layer() {
        let (spec, params, sample) = relu_net(3);
        let init = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let (eta, lambda) = (0.1, 0.01);
        let cfg = InferenceConfig::fixed(eta, 1);
        let r = run_perturbed_phase(EnergyKind::PredictiveCoding, &spec, &params, &sample, &cfg, &PhaseConfig::nudged(lambda), &init).unwrap();
        assert_eq!(r.state.activities[1], init.activities[1]);
        // Supervised energy |T - μ|^2 has gradient 2 Wᵀ(μ - T) at the penultimate layer.
        let force = params.weights[2]
            .matvec_transposed(&init.activities[3].sub(&sample.target).unwrap())
            .unwrap()
            .scale(2.0);
        let expected = init.activities[2].axpy(-eta * lambda, &force).unwrap();
        assert!(r.state.activities[2].sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn clamped_trace_descends_and_starts_with_zero_internal() {
        let (spec, params, sample) = relu_net(4);
        let init = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let cfg = InferenceConfig::fixed(0.05, 60).with_trace();
        let r = run_perturbed_phase(EnergyKind::PredictiveCoding, &spec, &params, &sample, &cfg, &PhaseConfig::clamped(1.0), &init).unwrap();
        let rows = energy_trace_decomposition(&r).unwrap();
        assert_eq!(rows.len(), 61);
        assert_eq!(rows[0].internal, 0.0);
        for w in rows.windows(2) {
            assert!(w[1].total <= w[0].total + 1e-9);
        }
        assert!(rows[10].supervised < rows[0].supervised);
        assert!(rows[10].internal > 0.0);
    }

    #[test]
    fn missing_trace_is_a_usage_error() {
        let (spec, params, sample) = relu_net(5);
        let r = run_free_phase(EnergyKind::PredictiveCoding, &spec, &params, &sample, &InferenceConfig::default()).unwrap();
        assert!(matches!(energy_trace_decomposition(&r), Err(EbmError::Usage(_))));
    }

    #[test]
    fn oversized_step_is_reported_as_divergence() {
        let (spec, params, sample) = relu_net(6);
        let init = ActivityState::feedforward(&spec, &params, &sample.input).unwrap();
        let cfg = InferenceConfig::fixed(5.0, 20);
        let err = run_perturbed_phase(EnergyKind::PredictiveCoding, &spec, &params, &sample, &cfg, &PhaseConfig::clamped(1.0), &init).unwrap_err();
        assert!(matches!(err, EbmError::Divergence { .. }), "{err}");
        let r = run_perturbed_phase(EnergyKind::PredictiveCoding, &spec, &params, &sample, &cfg.without_divergence_check(), &PhaseConfig::clamped(1.0), &init);
        assert!(!matches!(r, Err(EbmError::Divergence { .. })));
    }

    #[test]
    fn configs_without_the_tolerance_field_keep_the_default() {
        let cfg: InferenceConfig =
            serde_json::from_str(r#"{"step_size":0.1,"max_steps":5,"convergence_tol":0.0,"record_trace":false}"#).unwrap();
        assert_eq!(cfg.divergence_tol, Some(DIVERGENCE_TOLERANCE));
    }

    #[test]
    fn hopfield_zero_parameters_relax_to_zero() {
        let spec = NetworkSpec::new(vec![3, 4, 2], ActivationKind::Linear, OutputHead::LinearSquaredError).unwrap();
        let params = ParameterSet::zeros(&spec);
        let sample = Sample::new(Vector::new(vec![0.5, 0.2, 0.1]), Vector::new(vec![1.0, 0.0]));
        let cfg = InferenceConfig::until_converged(0.5, 1000, 1e-12);
        let r = run_free_phase(EnergyKind::Hopfield, &spec, &params, &sample, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.state.activities[1..].iter().all(|v| v.max_abs() == 0.0));
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let spec = NetworkSpec::new(vec![3, 4, 2], ActivationKind::Linear, OutputHead::LinearSquaredError).unwrap();
        let params = init_params(&spec, 1).scaled_weights(0.5);
        let sample = Sample::new(Vector::new(vec![0.5, 0.2, 0.1]), Vector::new(vec![1.0, 0.0]));
        let cfg = InferenceConfig::until_converged(0.01, 3, 1e-14);
        let r = run_free_phase(EnergyKind::Hopfield, &spec, &params, &sample, &cfg).unwrap();
        assert!(!r.converged);
        assert!(r.require_usable(&cfg).is_err());
    }
}
