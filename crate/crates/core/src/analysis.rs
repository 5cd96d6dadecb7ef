//! Gradient comparison, finite-difference oracles and the first-order
//! Taylor term of two-phase updates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::energy::{ActivityState, EnergyKind, EnergyModel, PhaseConfig};
use crate::error::{EbmError, Result};
use crate::learners::{contrastive_estimate, estimate_scale, run_two_phases, RuleConfig};
use crate::linalg::{Matrix, Vector};
use crate::model::{GradientSet, NetworkSpec, OutputHead, ParameterSet, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub euclidean_distance: f64,
    pub cosine_similarity: f64,
    /// Distance over the weights and biases of each layer.
    pub per_layer_distances: Vec<f64>,
    pub equilibrium_distance: f64,
}

/// Cosine of the angle between two flat vectors; 0 if either is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn compare_gradients(estimate: &GradientSet, oracle: &GradientSet) -> Result<ComparisonReport> {
    if !estimate.same_shape(oracle) {
        return Err(EbmError::Shape("gradient sets differ in shape".into()));
    }
    let a = estimate.flatten();
    let b = oracle.flatten();
    let euclidean_distance = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let per_layer_distances = (0..estimate.depth())
        .map(|l| {
            let w = estimate.weight_grads[l].sub(&oracle.weight_grads[l])?.norm_sq();
            let b = estimate.bias_grads[l].sub(&oracle.bias_grads[l])?.norm_sq();
            Ok((w + b).sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport {
        euclidean_distance,
        cosine_similarity: cosine_similarity(&a, &b),
        per_layer_distances,
        equilibrium_distance: 0.0,
    })
}

/// `Σ_l |a_l - b_l|` over layers `1..=L`.
pub fn equilibrium_distance(a: &ActivityState, b: &ActivityState) -> Result<f64> {
    if a.depth() != b.depth() {
        return Err(EbmError::Shape(format!(
            "states of depth {} and {}",
            a.depth(),
            b.depth()
        )));
    }
    let mut total = 0.0;
    for l in 1..=a.depth() {
        total += a.activities[l].sub(&b.activities[l])?.norm();
    }
    Ok(total)
}

/// Largest coordinatewise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "compared sequences differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn check_probe(step: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(EbmError::InvalidConfig(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {step}"
        )));
    }
    Ok(())
}

/// Central difference of a scalar function.
pub fn finite_diff_scalar(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Central differences of `f` in every weight and bias.
pub fn finite_diff_weight_grad<F>(f: F, params: &ParameterSet, probe_step: f64) -> Result<GradientSet>
where
    F: Fn(&ParameterSet) -> Result<f64>,
{
    check_probe(probe_step)?;
    let mut grads = GradientSet::zeros_like(params);
    let mut probe = params.clone();
    for i in 0..params.num_params() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + probe_step;
        let up = f(&probe)?;
        *probe.param_mut(i) = orig - probe_step;
        let down = f(&probe)?;
        *probe.param_mut(i) = orig;
        *grads.param_mut(i) = (up - down) / (2.0 * probe_step);
    }
    Ok(grads)
}

/// Central differences of `f` in every activity of the listed layers;
/// other layers get zero vectors.
pub fn finite_diff_activity_grad<F>(
    f: F,
    state: &ActivityState,
    layers: impl IntoIterator<Item = usize>,
    probe_step: f64,
) -> Result<Vec<Vector>>
where
    F: Fn(&ActivityState) -> Result<f64>,
{
    check_probe(probe_step)?;
    let mut grads: Vec<Vector> = state.activities.iter().map(|v| Vector::zeros(v.len())).collect();
    let mut probe = state.clone();
    for l in layers {
        for i in 0..state.activities[l].len() {
            let orig = probe.activities[l][i];
            probe.activities[l][i] = orig + probe_step;
            let up = f(&probe)?;
            probe.activities[l][i] = orig - probe_step;
            let down = f(&probe)?;
            probe.activities[l][i] = orig;
            grads[l][i] = (up - down) / (2.0 * probe_step);
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    FiniteDifference,
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorCorrection {
    pub cross_derivative_action: GradientSet,
    pub method: CorrectionMethod,
}

/// Default probe of the directional difference.
pub const DIRECTIONAL_STEP: f64 = 1e-5;

/// `H δ` with `H = ∂²E/∂x∂W` at `free_state`, by a central difference of the
/// weight gradient along `δ`. Layer 0 of `delta_x` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn cross_derivative_action(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    phase: &PhaseConfig,
    free_state: &ActivityState,
    delta_x: &[Vector],
    step: f64,
) -> Result<TaylorCorrection> {
    if delta_x.len() != free_state.activities.len() {
        return Err(EbmError::Shape(format!(
            "displacement has {} layers, state has {}",
            delta_x.len(),
            free_state.activities.len()
        )));
    }
    let norm = delta_x[1..].iter().map(Vector::norm_sq).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(TaylorCorrection {
            cross_derivative_action: GradientSet::zeros_like(params),
            method: CorrectionMethod::FiniteDifference,
        });
    }
    let mut direction = delta_x.to_vec();
    direction[0] = Vector::zeros(direction[0].len());
    let model = EnergyModel::new(kind, spec, params, sample, phase)?;
    let at = |sign: f64| -> Result<GradientSet> {
        let s = free_state.axpy(sign * step / norm, &direction)?;
        model.weight_grad(&model.evaluate(&s)?)
    };
    let action = at(1.0)?.sub(&at(-1.0)?)?.scale(norm / (2.0 * step));
    Ok(TaylorCorrection {
        cross_derivative_action: action,
        method: CorrectionMethod::FiniteDifference,
    })
}

/// The contrastive update with its first-order Taylor term removed:
/// `chl − (1/λ) H δ_x`, on the same loss scale as the update.
pub fn corrected_chl_update(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &RuleConfig,
) -> Result<GradientSet> {
    cfg.validate()?;
    let phases = run_two_phases(kind, spec, params, sample, &cfg.phase, &cfg.inference)?;
    let chl = contrastive_estimate(kind, spec, params, sample, &cfg.phase, &phases)?;
    let delta = phases.perturbed.state.diff(&phases.free.state)?;
    let correction = cross_derivative_action(
        kind,
        spec,
        params,
        sample,
        &cfg.phase,
        &phases.free.state,
        &delta,
        DIRECTIONAL_STEP,
    )?;
    let factor = estimate_scale(kind, spec) / cfg.phase.lambda;
    chl.axpy(-factor, &correction.cross_derivative_action)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Set when the ys are constant and R² is undefined (reported as 0).
    pub constant_response: bool,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linearity_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(EbmError::Shape(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(EbmError::DegenerateFit(format!("need at least 3 points, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(EbmError::DegenerateFit("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if syy == 0.0 {
        return Ok(LinearFit {
            slope,
            intercept,
            r_squared: 0.0,
            constant_response: true,
        });
    }
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    Ok(LinearFit {
        slope,
        intercept,
        r_squared: 1.0 - sse / syy,
        constant_response: false,
    })
}

/// Exact loss gradient of a Hopfield network through its free equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct HopfieldGradient {
    pub grads: GradientSet,
    pub equilibrium: ActivityState,
    pub loss: f64,
}

/// `d/dθ ½|x̄_L − T|²`, where the free equilibrium `x̄(θ)` solves the linear
/// system `H x = c` (`H` positive definite) of the (γ-scaled) Hopfield energy. Differentiating
/// through the solve with the adjoint `v = H⁻¹ (x̄_L − T)` gives
/// `∂/∂W_{l-1} = s_l (v_l x_{l-1}ᵀ + x_l v_{l-1}ᵀ)` and `∂/∂b_{l-1} = s_l v_l`.
pub fn hopfield_equilibrium_gradient(
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    phase: &PhaseConfig,
) -> Result<HopfieldGradient> {
    let free = phase.as_free();
    let model = EnergyModel::new(EnergyKind::Hopfield, spec, params, sample, &free)?;
    if spec.output_head != OutputHead::LinearSquaredError {
        return Err(EbmError::InvalidConfig("Hopfield networks use the squared head".into()));
    }
    let depth = spec.depth();
    let sizes = &spec.layer_sizes;
    let mut offsets = vec![0usize; depth + 2];
    for l in 1..=depth {
        offsets[l + 1] = offsets[l] + sizes[l];
    }
    let n = offsets[depth + 1];
    let s = |l: usize| model.layer_scale(l);

    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut c = DVector::<f64>::zeros(n);
    for l in 1..=depth {
        let o = offsets[l];
        for i in 0..sizes[l] {
            h[(o + i, o + i)] = s(l);
            c[o + i] = s(l) * params.biases[l - 1][i];
        }
        if l == 1 {
            let drive = params.weights[0].matvec(&sample.input)?;
            for i in 0..sizes[1] {
                c[o + i] += s(1) * drive[i];
            }
        } else {
            // Coupling between layers l-1 and l through W_{l-1}.
            let w = &params.weights[l - 1];
            let ob = offsets[l - 1];
            for i in 0..sizes[l] {
                for j in 0..sizes[l - 1] {
                    let v = -s(l) * w.get(i, j);
                    h[(o + i, ob + j)] = v;
                    h[(ob + j, o + i)] = v;
                }
            }
        }
    }
    // Only a positive-definite Hessian gives a stable free equilibrium.
    let chol = h.cholesky().ok_or_else(|| {
        EbmError::Domain("Hopfield energy is not convex in the activities; couplings too strong".into())
    })?;
    let u = chol.solve(&c);

    let mut activities = vec![sample.input.clone()];
    for l in 1..=depth {
        activities.push(Vector::new(u.rows(offsets[l], sizes[l]).iter().copied().collect()));
    }
    let residual = activities[depth].sub(&sample.target)?;
    let loss = 0.5 * residual.norm_sq();
    let mut rhs = DVector::<f64>::zeros(n);
    for i in 0..sizes[depth] {
        rhs[offsets[depth] + i] = residual[i];
    }
    let v = chol.solve(&rhs);
    let adj = |l: usize| -> Vector {
        if l == 0 {
            Vector::zeros(sizes[0])
        } else {
            Vector::new(v.rows(offsets[l], sizes[l]).iter().copied().collect())
        }
    };

    let mut grads = GradientSet::zeros_like(params);
    for l in 1..=depth {
        let vl = adj(l);
        let mut g = Matrix::outer(&vl, &activities[l - 1]);
        if l > 1 {
            g = g.add(&Matrix::outer(&activities[l], &adj(l - 1)))?;
        }
        grads.weight_grads[l - 1] = g.scale(s(l));
        grads.bias_grads[l - 1] = vl.scale(s(l));
    }
    Ok(HopfieldGradient {
        grads,
        equilibrium: ActivityState::new(activities),
        loss,
    })
}
