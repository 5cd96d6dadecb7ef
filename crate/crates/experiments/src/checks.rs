//! Oracle comparisons on small random networks. `gradcheck` runs all of
//! them; the acceptance suite reports each one separately.

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ebm_core::analysis::{
    compare_gradients, corrected_chl_update, finite_diff_activity_grad, finite_diff_weight_grad,
    hopfield_equilibrium_gradient, max_relative_error,
};
use ebm_core::energy::{energy, energy_activity_grad, EnergyModel};
use ebm_core::learners::{chl_update, ep_update, first_step_update, RuleConfig};
use ebm_core::{
    backprop_oracle, forward_pass, init_params, one_hot, run_free_phase, run_perturbed_phase,
    supervised_loss, ActivationKind, ActivityState, EnergyKind, GradientSet, InferenceConfig,
    NetworkSpec, OutputHead, ParameterSet, PhaseConfig, Sample, Vector,
};

use crate::config::ExperimentConfig;
use crate::output::{num, Report, Table};

/// One comparison: a rule or quantity under one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub rule: String,
    pub config: String,
    pub distance: f64,
    pub cosine: Option<f64>,
    pub ratio: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub rows: Vec<CheckRow>,
}

impl CheckOutcome {
    fn new(name: &'static str, rows: Vec<CheckRow>, detail: String) -> Self {
        Self {
            name,
            passed: !rows.is_empty() && rows.iter().all(|r| r.pass),
            detail,
            rows,
        }
    }
}

fn row(rule: &str, config: String, distance: f64, pass: bool) -> CheckRow {
    CheckRow {
        rule: rule.into(),
        config,
        distance,
        cosine: None,
        ratio: None,
        pass,
    }
}

/// A random network, parameters with small random biases, and one sample.
pub fn random_net(
    sizes: &[usize],
    act: ActivationKind,
    head: OutputHead,
    seed: u64,
) -> Result<(NetworkSpec, ParameterSet, Sample)> {
    let spec = NetworkSpec::new(sizes.to_vec(), act, head)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&spec, seed);
    for b in params.biases.iter_mut() {
        *b = Vector::new((0..b.len()).map(|_| rng.gen_range(-0.1..0.1)).collect());
    }
    let input = Vector::new((0..sizes[0]).map(|_| rng.gen::<f64>()).collect());
    let out = *sizes.last().expect("at least two layers");
    let target = match head {
        OutputHead::SoftmaxCrossEntropy => one_hot(rng.gen_range(0..out), out),
        OutputHead::LinearSquaredError => Vector::new((0..out).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    };
    Ok((spec, params, Sample::new(input, target)))
}

/// Layer sizes with `2..=4` weight layers and widths up to `max_width`.
pub fn random_sizes(seed: u64, max_width: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5123);
    let depth = rng.gen_range(2..=4);
    (0..=depth).map(|_| rng.gen_range(2..=max_width)).collect()
}

fn max_abs(vs: &[Vector]) -> f64 {
    vs.iter().map(Vector::max_abs).fold(0.0, f64::max)
}

/// First-step updates against backprop on 20 nets, two of them MNIST-sized.
pub fn first_step_exactness(lambda: f64, step_size: f64) -> Result<CheckOutcome> {
    let mut rows = Vec::new();
    for i in 0..20u64 {
        let (act, head) = if i % 2 == 0 {
            (ActivationKind::Relu, OutputHead::SoftmaxCrossEntropy)
        } else {
            (ActivationKind::Linear, OutputHead::LinearSquaredError)
        };
        let sizes = if i < 2 { vec![784, 128, 64, 10] } else { random_sizes(i, 12) };
        let (spec, params, sample) = random_net(&sizes, act, head, i)?;
        let cfg = RuleConfig::first_step(lambda, step_size, 0.0);
        let fs = first_step_update(&spec, &params, &sample, &cfg)?;
        let bp = backprop_oracle(&spec, &params, &sample)?;
        let err = fs.max_abs_diff(&bp)?;
        let mut r = row("first_step", format!("net={} act={} seed={i}", spec.sizes_label(), act.name()), err, err <= 1e-10);
        r.cosine = Some(compare_gradients(&fs, &bp)?.cosine_similarity);
        rows.push(r);
    }
    let worst = rows.iter().map(|r| r.distance).fold(0.0, f64::max);
    Ok(CheckOutcome::new("first_step_exactness", rows, format!("max abs error {worst:.3e} over 20 nets (tol 1e-10)")))
}

fn small_hopfield(seed: u64) -> Result<(NetworkSpec, ParameterSet, Sample)> {
    let (spec, params, sample) = random_net(&random_sizes(seed, 6), ActivationKind::Linear, OutputHead::LinearSquaredError, seed)?;
    Ok((spec, params.scaled_weights(0.3), sample))
}

fn small_pc(seed: u64) -> Result<(NetworkSpec, ParameterSet, Sample)> {
    random_net(&random_sizes(seed, 6), ActivationKind::Tanh, OutputHead::SoftmaxCrossEntropy, seed)
}

/// Exact loss gradient for the network: backprop for PC, the derivative
/// through the free equilibrium for Hopfield.
fn oracle(kind: EnergyKind, spec: &NetworkSpec, params: &ParameterSet, sample: &Sample) -> Result<GradientSet> {
    Ok(match kind {
        EnergyKind::PredictiveCoding => backprop_oracle(spec, params, sample)?,
        EnergyKind::Hopfield => hopfield_equilibrium_gradient(spec, params, sample, &PhaseConfig::free())?.grads,
    })
}

fn halving_rows(
    rule: &str,
    label: &str,
    lambdas: &[f64],
    dists: &[f64],
    range: (f64, f64),
) -> Vec<CheckRow> {
    lambdas
        .windows(2)
        .zip(dists.windows(2))
        .map(|(l, d)| {
            let ratio = d[1] / d[0];
            let mut r = row(rule, format!("{label} lambda={}->{}", l[0], l[1]), d[1], ratio >= range.0 && ratio <= range.1);
            r.ratio = Some(ratio);
            r
        })
        .collect()
}

fn ratio_span(rows: &[CheckRow]) -> (f64, f64) {
    rows.iter().filter_map(|r| r.ratio).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// EP error shrinks in proportion to λ, for PC and Hopfield energies.
pub fn ep_first_order(seeds: &[u64], lambdas: &[f64], inference: &InferenceConfig) -> Result<CheckOutcome> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for kind in [EnergyKind::PredictiveCoding, EnergyKind::Hopfield] {
            let (spec, params, sample) = match kind {
                EnergyKind::PredictiveCoding => small_pc(seed)?,
                EnergyKind::Hopfield => small_hopfield(seed)?,
            };
            let exact = oracle(kind, &spec, &params, &sample)?;
            let dists = lambdas
                .iter()
                .map(|&l| {
                    let g = ep_update(kind, &spec, &params, &sample, &RuleConfig::ep(kind, l, inference.clone()))?;
                    Ok(compare_gradients(&g, &exact)?.euclidean_distance)
                })
                .collect::<Result<Vec<_>>>()?;
            let label = format!("{kind:?} net={} seed={seed}", spec.sizes_label());
            rows.extend(halving_rows("ep", &label, lambdas, &dists, (0.35, 0.65)));
        }
    }
    let (lo, hi) = ratio_span(&rows);
    Ok(CheckOutcome::new("ep_first_order", rows, format!("halving ratios in [{lo:.4}, {hi:.4}] (need [0.35, 0.65])")))
}

/// Contrastive update with its first-order Taylor term removed.
pub fn corrected_chl(seeds: &[u64], lambdas: &[f64], inference: &InferenceConfig) -> Result<CheckOutcome> {
    let kind = EnergyKind::PredictiveCoding;
    let mut rows = Vec::new();
    for &seed in seeds {
        let (spec, params, sample) = small_pc(seed)?;
        let exact = backprop_oracle(&spec, &params, &sample)?;
        let mut plain = Vec::new();
        let mut corrected = Vec::new();
        for &l in lambdas {
            let cfg = RuleConfig::ep(kind, l, inference.clone());
            plain.push(compare_gradients(&ep_update(kind, &spec, &params, &sample, &cfg)?, &exact)?.euclidean_distance);
            corrected.push(compare_gradients(&corrected_chl_update(kind, &spec, &params, &sample, &cfg)?, &exact)?.euclidean_distance);
        }
        let label = format!("net={} seed={seed}", spec.sizes_label());
        let mut r = halving_rows("corrected_chl", &label, lambdas, &corrected, (0.15, 0.40));
        for (x, d) in r.iter_mut().zip(plain.windows(2)) {
            x.config = format!("{} uncorrected_ratio={:.4}", x.config, d[1] / d[0]);
        }
        rows.extend(r);
    }
    let (lo, hi) = ratio_span(&rows);
    let mut linear_worst = 0.0f64;
    for &seed in seeds {
        let (spec, params, sample) =
            random_net(&random_sizes(seed, 6), ActivationKind::Linear, OutputHead::LinearSquaredError, seed)?;
        let exact = backprop_oracle(&spec, &params, &sample)?;
        let cfg = RuleConfig::ep(kind, lambdas[0], inference.clone());
        let d = corrected_chl_update(kind, &spec, &params, &sample, &cfg)?.max_abs_diff(&exact)?;
        linear_worst = linear_worst.max(d);
        rows.push(row("corrected_chl", format!("linear net={} seed={seed}", spec.sizes_label()), d, d <= 1e-8));
    }
    Ok(CheckOutcome::new(
        "corrected_chl_second_order",
        rows,
        format!("halving ratios in [{lo:.4}, {hi:.4}] (need [0.15, 0.40]); linear nets max error {linear_worst:.3e} (need 1e-8)"),
    ))
}

/// Hopfield CHL approaches backprop as the feedback gain shrinks.
pub fn chl_weak_feedback(seeds: &[u64], gammas: &[f64], inference: &InferenceConfig) -> Result<CheckOutcome> {
    let kind = EnergyKind::Hopfield;
    let mut rows = Vec::new();
    for &seed in seeds {
        let (spec, params, sample) = small_hopfield(seed)?;
        let exact = backprop_oracle(&spec, &params, &sample)?;
        let dists = gammas
            .iter()
            .map(|&g| {
                let cfg = RuleConfig::chl(kind, g, inference.clone());
                Ok(compare_gradients(&chl_update(kind, &spec, &params, &sample, &cfg)?, &exact)?.euclidean_distance)
            })
            .collect::<Result<Vec<_>>>()?;
        let decreasing = dists.windows(2).all(|w| w[1] < w[0]);
        let list: Vec<String> = dists.iter().map(|d| format!("{d:.3e}")).collect();
        let mut r = row(
            "chl",
            format!("net={} seed={seed} distances=[{}]", spec.sizes_label(), list.join(" ")),
            *dists.last().unwrap_or(&f64::NAN),
            decreasing,
        );
        r.ratio = Some(dists.last().unwrap_or(&f64::NAN) / dists[0]);
        rows.push(r);
    }
    let n = rows.iter().filter(|r| r.pass).count();
    Ok(CheckOutcome::new("chl_weak_feedback", rows, format!("{n}/{} nets strictly decreasing over gamma={gammas:?}", seeds.len())))
}

/// After the forward pass the PC energy, errors and all gradients vanish.
pub fn free_phase_properties(seeds: &[u64]) -> Result<CheckOutcome> {
    let kind = EnergyKind::PredictiveCoding;
    let mut rows = Vec::new();
    for &seed in seeds {
        let sizes = if seed == seeds[0] { vec![784, 128, 64, 10] } else { random_sizes(seed, 12) };
        for (act, head) in [
            (ActivationKind::Relu, OutputHead::SoftmaxCrossEntropy),
            (ActivationKind::Tanh, OutputHead::LinearSquaredError),
        ] {
            let (spec, params, sample) = random_net(&sizes, act, head, seed)?;
            let state = ActivityState::new(forward_pass(&spec, &params, &sample.input)?);
            let phase = PhaseConfig::free();
            let model = EnergyModel::new(kind, &spec, &params, &sample, &phase)?;
            let ev = model.evaluate(&state)?;
            let e = model.breakdown(&ev)?;
            let hidden_errors: Vec<Vector> = (1..spec.depth()).map(|l| ev.error(l).clone()).collect();
            let worst = [
                e.internal.abs(),
                max_abs(&hidden_errors),
                max_abs(&model.activity_grad(&ev)?),
                model.weight_grad(&ev)?.max_abs(),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            rows.push(row("free_phase", format!("net={} act={} seed={seed}", spec.sizes_label(), act.name()), worst, worst <= 1e-12));
        }
    }
    let worst = rows.iter().map(|r| r.distance).fold(0.0, f64::max);
    Ok(CheckOutcome::new("free_phase_properties", rows, format!("largest energy/error/gradient entry {worst:.3e} (tol 1e-12)")))
}

/// Feedback gain and λ enter the penultimate layer's dynamics identically.
pub fn gain_lambda_equivalence(seeds: &[u64]) -> Result<CheckOutcome> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let (spec, params, sample) = random_net(&random_sizes(seed, 8), ActivationKind::Relu, OutputHead::SoftmaxCrossEntropy, seed)?;
        let mut state = ActivityState::new(forward_pass(&spec, &params, &sample.input)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 1..spec.depth() {
            for i in 0..state.activities[l].len() {
                state.activities[l][i] += rng.gen_range(-0.2..0.2);
            }
        }
        let l = spec.depth() - 1;
        for c in [1.0, 0.5, 0.1, 0.01] {
            let a = energy_activity_grad(EnergyKind::PredictiveCoding, &spec, &params, &state, &sample, &PhaseConfig::nudged(1.0).with_feedback_gain(c))?;
            let b = energy_activity_grad(EnergyKind::PredictiveCoding, &spec, &params, &state, &sample, &PhaseConfig::nudged(c))?;
            let same = a[l].as_slice().iter().zip(b[l].as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
            rows.push(row("gain_lambda", format!("net={} seed={seed} c={c}", spec.sizes_label()), a[l].sub(&b[l])?.max_abs(), same));
        }
    }
    let n = rows.iter().filter(|r| r.pass).count();
    let total = rows.len();
    Ok(CheckOutcome::new("gain_lambda_equivalence", rows, format!("{n}/{total} comparisons bitwise equal")))
}

const FD_STEP: f64 = 1e-5;

fn perturbed(spec: &NetworkSpec, params: &ParameterSet, sample: &Sample, seed: u64) -> Result<ActivityState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut s = ActivityState::feedforward(spec, params, &sample.input)?;
    for l in 1..=spec.depth() {
        for i in 0..s.activities[l].len() {
            s.activities[l][i] += rng.gen_range(-0.3..0.3);
        }
    }
    Ok(s)
}

fn energy_fd_errors(
    kind: EnergyKind,
    spec: &NetworkSpec,
    params: &ParameterSet,
    sample: &Sample,
    phase: &PhaseConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let model = EnergyModel::new(kind, spec, params, sample, phase)?;
    let state = model.prepare(&perturbed(spec, params, sample, seed)?)?;
    let total = |s: &ActivityState| Ok(energy(kind, spec, params, s, sample, phase)?.total);
    let fd = finite_diff_activity_grad(total, &state, model.free_layers(), FD_STEP)?;
    let ev = model.evaluate(&state)?;
    let an = model.activity_grad(&ev)?;
    let mut act_err = 0.0f64;
    for l in model.free_layers() {
        let fd_l = fd[l].scale(1.0 / model.layer_scale(l));
        act_err = act_err.max(max_relative_error(fd_l.as_slice(), an[l].as_slice(), 1e-4));
    }
    let wfd = finite_diff_weight_grad(|p| Ok(energy(kind, spec, p, &state, sample, phase)?.total), params, FD_STEP)?;
    let w_err = max_relative_error(&wfd.flatten(), &model.weight_grad(&ev)?.flatten(), 1e-4);
    Ok((act_err, w_err))
}

/// Every analytic gradient against central finite differences.
pub fn finite_difference_oracles() -> Result<CheckOutcome> {
    let mut rows = Vec::new();
    let tol = 1e-4;
    for seed in 0..20u64 {
        let sizes = random_sizes(seed, 6);
        for (act, head) in [
            (ActivationKind::Relu, OutputHead::SoftmaxCrossEntropy),
            (ActivationKind::Tanh, OutputHead::LinearSquaredError),
            (ActivationKind::Linear, OutputHead::SoftmaxCrossEntropy),
        ] {
            let (spec, params, sample) = random_net(&sizes, act, head, seed)?;
            let label = format!("net={} act={} seed={seed}", spec.sizes_label(), act.name());
            let loss = |p: &ParameterSet| {
                let out = forward_pass(&spec, p, &sample.input)?;
                supervised_loss(head, &out[spec.depth()], &sample.target)
            };
            let fd = finite_diff_weight_grad(loss, &params, FD_STEP)?;
            let bp = backprop_oracle(&spec, &params, &sample)?;
            let e = max_relative_error(&fd.flatten(), &bp.flatten(), 1e-4);
            rows.push(row("backprop", label.clone(), e, e <= tol));

            let phase = PhaseConfig::nudged(0.6).with_feedback_gain(0.7);
            let (a, w) = energy_fd_errors(EnergyKind::PredictiveCoding, &spec, &params, &sample, &phase, seed)?;
            rows.push(row("pc_activity", label.clone(), a, a <= tol));
            rows.push(row("pc_weight", label, w, w <= tol));
        }
        let (spec, params, sample) = random_net(&sizes, ActivationKind::Linear, OutputHead::LinearSquaredError, seed)?;
        for phase in [PhaseConfig::nudged(0.4).with_feedback_gain(0.5), PhaseConfig::clamped(1.0)] {
            let label = format!("net={} {} seed={seed}", spec.sizes_label(), phase.output_mode.name());
            let (a, w) = energy_fd_errors(EnergyKind::Hopfield, &spec, &params, &sample, &phase, seed)?;
            rows.push(row("hopfield_activity", label.clone(), a, a <= tol));
            rows.push(row("hopfield_weight", label, w, w <= tol));
        }
    }
    let worst = rows.iter().map(|r| r.distance).fold(0.0, f64::max);
    Ok(CheckOutcome::new("finite_difference_oracles", rows, format!("max relative error {worst:.3e} over 20 configurations (tol 1e-4)")))
}

/// From the free equilibrium a clamped output reaches layer `L-1-k` only at step `k+1`.
pub fn layerwise_propagation(seeds: &[u64], step_size: f64) -> Result<CheckOutcome> {
    let kind = EnergyKind::PredictiveCoding;
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut sizes = random_sizes(seed, 8);
        sizes.push(3);
        let (spec, params, sample) = random_net(&sizes, ActivationKind::Tanh, OutputHead::SoftmaxCrossEntropy, seed)?;
        let depth = spec.depth();
        let inf = InferenceConfig::fixed(step_size, depth + 1).with_trace();
        let free = run_free_phase(kind, &spec, &params, &sample, &inf)?;
        let r = run_perturbed_phase(kind, &spec, &params, &sample, &inf, &PhaseConfig::clamped(1.0), &free.state)?;
        let mut worst = 0.0f64;
        let mut reached = true;
        for k in 0..depth - 1 {
            let l = depth - 1 - k;
            for t in 0..=k {
                worst = worst.max(r.activity_trace[t].activities[l].sub(&free.state.activities[l])?.max_abs());
            }
            reached &= r.activity_trace[k + 1].activities[l] != free.state.activities[l];
        }
        rows.push(row("layerwise", format!("net={} seed={seed} moved_on_time={reached}", spec.sizes_label()), worst, worst <= 1e-14));
    }
    let worst = rows.iter().map(|r| r.distance).fold(0.0, f64::max);
    Ok(CheckOutcome::new("layerwise_propagation", rows, format!("largest early change {worst:.3e} (tol 1e-14)")))
}

/// All checks that need no data, in criterion order.
pub fn all_checks(cfg: &ExperimentConfig) -> Result<Vec<CheckOutcome>> {
    let eta = cfg.inference.step_size;
    Ok(vec![
        first_step_exactness(0.5, eta)?,
        ep_first_order(&cfg.seeds, &cfg.lambda_values, &cfg.inference)?,
        corrected_chl(&cfg.seeds, &cfg.lambda_values, &cfg.inference)?,
        chl_weak_feedback(&cfg.seeds, &cfg.gamma_values, &cfg.inference)?,
        free_phase_properties(&cfg.seeds)?,
        gain_lambda_equivalence(&cfg.seeds)?,
        finite_difference_oracles()?,
        layerwise_propagation(&cfg.seeds, eta)?,
    ])
}

/// One row per (rule, config) with distance, cosine and pass/fail.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Report> {
    let outcomes = all_checks(cfg)?;
    let mut table = Table::new("gradcheck", &["check", "rule", "config", "distance", "cosine", "ratio", "pass"]);
    let mut report = Report::new(cfg.experiment.name());
    for o in &outcomes {
        for r in &o.rows {
            table.push(vec![
                o.name.to_string(),
                r.rule.clone(),
                format!("\"{}\"", r.config),
                num(r.distance),
                r.cosine.map(num).unwrap_or_default(),
                r.ratio.map(num).unwrap_or_default(),
                if r.pass { "PASS" } else { "FAIL" }.into(),
            ]);
        }
    }
    report.add_table(&table, cfg, &cfg.seeds);
    for o in &outcomes {
        report.summary.set(&format!("{}.detail", o.name), &o.detail);
        report.summary.assert(o.name, o.passed);
    }
    Ok(report)
}
