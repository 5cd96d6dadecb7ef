//! Runners for the inference (fig2a/b/c) and training (fig3) experiments and
//! the generic trainer.

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use ebm_core::analysis::{compare_gradients, cosine_similarity, equilibrium_distance, linearity_fit};
use ebm_core::data::{batch_iterator, synthetic_dataset, Dataset};
use ebm_core::energy::{energy, EnergyModel};
use ebm_core::learners::{
    batch_update, evaluate_batch, head_factor, training_step, MomentumSgd, Rule, RuleConfig,
};
use ebm_core::{
    backprop_full, backprop_oracle, energy_trace_decomposition, init_params, run_free_phase,
    run_perturbed_phase, ActivityState, EnergyKind, GradientSet, InferenceConfig, ParameterSet,
    PhaseConfig, Sample, Vector,
};

use crate::config::{Experiment, ExperimentConfig};
use crate::mnist::{load_subsets, locate};
use crate::output::{num, Report, Table};

/// Maps `f` over `items` on `jobs` threads, keeping input order.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Train and test sets for the config, recording where they came from.
pub fn load_data(cfg: &mut ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (files, bundled) = locate(cfg.data_dir.as_deref())?;
    let (train, test) = load_subsets(&files, cfg.train_subset, cfg.test_subset)?;
    cfg.data_source = if bundled { "mnist-bundled" } else { "mnist" }.into();
    if train.samples[0].input.len() != cfg.net.input_dim() || train.samples[0].target.len() != cfg.net.output_dim() {
        bail!(
            "network {} does not fit MNIST (784 inputs, 10 classes)",
            cfg.net.sizes_label()
        );
    }
    Ok((train, test))
}

/// The single input used by the inference figures: the first MNIST training
/// digit when data is available and fits the network, else a synthetic point.
fn figure_sample(cfg: &mut ExperimentConfig) -> Result<Sample> {
    if cfg.net.input_dim() == 784 && cfg.net.output_dim() == 10 {
        if let Ok((train, _)) = load_data(cfg) {
            return Ok(train.samples[0].clone());
        }
    }
    cfg.data_source = "synthetic".into();
    let ds = synthetic_dataset(1, cfg.net.input_dim(), cfg.net.output_dim(), 0)?;
    Ok(ds.samples[0].clone())
}

fn pc_clamped(cfg: &ExperimentConfig, lambda: f64) -> PhaseConfig {
    PhaseConfig::clamped(lambda).with_feedback_gain(cfg.gamma_values[0])
}

fn single(values: &[f64], what: &str) -> Result<f64> {
    match values {
        [v] => Ok(*v),
        _ => bail!("this experiment takes exactly one {what} value, got {}", values.len()),
    }
}

struct Fig2aRun {
    rows: Vec<ebm_core::EnergyRow>,
    slope_total: f64,
    slope_supervised: f64,
    delta_total: f64,
    delta_supervised: f64,
}

/// Energy decomposition over a clamped PC inference phase.
pub fn run_fig2a(cfg: &ExperimentConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    let lambda = single(&cfg.lambda_values, "lambda")?;
    let sample = figure_sample(&mut cfg)?;
    let phase = pc_clamped(&cfg, lambda);
    let inf = InferenceConfig { record_trace: true, ..cfg.inference.clone() };
    let kind = EnergyKind::PredictiveCoding;

    let runs = par_map(cfg.jobs, &cfg.seeds, |&seed| -> Result<Fig2aRun> {
        let params = init_params(&cfg.net, seed);
        let free = run_free_phase(kind, &cfg.net, &params, &sample, &inf)?;
        let r = run_perturbed_phase(kind, &cfg.net, &params, &sample, &inf, &phase, &free.state)?;
        let rows = energy_trace_decomposition(&r)?;

        // Slopes at step 0 along the first update direction, by central
        // differences of the total and the λ-weighted supervised energy.
        let model = EnergyModel::new(kind, &cfg.net, &params, &sample, &phase)?;
        let start = model.prepare(&free.state)?;
        let grads = model.activity_grad(&model.evaluate(&start)?)?;
        let dir: Vec<Vector> = grads.iter().map(|g| g.scale(-1.0)).collect();
        let h = 1e-6;
        let at = |t: f64| energy(kind, &cfg.net, &params, &start.axpy(t, &dir)?, &sample, &phase);
        let (plus, minus) = (at(h)?, at(-h)?);
        let slope_total = (plus.total - minus.total) / (2.0 * h);
        let slope_supervised = lambda * (plus.supervised - minus.supervised) / (2.0 * h);
        Ok(Fig2aRun {
            delta_total: rows[1].total - rows[0].total,
            delta_supervised: lambda * (rows[1].supervised - rows[0].supervised),
            rows,
            slope_total,
            slope_supervised,
        })
    })?;

    let mut table = Table::new("fig2a", &["seed", "step", "internal", "supervised", "total"]);
    for (seed, run) in cfg.seeds.iter().zip(&runs) {
        for r in &run.rows {
            table.push(vec![seed.to_string(), r.step.to_string(), num(r.internal), num(r.supervised), num(r.total)]);
        }
    }
    let mut report = Report::new(cfg.experiment.name());
    report.add_table(&table, &cfg, &cfg.seeds);

    let s = &mut report.summary;
    let internal0 = runs.iter().map(|r| r.rows[0].internal.abs()).fold(0.0, f64::max);
    let slope_gap = runs
        .iter()
        .map(|r| (r.slope_total - r.slope_supervised).abs())
        .fold(0.0, f64::max);
    let total_rise = runs
        .iter()
        .flat_map(|r| r.rows.windows(2).map(|w| w[1].total - w[0].total))
        .fold(f64::NEG_INFINITY, f64::max);
    let sup_decreasing = runs
        .iter()
        .filter(|r| r.rows.len() > 10 && r.rows[..=10].windows(2).all(|w| w[1].supervised < w[0].supervised))
        .count();
    s.set("seeds", runs.len());
    s.set("lambda", lambda);
    s.set("data_source", &cfg.data_source);
    s.set("max_internal_at_step0", internal0);
    s.set("max_step0_slope_gap", slope_gap);
    s.set("max_step0_delta_gap", runs.iter().map(|r| (r.delta_total - r.delta_supervised).abs()).fold(0.0, f64::max));
    s.set("max_total_increase", total_rise);
    s.set("seeds_supervised_decreasing_10", sup_decreasing);
    s.assert("internal_zero_at_step0", internal0 == 0.0);
    s.assert("step0_slope_match", slope_gap <= 1e-8);
    s.assert("total_non_increasing", total_rise <= 0.0);
    s.assert("supervised_decreasing_first_10", sup_decreasing == runs.len());
    Ok(report)
}

fn unit(v: &Vector) -> Vector {
    let n = v.norm();
    if n == 0.0 {
        v.clone()
    } else {
        v.scale(1.0 / n)
    }
}

/// Per-step distance between the direction each hidden layer has moved and
/// the direction of steepest loss descent for that layer. Layers that have
/// not moved yet are left out.
pub fn direction_distance(free: &ActivityState, now: &ActivityState, adjoints: &[Vector]) -> Result<f64> {
    let mut sum = 0.0;
    for l in 1..free.depth() {
        let moved = now.activities[l].sub(&free.activities[l])?;
        if moved.norm() == 0.0 {
            continue;
        }
        sum += unit(&moved).sub(&unit(&adjoints[l].scale(-1.0)))?.norm_sq();
    }
    Ok(sum.sqrt())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Alignment of the activity changes with the backprop gradients during a
/// clamped PC inference phase.
pub fn run_fig2b(cfg: &ExperimentConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    let lambda = single(&cfg.lambda_values, "lambda")?;
    let sample = figure_sample(&mut cfg)?;
    let phase = pc_clamped(&cfg, lambda);
    let inf = InferenceConfig { record_trace: true, ..cfg.inference.clone() };
    let kind = EnergyKind::PredictiveCoding;

    let curves = par_map(cfg.jobs, &cfg.seeds, |&seed| -> Result<Vec<f64>> {
        let params = init_params(&cfg.net, seed);
        let bp = backprop_full(&cfg.net, &params, &sample)?;
        let free = run_free_phase(kind, &cfg.net, &params, &sample, &inf)?;
        let r = run_perturbed_phase(kind, &cfg.net, &params, &sample, &inf, &phase, &free.state)?;
        r.activity_trace
            .iter()
            .map(|s| direction_distance(&free.state, s, &bp.adjoints))
            .collect()
    })?;

    let steps = curves.iter().map(Vec::len).min().unwrap_or(0);
    let mut table = Table::new("fig2b", &["step", "mean_distance", "std_distance"]);
    for t in 0..steps {
        let (m, sd) = mean_std(&curves.iter().map(|c| c[t]).collect::<Vec<_>>());
        table.push(vec![t.to_string(), num(m), num(sd)]);
    }
    let mut per_seed = Table::new("fig2b_seeds", &["seed", "step", "distance"]);
    for (seed, c) in cfg.seeds.iter().zip(&curves) {
        for (t, d) in c.iter().enumerate() {
            per_seed.push(vec![seed.to_string(), t.to_string(), num(*d)]);
        }
    }
    let mut report = Report::new(cfg.experiment.name());
    report.add_table(&table, &cfg, &cfg.seeds);
    report.add_table(&per_seed, &cfg, &cfg.seeds);

    let s = &mut report.summary;
    s.set("seeds", curves.len());
    s.set("data_source", &cfg.data_source);
    if steps < 7 {
        s.set("error", "fewer than 6 inference steps recorded");
        s.assert("early_closer_than_late", false);
        s.assert("saturated", false);
        return Ok(report);
    }
    let last = steps - 1;
    let early_ok = curves.iter().filter(|c| c[1] < c[last]).count();
    let saturation = curves
        .iter()
        .map(|c| (c[last] - c[last - 5]).abs() / c[last])
        .fold(0.0, f64::max);
    let (m1, _) = mean_std(&curves.iter().map(|c| c[1]).collect::<Vec<_>>());
    let (ml, _) = mean_std(&curves.iter().map(|c| c[last]).collect::<Vec<_>>());
    s.set("mean_distance_step1", m1);
    s.set("mean_distance_last", ml);
    s.set("last_step", last);
    s.set("seeds_step1_below_last", early_ok);
    s.set("max_relative_change_last5", saturation);
    s.assert("early_closer_than_late", early_ok == curves.len());
    s.assert("saturated", saturation <= 0.05);
    Ok(report)
}

/// Per-init points `(λ, equilibrium distance, gradient distance, converged)`.
type Fig2cCurve = Vec<(f64, f64, f64, bool)>;

/// Distance between nudged and free equilibria against the distance of the
/// PC-Nudge estimate from the backprop gradient, over a λ sweep.
pub fn run_fig2c(cfg: &ExperimentConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    let sample = figure_sample(&mut cfg)?;
    let kind = EnergyKind::PredictiveCoding;
    let gamma = cfg.gamma_values[0];
    let c = head_factor(cfg.net.output_head);

    let curves = par_map(cfg.jobs, &cfg.seeds, |&seed| -> Result<Fig2cCurve> {
        let params = init_params(&cfg.net, seed);
        let bp = backprop_oracle(&cfg.net, &params, &sample)?;
        let free = run_free_phase(kind, &cfg.net, &params, &sample, &cfg.inference)?;
        cfg.lambda_values
            .iter()
            .map(|&lambda| {
                let phase = PhaseConfig::nudged(lambda).with_feedback_gain(gamma);
                let r = run_perturbed_phase(kind, &cfg.net, &params, &sample, &cfg.inference, &phase, &free.state)?;
                let model = EnergyModel::new(kind, &cfg.net, &params, &sample, &phase)?;
                let g = model.weight_grad(&model.evaluate(&r.state)?)?.scale(1.0 / (lambda * c));
                let eq = equilibrium_distance(&r.state, &free.state)?;
                Ok((lambda, eq, compare_gradients(&g, &bp)?.euclidean_distance, r.converged))
            })
            .collect()
    })?;

    let mut table = Table::new("fig2c", &["init_id", "lambda", "equilibrium_distance", "gradient_distance", "converged"]);
    let mut fits = Table::new("fig2c_fits", &["init_id", "points", "slope", "intercept", "r_squared", "degenerate"]);
    let mut good = 0;
    let mut origin_ok = 0;
    for (seed, curve) in cfg.seeds.iter().zip(&curves) {
        for (l, e, g, c) in curve {
            table.push(vec![seed.to_string(), num(*l), num(*e), num(*g), c.to_string()]);
        }
        let window: Vec<_> = curve.iter().filter(|p| p.0 <= cfg.fit_max_lambda).collect();
        let xs: Vec<f64> = window.iter().map(|p| p.1).collect();
        let ys: Vec<f64> = window.iter().map(|p| p.2).collect();
        match linearity_fit(&xs, &ys) {
            Ok(f) => {
                if f.r_squared >= 0.9 {
                    good += 1;
                }
                fits.push(vec![
                    seed.to_string(),
                    xs.len().to_string(),
                    num(f.slope),
                    num(f.intercept),
                    num(f.r_squared),
                    f.constant_response.to_string(),
                ]);
            }
            Err(e) => fits.push(vec![seed.to_string(), xs.len().to_string(), "".into(), "".into(), "".into(), format!("\"{e}\"")]),
        }
        let lo = curve.iter().min_by(|a, b| a.0.total_cmp(&b.0));
        let hi = curve.iter().max_by(|a, b| a.0.total_cmp(&b.0));
        if let (Some(lo), Some(hi)) = (lo, hi) {
            if lo.1 < 0.01 * hi.1 && lo.2 < 0.01 * hi.2 {
                origin_ok += 1;
            }
        }
    }
    let mut report = Report::new(cfg.experiment.name());
    report.add_table(&table, &cfg, &cfg.seeds);
    report.add_table(&fits, &cfg, &cfg.seeds);
    let s = &mut report.summary;
    s.set("inits", curves.len());
    s.set("data_source", &cfg.data_source);
    s.set("unconverged_points", curves.iter().flatten().filter(|p| !p.3).count());
    s.set("fit_max_lambda", cfg.fit_max_lambda);
    s.set("inits_r2_at_least_0.9", good);
    s.set("inits_through_origin", origin_ok);
    s.assert("linear_for_most_inits", good * 10 >= curves.len() * 8);
    s.assert("through_origin", origin_ok == curves.len());
    Ok(report)
}

/// PC-Nudge configuration of the training experiments.
pub fn pc_nudge_config(cfg: &ExperimentConfig, lambda: f64) -> RuleConfig {
    let mut rc = RuleConfig::pc_nudge(lambda, cfg.weight_lr);
    rc.phase = rc.phase.with_feedback_gain(cfg.gamma_values[0]);
    rc.inference = cfg.inference.clone();
    rc
}

fn batch_grad_distance(
    cfg: &ExperimentConfig,
    params: &ParameterSet,
    batch: &[Sample],
    lambda: f64,
    bp: &GradientSet,
) -> Result<f64> {
    let rc = pc_nudge_config(cfg, lambda);
    let g = batch_update(&cfg.net, params, batch, &rc)?;
    Ok(compare_gradients(&g, bp)?.euclidean_distance)
}

/// Batch order of one epoch, shared by every trainer of a run.
fn epoch_batches(train: &Dataset, cfg: &ExperimentConfig, seed: u64, epoch: usize) -> Result<Vec<Vec<Sample>>> {
    Ok(batch_iterator(train, cfg.batch_size, seed.wrapping_mul(1_000).wrapping_add(epoch as u64), true)?)
}

#[derive(Debug, Clone, Default)]
struct TrainTrace {
    /// (epoch, batch, accuracy, loss), measured before each step.
    batches: Vec<(usize, usize, f64, f64)>,
    cosines: Vec<f64>,
    test_accuracy: Option<f64>,
    error: Option<String>,
}

/// Trains `rule` for `epochs`, optionally tracking the cosine similarity of
/// its batch update with the backprop gradient for `track` further steps.
fn train_run(
    cfg: &ExperimentConfig,
    rc: &RuleConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    epochs: usize,
    track: usize,
) -> TrainTrace {
    let mut trace = TrainTrace::default();
    let mut params = init_params(&cfg.net, seed);
    let mut opt = MomentumSgd::new(cfg.momentum);
    let mut step = 0usize;
    let mut epoch = 0usize;
    let result = (|| -> Result<()> {
        while epoch < epochs || step <= track && track > 0 {
            for (i, batch) in epoch_batches(train, cfg, seed, epoch)?.iter().enumerate() {
                if epoch >= epochs && step > track {
                    break;
                }
                let (acc, loss) = evaluate_batch(&cfg.net, &params, batch)?;
                if epoch < epochs {
                    trace.batches.push((epoch, i, acc, loss));
                }
                let (grad, lr) = training_step(&cfg.net, &params, batch, rc)?;
                if track > 0 && step <= track {
                    let bp = batch_update(&cfg.net, &params, batch, &RuleConfig::backprop(0.0))?;
                    trace.cosines.push(cosine_similarity(&grad.flatten(), &bp.flatten()));
                }
                params = opt.step(&params, lr, &grad)?;
                if !params.all_finite() {
                    bail!("parameters became non-finite at epoch {epoch} batch {i}");
                }
                step += 1;
            }
            epoch += 1;
            if epoch == epochs {
                trace.test_accuracy = Some(evaluate_batch(&cfg.net, &params, &test.samples)?.0);
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        trace.error = Some(format!("{e:#}"));
    }
    trace
}

fn final_epoch_accuracy(t: &TrainTrace, epochs: usize) -> f64 {
    let last: Vec<f64> = t.batches.iter().filter(|b| b.0 + 1 == epochs).map(|b| b.2).collect();
    last.iter().sum::<f64>() / last.len().max(1) as f64
}

/// Panels A (λ-linearity), B (training parity) and C (update similarity).
pub fn run_fig3(cfg: &ExperimentConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    let (train, test) = load_data(&mut cfg)?;
    if train.len() < cfg.batch_size {
        bail!("training subset ({}) is smaller than one batch", train.len());
    }
    let mut report = Report::new(cfg.experiment.name());

    // Panel A: one fixed batch, every init, every λ.
    let batch: Vec<Sample> = train.samples[..cfg.batch_size].to_vec();
    let lambdas = cfg.lambda_values.clone();
    let panel_a = par_map(cfg.jobs, &cfg.seeds, |&seed| -> Result<Vec<f64>> {
        let params = init_params(&cfg.net, seed);
        let bp = batch_update(&cfg.net, &params, &batch, &RuleConfig::backprop(0.0))?;
        lambdas.iter().map(|&l| batch_grad_distance(&cfg, &params, &batch, l, &bp)).collect()
    })?;
    let mut table_a = Table::new("fig3a", &["lambda", "mean_distance", "std_distance"]);
    for (j, l) in lambdas.iter().enumerate() {
        let (m, sd) = mean_std(&panel_a.iter().map(|d| d[j]).collect::<Vec<_>>());
        table_a.push(vec![num(*l), num(m), num(sd)]);
    }
    let mut fits_a = Table::new("fig3a_fits", &["init_id", "slope", "intercept", "r_squared"]);
    let mut r2 = Vec::new();
    for (seed, d) in cfg.seeds.iter().zip(&panel_a) {
        let f = linearity_fit(&lambdas, d)?;
        fits_a.push(vec![seed.to_string(), num(f.slope), num(f.intercept), num(f.r_squared)]);
        r2.push(f.r_squared);
    }
    let (r2_mean, r2_std) = mean_std(&r2);
    report.add_table(&table_a, &cfg, &cfg.seeds);
    report.add_table(&fits_a, &cfg, &cfg.seeds);

    // Panels B and C: one training seed.
    let seed = cfg.seeds[0];
    let lambda = *cfg.lambda_values.last().context("no lambda values")?;
    let pc = RuleConfig {
        weight_lr: cfg.weight_lr,
        ..pc_nudge_config(&cfg, lambda)
    };
    let bp = RuleConfig::backprop(cfg.weight_lr);
    let mut fs = RuleConfig::first_step(lambda, cfg.inference.step_size, cfg.weight_lr);
    fs.phase = fs.phase.with_feedback_gain(cfg.gamma_values[0]);
    let runs = par_map(cfg.jobs, &[0usize, 1, 2], |&which| {
        Ok(match which {
            0 => train_run(&cfg, &pc, &train, &test, seed, cfg.epochs, cfg.cosine_batches),
            1 => train_run(&cfg, &bp, &train, &test, seed, cfg.epochs, 0),
            _ => train_run(&cfg, &fs, &train, &test, seed, cfg.epochs, 0),
        })
    })?;
    let (pc_run, bp_run, fs_run) = (&runs[0], &runs[1], &runs[2]);

    let mut table_b = Table::new(
        "fig3b",
        &["epoch", "batch", "pc_nudge_accuracy", "backprop_accuracy", "first_step_accuracy", "pc_nudge_loss", "backprop_loss"],
    );
    let n = pc_run.batches.len().min(bp_run.batches.len()).min(fs_run.batches.len());
    for i in 0..n {
        let (p, b, f) = (pc_run.batches[i], bp_run.batches[i], fs_run.batches[i]);
        table_b.push(vec![
            p.0.to_string(),
            p.1.to_string(),
            num(p.2),
            num(b.2),
            num(f.2),
            num(p.3),
            num(b.3),
        ]);
    }
    let mut table_c = Table::new("fig3c", &["step", "cosine_similarity"]);
    for (i, c) in pc_run.cosines.iter().enumerate() {
        table_c.push(vec![i.to_string(), num(*c)]);
    }
    report.add_table(&table_b, &cfg, &cfg.seeds);
    report.add_table(&table_c, &cfg, &cfg.seeds);

    let s = &mut report.summary;
    s.set("data_source", &cfg.data_source);
    s.set("train_samples", train.len());
    s.set("test_samples", test.len());
    s.set("panel_a.inits", r2.len());
    s.set("panel_a.mean_r2", r2_mean);
    s.set("panel_a.std_r2", r2_std);
    s.set("panel_a.min_r2", r2.iter().cloned().fold(f64::INFINITY, f64::min));
    s.assert("panel_a_linear", r2_mean >= 0.98);

    let mut aborted = false;
    for (name, run) in [("pc_nudge", pc_run), ("backprop", bp_run), ("first_step", fs_run)] {
        if let Some(e) = &run.error {
            s.set(&format!("panel_b.{name}.aborted"), e);
            aborted = true;
        }
        s.set(&format!("panel_b.{name}.final_epoch_accuracy"), final_epoch_accuracy(run, cfg.epochs));
        if let Some(t) = run.test_accuracy {
            s.set(&format!("panel_b.{name}.test_accuracy"), t);
        }
    }
    let gap = (final_epoch_accuracy(pc_run, cfg.epochs) - final_epoch_accuracy(bp_run, cfg.epochs)).abs();
    s.set("panel_b.accuracy_gap_pp", 100.0 * gap);
    let same_curve = bp_run.batches.iter().map(|b| b.2).eq(fs_run.batches.iter().map(|b| b.2));
    s.assert("panel_b_gap", !aborted && gap <= 0.01);
    s.assert("panel_b_first_step_identical", !aborted && same_curve);

    let min_cos = pc_run.cosines.iter().cloned().fold(f64::INFINITY, f64::min);
    s.set("panel_c.steps", pc_run.cosines.len());
    s.set("panel_c.min_cosine", min_cos);
    s.assert(
        "panel_c_similarity",
        pc_run.error.is_none() && pc_run.cosines.len() > cfg.cosine_batches && min_cos >= 0.999,
    );
    Ok(report)
}

/// Trains one rule and reports per-batch accuracy and loss.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    let (train, test) = load_data(&mut cfg)?;
    let rule: Rule = cfg.rule.parse()?;
    let lambda = single(&cfg.lambda_values, "lambda")?;
    let gamma = cfg.gamma_values[0];
    let rc = match rule {
        Rule::PcNudge => pc_nudge_config(&cfg, lambda),
        Rule::Backprop => RuleConfig::backprop(cfg.weight_lr),
        Rule::FirstStep => {
            let mut r = RuleConfig::first_step(lambda, cfg.inference.step_size, cfg.weight_lr);
            r.phase = r.phase.with_feedback_gain(gamma);
            r
        }
        Rule::Ep | Rule::Pc | Rule::Chl => {
            let kind = EnergyKind::PredictiveCoding;
            let mut r = if rule == Rule::Chl || rule == Rule::Pc {
                RuleConfig::chl(kind, gamma, cfg.inference.clone())
            } else {
                RuleConfig::ep(kind, lambda, cfg.inference.clone())
            };
            r.rule = rule;
            r.weight_lr = cfg.weight_lr;
            r
        }
    };
    rc.validate()?;
    let seed = cfg.seeds[0];
    let run = train_run(&cfg, &rc, &train, &test, seed, cfg.epochs, 0);

    let mut table = Table::new("train", &["epoch", "batch", "accuracy", "loss"]);
    for b in &run.batches {
        table.push(vec![b.0.to_string(), b.1.to_string(), num(b.2), num(b.3)]);
    }
    let mut report = Report::new(cfg.experiment.name());
    report.add_table(&table, &cfg, &cfg.seeds);
    let s = &mut report.summary;
    s.set("rule", rule.name());
    s.set("data_source", &cfg.data_source);
    s.set("batches", run.batches.len());
    s.set("final_epoch_accuracy", final_epoch_accuracy(&run, cfg.epochs));
    if let Some(t) = run.test_accuracy {
        s.set("test_accuracy", t);
    }
    if let Some(e) = &run.error {
        s.set("aborted", e);
    }
    s.assert("completed", run.error.is_none());
    Ok(report)
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.experiment {
        Experiment::Fig2a => run_fig2a(cfg),
        Experiment::Fig2b => run_fig2b(cfg),
        Experiment::Fig2c => run_fig2c(cfg),
        Experiment::Fig3 => run_fig3(cfg),
        Experiment::Train => run_train(cfg),
        Experiment::Gradcheck => crate::checks::run_gradcheck(cfg),
    }
}
