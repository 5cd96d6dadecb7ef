//! Runs the twelve acceptance criteria and prints one PASS/FAIL line each.
//! MNIST comes from `EBM_DATA_DIR` when set, else from the bundled sample.

use std::process::ExitCode;
use std::time::Instant;

use ebm_experiments::checks::{self, CheckOutcome};
use ebm_experiments::config::{Experiment, ExperimentConfig};
use ebm_experiments::figures::{run_fig2c, run_fig3};
use ebm_experiments::Summary;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn from_check(id: usize, o: anyhow::Result<CheckOutcome>) -> Line {
    match o {
        Ok(o) => Line {
            id,
            name: o.name,
            passed: o.passed,
            detail: o.detail,
        },
        Err(e) => Line {
            id,
            name: "error",
            passed: false,
            detail: format!("{e:#}"),
        },
    }
}

fn from_summary(id: usize, name: &'static str, s: &anyhow::Result<Summary>, asserts: &[&str], keys: &[&str]) -> Line {
    match s {
        Ok(s) => {
            let passed = asserts.iter().all(|a| s.get(&format!("assert.{a}")) == Some("PASS"));
            let detail = keys
                .iter()
                .map(|k| format!("{k}={}", s.get(k).unwrap_or("?")))
                .collect::<Vec<_>>()
                .join(" ");
            Line { id, name, passed, detail }
        }
        Err(e) => Line {
            id,
            name,
            passed: false,
            detail: format!("{e:#}"),
        },
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let data_dir = std::env::var_os("EBM_DATA_DIR").map(Into::into);
    let with_env = |e: Experiment| ExperimentConfig {
        data_dir: data_dir.clone(),
        jobs,
        ..ExperimentConfig::defaults(e)
    };

    let g = with_env(Experiment::Gradcheck);
    let fig3 = run_fig3(&with_env(Experiment::Fig3)).map(|r| r.summary);
    let fig2c = run_fig2c(&with_env(Experiment::Fig2c)).map(|r| r.summary);
    let eta = g.inference.step_size;

    let mut lines = vec![
        from_check(1, checks::first_step_exactness(0.5, eta)),
        from_summary(2, "pc_nudge_fidelity", &fig3, &["panel_c_similarity"], &["panel_c.min_cosine", "panel_c.steps", "data_source"]),
        from_summary(3, "lambda_linearity", &fig3, &["panel_a_linear"], &["panel_a.mean_r2", "panel_a.min_r2"]),
        from_summary(4, "equilibrium_distance_linearity", &fig2c, &["linear_for_most_inits"], &["inits_r2_at_least_0.9", "inits", "unconverged_points"]),
        from_check(5, checks::ep_first_order(&g.seeds, &g.lambda_values, &g.inference)),
        from_check(6, checks::corrected_chl(&g.seeds, &g.lambda_values, &g.inference)),
        from_check(7, checks::chl_weak_feedback(&g.seeds, &g.gamma_values, &g.inference)),
        from_check(8, checks::free_phase_properties(&g.seeds)),
        from_check(9, checks::gain_lambda_equivalence(&g.seeds)),
        from_summary(
            10,
            "training_parity",
            &fig3,
            &["panel_b_gap", "panel_b_first_step_identical"],
            &[
                "panel_b.accuracy_gap_pp",
                "panel_b.pc_nudge.test_accuracy",
                "panel_b.backprop.test_accuracy",
                "assert.panel_b_first_step_identical",
                "train_samples",
            ],
        ),
        from_check(11, checks::finite_difference_oracles()),
        from_check(12, checks::layerwise_propagation(&g.seeds, eta)),
    ];
    lines.sort_by_key(|l| l.id);

    let mut failed = 0;
    for l in &lines {
        println!(
            "criterion {:>2} {}: {} ({})",
            l.id,
            l.name,
            if l.passed { "PASS" } else { "FAIL" },
            l.detail
        );
        failed += usize::from(!l.passed);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        lines.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
