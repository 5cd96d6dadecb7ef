use ebm_core::analysis::{finite_diff_activity_grad, finite_diff_weight_grad, max_relative_error};
use ebm_core::energy::{energy, EnergyModel};
use ebm_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random_net(seed: u64, act: ActivationKind, head: OutputHead) -> (NetworkSpec, ParameterSet, Sample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(2..=4);
    let mut sizes = vec![rng.gen_range(3..=6)];
    for _ in 0..depth {
        sizes.push(rng.gen_range(2..=5));
    }
    let spec = NetworkSpec::new(sizes.clone(), act, head).unwrap();
    let mut params = init_params(&spec, seed);
    for b in params.biases.iter_mut() {
        *b = Vector::new((0..b.len()).map(|_| rng.gen_range(-0.2..0.2)).collect());
    }
    let input = Vector::new((0..sizes[0]).map(|_| rng.gen::<f64>()).collect());
    let out = *sizes.last().unwrap();
    let target = match head {
        OutputHead::SoftmaxCrossEntropy => one_hot(rng.gen_range(0..out), out),
        OutputHead::LinearSquaredError => Vector::new((0..out).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    };
    (spec, params, Sample::new(input, target))
}

fn perturbed_state(spec: &NetworkSpec, params: &ParameterSet, sample: &Sample, seed: u64) -> ActivityState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut s = ActivityState::feedforward(spec, params, &sample.input).unwrap();
    for l in 1..=spec.depth() {
        for i in 0..s.activities[l].len() {
            s.activities[l][i] += rng.gen_range(-0.3..0.3);
        }
    }
    s
}

fn combos() -> Vec<(ActivationKind, OutputHead)> {
    let mut v = Vec::new();
    for act in [ActivationKind::Relu, ActivationKind::Tanh, ActivationKind::Linear] {
        for head in [OutputHead::SoftmaxCrossEntropy, OutputHead::LinearSquaredError] {
            v.push((act, head));
        }
    }
    v
}

#[test]
fn backprop_oracle_matches_finite_differences() {
    for (act, head) in combos() {
        for seed in 0..20 {
            let (spec, params, sample) = random_net(seed, act, head);
            let loss = |p: &ParameterSet| {
                let out = forward_pass(&spec, p, &sample.input)?;
                supervised_loss(head, &out[spec.depth()], &sample.target)
            };
            let fd = finite_diff_weight_grad(loss, &params, STEP).unwrap();
            let bp = backprop_oracle(&spec, &params, &sample).unwrap();
            let err = max_relative_error(&fd.flatten(), &bp.flatten(), 1e-4);
            assert!(err <= 1e-5, "{act:?}/{head:?} seed {seed}: {err:e}");
        }
    }
}

fn phases(seed: u64, spec: &NetworkSpec) -> Vec<PhaseConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let precisions: Vec<Vector> = spec.layer_sizes[1..]
        .iter()
        .map(|&n| Vector::new((0..n).map(|_| rng.gen_range(0.5..2.0)).collect()))
        .collect();
    vec![
        PhaseConfig::free(),
        PhaseConfig::nudged(0.3),
        PhaseConfig::clamped(1.0).with_feedback_gain(0.5),
        PhaseConfig::nudged(0.7).with_feedback_gain(0.8).with_precisions(precisions),
    ]
}

#[test]
fn pc_energy_gradients_match_finite_differences() {
    for (act, head) in combos() {
        for seed in 0..20 {
            let (spec, params, sample) = random_net(100 + seed, act, head);
            for phase in phases(seed, &spec) {
                let kind = EnergyKind::PredictiveCoding;
                let model = EnergyModel::new(kind, &spec, &params, &sample, &phase).unwrap();
                let state = model.prepare(&perturbed_state(&spec, &params, &sample, seed)).unwrap();
                let total = |s: &ActivityState| Ok(energy(kind, &spec, &params, s, &sample, &phase)?.total);
                let fd = finite_diff_activity_grad(total, &state, model.free_layers(), STEP).unwrap();
                let an = model.activity_grad(&model.evaluate(&state).unwrap()).unwrap();
                for l in model.free_layers() {
                    // The dynamics use ∂E/∂x_l divided by the layer scale.
                    let fd_l = fd[l].scale(1.0 / model.layer_scale(l));
                    let err = max_relative_error(fd_l.as_slice(), an[l].as_slice(), 1e-4);
                    assert!(err <= 1e-4, "activity {act:?}/{head:?} seed {seed} layer {l}: {err:e}");
                }
                let wfd = finite_diff_weight_grad(
                    |p| Ok(energy(kind, &spec, p, &state, &sample, &phase)?.total),
                    &params,
                    STEP,
                )
                .unwrap();
                let wan = model.weight_grad(&model.evaluate(&state).unwrap()).unwrap();
                let err = max_relative_error(&wfd.flatten(), &wan.flatten(), 1e-4);
                assert!(err <= 1e-4, "weights {act:?}/{head:?} seed {seed}: {err:e}");
            }
        }
    }
}

#[test]
fn hopfield_energy_gradients_match_finite_differences() {
    for seed in 0..20 {
        let (spec, params, sample) = random_net(200 + seed, ActivationKind::Linear, OutputHead::LinearSquaredError);
        for phase in [
            PhaseConfig::free(),
            PhaseConfig::nudged(0.2),
            PhaseConfig::clamped(1.0),
            PhaseConfig::nudged(0.5).with_feedback_gain(0.25),
        ] {
            let kind = EnergyKind::Hopfield;
            let model = EnergyModel::new(kind, &spec, &params, &sample, &phase).unwrap();
            let state = model.prepare(&perturbed_state(&spec, &params, &sample, seed)).unwrap();
            let total = |s: &ActivityState| Ok(energy(kind, &spec, &params, s, &sample, &phase)?.total);
            let fd = finite_diff_activity_grad(total, &state, model.free_layers(), STEP).unwrap();
            let an = model.activity_grad(&model.evaluate(&state).unwrap()).unwrap();
            for l in model.free_layers() {
                let fd_l = fd[l].scale(1.0 / model.layer_scale(l));
                let err = max_relative_error(fd_l.as_slice(), an[l].as_slice(), 1e-4);
                assert!(err <= 1e-4, "activity seed {seed} layer {l}: {err:e}");
            }
            let wfd = finite_diff_weight_grad(
                |p| Ok(energy(kind, &spec, p, &state, &sample, &phase)?.total),
                &params,
                STEP,
            )
            .unwrap();
            let wan = model.weight_grad(&model.evaluate(&state).unwrap()).unwrap();
            let err = max_relative_error(&wfd.flatten(), &wan.flatten(), 1e-4);
            assert!(err <= 1e-4, "weights seed {seed}: {err:e}");
        }
    }
}

#[test]
fn hopfield_energy_ignores_unrelated_parameters() {
    let (spec, params, sample) = random_net(7, ActivationKind::Linear, OutputHead::LinearSquaredError);
    let state = perturbed_state(&spec, &params, &sample, 7);
    let phase = PhaseConfig::nudged(0.5);
    let base = energy(EnergyKind::Hopfield, &spec, &params, &state, &sample, &phase).unwrap();
    // Layer energies only see their own incoming weights.
    let mut other = params.clone();
    let w = other.weights[0].get(0, 0);
    other.weights[0].set(0, 0, w + 1.0);
    let moved = energy(EnergyKind::Hopfield, &spec, &other, &state, &sample, &phase).unwrap();
    for l in 2..=spec.depth() {
        assert_eq!(base.per_layer_internal[l], moved.per_layer_internal[l]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_identity(seed in 0u64..10_000, lambda in 0.0f64..=1.0, hop in any::<bool>(), nudged in any::<bool>()) {
        let (kind, act, head) = if hop {
            (EnergyKind::Hopfield, ActivationKind::Linear, OutputHead::LinearSquaredError)
        } else {
            (EnergyKind::PredictiveCoding, ActivationKind::Tanh, OutputHead::SoftmaxCrossEntropy)
        };
        let (spec, params, sample) = random_net(seed, act, head);
        let phase = if nudged { PhaseConfig::nudged(lambda) } else { PhaseConfig::clamped(lambda) };
        let state = perturbed_state(&spec, &params, &sample, seed);
        let e = energy(kind, &spec, &params, &state, &sample, &phase).unwrap();
        prop_assert!((e.total - e.internal - e.lambda * e.supervised).abs() <= 1e-10);
        prop_assert!((e.internal - e.per_layer_internal.iter().sum::<f64>()).abs() <= 1e-10);
        if kind == EnergyKind::PredictiveCoding {
            prop_assert!(e.internal >= 0.0 && e.supervised >= 0.0);
        }
    }

    #[test]
    fn gain_and_lambda_play_the_same_role(seed in 0u64..10_000, c in 0.001f64..=1.0) {
        let (spec, params, sample) = random_net(seed, ActivationKind::Relu, OutputHead::SoftmaxCrossEntropy);
        let state = perturbed_state(&spec, &params, &sample, seed);
        let a = energy::energy_activity_grad(EnergyKind::PredictiveCoding, &spec, &params, &state, &sample,
            &PhaseConfig::nudged(1.0).with_feedback_gain(c)).unwrap();
        let b = energy::energy_activity_grad(EnergyKind::PredictiveCoding, &spec, &params, &state, &sample,
            &PhaseConfig::nudged(c)).unwrap();
        let l = spec.depth() - 1;
        prop_assert_eq!(&a[l], &b[l]);
    }
}
