use ebm_core::analysis::{compare_gradients, corrected_chl_update};
use ebm_core::learners::RuleConfig;
use ebm_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net(seed: u64) -> (NetworkSpec, ParameterSet, Sample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..rng.gen_range(3..=5)).map(|_| rng.gen_range(2..=6)).collect();
    let spec = NetworkSpec::new(sizes.clone(), ActivationKind::Tanh, OutputHead::SoftmaxCrossEntropy).unwrap();
    let params = init_params(&spec, seed);
    let input = Vector::new((0..sizes[0]).map(|_| rng.gen::<f64>()).collect());
    let out = *sizes.last().unwrap();
    (spec, params, Sample::new(input, one_hot(rng.gen_range(0..out), out)))
}

#[test]
fn corrected_chl_beats_plain_chl_in_most_trials() {
    let kind = EnergyKind::PredictiveCoding;
    let inf = InferenceConfig::until_converged(0.1, 20_000, 1e-13);
    let mut wins = 0;
    for seed in 0..50 {
        let (spec, params, sample) = small_net(seed);
        let bp = backprop_oracle(&spec, &params, &sample).unwrap();
        let cfg = RuleConfig::ep(kind, 0.1, inf.clone());
        let plain = ep_update(kind, &spec, &params, &sample, &cfg).unwrap();
        let corrected = corrected_chl_update(kind, &spec, &params, &sample, &cfg).unwrap();
        let dp = compare_gradients(&plain, &bp).unwrap().euclidean_distance;
        let dc = compare_gradients(&corrected, &bp).unwrap().euclidean_distance;
        wins += usize::from(dc <= dp);
    }
    assert!(wins >= 40, "corrected update closer in {wins}/50 trials");
}
