use serde::{Deserialize, Serialize};

use ebm_core::{ActivationKind, InferenceConfig, NetworkSpec, OutputHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Fig2a,
    Fig2b,
    Fig2c,
    Fig3,
    Gradcheck,
    Train,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig2a => "fig2a",
            Experiment::Fig2b => "fig2b",
            Experiment::Fig2c => "fig2c",
            Experiment::Fig3 => "fig3",
            Experiment::Gradcheck => "gradcheck",
            Experiment::Train => "train",
        }
    }
}

/// Everything that determines an experiment's output. Paths and the thread
/// count are deliberately left out of the serialized form (and so of the
/// config hash): they do not change the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub lambda_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
    pub net: NetworkSpec,
    pub inference: InferenceConfig,
    pub weight_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_subset: usize,
    pub test_subset: usize,
    /// Largest λ included in the equilibrium-distance fit.
    pub fit_max_lambda: f64,
    /// Training batches over which the update similarity is tracked.
    pub cosine_batches: usize,
    /// `train` only: rule name.
    pub rule: String,
    /// Filled in once data is resolved: `mnist`, `mnist-bundled` or `synthetic`.
    pub data_source: String,
    #[serde(skip)]
    pub data_dir: Option<std::path::PathBuf>,
    #[serde(skip)]
    pub jobs: usize,
}

pub fn mnist_net() -> NetworkSpec {
    NetworkSpec::new(vec![784, 128, 64, 10], ActivationKind::Relu, OutputHead::SoftmaxCrossEntropy)
        .expect("valid network")
}

impl ExperimentConfig {
    /// Protocol defaults of each experiment.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            seeds: (0..10).collect(),
            lambda_values: vec![1.0],
            gamma_values: vec![1.0],
            net: mnist_net(),
            // ReLU kinks raise the energy by small amounts, so the step-wise
            // increase check is off; non-finite values still abort.
            inference: InferenceConfig::fixed(0.1, 50).without_divergence_check(),
            weight_lr: 0.001,
            momentum: 0.9,
            epochs: 2,
            batch_size: 64,
            train_subset: 10_000,
            test_subset: 2_000,
            fit_max_lambda: 0.1,
            cosine_batches: 200,
            rule: "pc_nudge".into(),
            data_source: String::new(),
            data_dir: None,
            jobs: 1,
        };
        match experiment {
            Experiment::Fig2a | Experiment::Fig2b => base,
            Experiment::Fig2c => Self {
                lambda_values: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
                inference: InferenceConfig::until_converged(0.02, 25_000, 1e-10).without_divergence_check(),
                ..base
            },
            Experiment::Fig3 => Self {
                seeds: (0..20).collect(),
                lambda_values: vec![0.3, 0.1, 0.03, 0.01, 0.003, 0.001],
                ..base
            },
            Experiment::Gradcheck => Self {
                lambda_values: vec![0.02, 0.01, 0.005],
                gamma_values: vec![0.5, 0.25, 0.125, 0.0625],
                net: NetworkSpec::new(vec![6, 5, 4, 3], ActivationKind::Relu, OutputHead::LinearSquaredError)
                    .expect("valid network"),
                inference: InferenceConfig::until_converged(0.1, 200_000, 1e-13),
                ..base
            },
            Experiment::Train => Self {
                seeds: vec![0],
                lambda_values: vec![0.001],
                ..base
            },
        }
    }

    pub fn seeds_label(&self) -> String {
        self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::output::config_hash;

    #[test]
    fn hash_ignores_paths_and_threads() {
        let a = ExperimentConfig::defaults(Experiment::Fig3);
        let b = ExperimentConfig {
            jobs: 8,
            data_dir: Some("/elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = ExperimentConfig { weight_lr: 0.002, ..a.clone() };
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn protocol_defaults() {
        let f = ExperimentConfig::defaults(Experiment::Fig3);
        assert_eq!(f.seeds.len(), 20);
        assert_eq!(f.lambda_values.last(), Some(&0.001));
        assert_eq!((f.inference.step_size, f.inference.max_steps), (0.1, 50));
        assert!(f.inference.is_fixed_budget());
        assert_eq!((f.batch_size, f.momentum, f.weight_lr), (64, 0.9, 0.001));
        assert_eq!((f.train_subset, f.test_subset, f.epochs), (10_000, 2_000, 2));
        assert_eq!(ExperimentConfig::defaults(Experiment::Fig2c).lambda_values.len(), 10);
    }
}
