//! Energy-based credit assignment: predictive coding, contrastive Hebbian
//! learning, equilibrium propagation and their relation to backprop.

pub mod analysis;
pub mod data;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod model;

pub use analysis::{
    compare_gradients, corrected_chl_update, cross_derivative_action, equilibrium_distance,
    finite_diff_weight_grad, hopfield_equilibrium_gradient, linearity_fit, ComparisonReport, LinearFit,
};
pub use data::{batch_iterator, load_mnist_idx, synthetic_dataset, Dataset, Split};
pub use dynamics::{
    energy_trace_decomposition, run_free_phase, run_free_phase_with, run_perturbed_phase, EnergyRow,
    EquilibriumResult, InferenceConfig,
};
pub use energy::{
    ActivityState, EnergyBreakdown, EnergyKind, EnergyModel, Evaluation, OutputMode, PhaseConfig,
};
pub use error::{EbmError, Result};
pub use learners::{
    chl_update, ep_update, first_step_update, pc_nudge_update, train_epoch, MomentumSgd, Rule, RuleConfig,
};
pub use linalg::{activation_derivative, apply_activation, ActivationKind, Matrix, Vector};
pub use model::{
    backprop_full, backprop_oracle, forward_pass, forward_trace, init_params, one_hot, supervised_loss,
    BackpropResult, GradientSet, NetworkSpec, OutputHead, ParameterSet, Sample,
};
