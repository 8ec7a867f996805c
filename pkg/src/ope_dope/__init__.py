"""Off-policy evaluation estimators and influence-guided data-poisoning attacks."""
from ._kernels import get_backend, set_backend
from .attack import (
    ATTACKS,
    AttackConfig,
    AttackResult,
    dope_attack,
    fgsm_attack,
    optimal_delta,
    project_ball,
    projected_dope,
    random_attack,
    random_dope,
    run_attack,
    sample_ball,
    select_influential_set,
)
from .data import (
    Dataset,
    FeatureMatrixSet,
    Transition,
    build_feature_matrices,
    build_state_action_features,
    pairwise_sigma,
    read_dataset,
    write_dataset,
)
from .envs import ChainMdp, Gridworld, chain_exact_value, generate_dataset, gridworld_dataset, gridworld_step
from .estimators import METHODS, EstimatorSettings, OpeEstimate, estimate
from .harness import ExperimentConfig, report_iqm, run_sweep
from .influence import InfluenceReport, brm_influence_features, brm_influence_rewards, influence_scores
from .policies import PolicySpec, epsilon_greedy, softmax_policy, table_policy

__version__ = "0.1.0"
