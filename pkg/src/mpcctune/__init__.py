"""Model predictive contouring control for quadrotor racing, with automatic weight tuning."""

from .dynamics import QuadParams, QuadState, Wrench, integrate_step, mix_rotor_thrusts, state_derivative
from .mpcc import (
    AugmentedState,
    MpccController,
    OcpConfig,
    OcpSolution,
    ParamBounds,
    ParamVector,
    contour_weight,
    control_step,
    solve_ocp,
)
from .rollout import RewardConfig, RolloutResult, SimConfig, compute_reward, run_episode
from .track import (
    Gate,
    ReferencePath,
    Track,
    build_reference_path,
    bundled_track,
    contour_lag_errors,
    detect_gate_pass,
    load_track,
    path_point,
)
from .tuner import (
    GaussianPolicy,
    TrainConfig,
    mh_search,
    random_search,
    reward_weights,
    sample_batch,
    train,
    wml_update,
)

__version__ = "0.1.0"
