"""Lane keeping laboratory: track geometry, vehicle models, controllers.

The package simulates a constant-speed vehicle on piecewise straight/arc
tracks and benchmarks three steering controllers against each other: LQR on
the linear error dynamics, horizon MPC on the kinematic bicycle, and a
policy-gradient agent trained from interaction.  A TCP server exposes the
environment to external agents, and the ``lanekeep`` CLI wraps training,
evaluation, comparison tables, and track management.
"""

from .geometry import (
    BUILTIN_TRACKS,
    Track,
    TrackError,
    TrackPose,
    TrackSegment,
    WorldPose,
    arc,
    builtin_track,
    centerline_pose,
    curvature_at,
    heading_class,
    offset_pose,
    straight,
    track_from_json,
    track_to_json,
    world_to_track,
    wrap_angle,
)
from .dynamics import (
    ErrorState,
    KinematicState,
    VehicleParams,
    error_dynamics,
    error_state_from_frenet,
    kinematic_step,
    slip_angle,
)
from .env import (
    EnvConfig,
    EpisodeDoneError,
    EpisodeScore,
    LaneKeepEnv,
    Observation,
    StepResult,
    reward,
    score_episode,
)
from .nn import Adam, Mlp
from .ddpg import DdpgAgent, ExplorationSchedule, ReplayBuffer, Transition, epsilon, train
from .classic import (
    LqrController,
    LqrGain,
    LqrWeights,
    MpcConfig,
    MpcController,
    MpcSolution,
    dare_solve,
    load_presets,
    lqr_act,
    lqr_synthesize,
    mpc_act,
    mpc_solve,
)
from .protocol import EnvClient, Message, ProtocolServer, StreamDecoder, decode, encode

__version__ = "0.1.0"
