"""Vehicle models: the kinematic bicycle plant and the linear error dynamics.

The nonlinear kinematic bicycle (constant speed, front steering) drives the
simulation and the MPC prediction.  The linear error-state model (A, B) over
[e1, e1_dot, e2, e2_dot] exists purely for LQR gain design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import TrackPose, WorldPose, wrap_angle


@dataclass(frozen=True)
class VehicleParams:
    """Cornering stiffnesses, geometry and inertia of the car, plus steering lock.

    Defaults describe a mid-size rear-biased road car.
    """

    cf: float = 80000.0      # front cornering stiffness, N/rad
    cr: float = 80000.0      # rear cornering stiffness, N/rad
    lf: float = 1.27         # CG to front axle, m
    lr: float = 1.37         # CG to rear axle, m
    mass: float = 1150.0     # kg
    iz: float = 2000.0       # yaw inertia, kg m^2
    delta_max: float = 0.35  # steering lock, rad

    def __post_init__(self) -> None:
        for name in ("cf", "cr", "lf", "lr", "mass", "iz", "delta_max"):
            v = getattr(self, name)
            if not (v > 0.0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if self.delta_max > math.pi / 4:
            raise ValueError("delta_max above pi/4 is not a road car")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr


@dataclass(frozen=True)
class KinematicState:
    """World pose plus speed; the plant holds speed constant."""

    pose: WorldPose
    v: float

    def __post_init__(self) -> None:
        if self.v < 0.0:
            raise ValueError("speed must be non-negative")


@dataclass(frozen=True)
class ErrorState:
    """Tracking errors fed to the LQR: [e1, e1_dot, e2, e2_dot]."""

    e1: float
    e1_dot: float
    e2: float
    e2_dot: float

    def __post_init__(self) -> None:
        for v in (self.e1, self.e1_dot, self.e2, self.e2_dot):
            if not math.isfinite(v):
                raise ValueError("error state must be finite")

    def vector(self) -> np.ndarray:
        return np.array([self.e1, self.e1_dot, self.e2, self.e2_dot])


def error_dynamics(params: VehicleParams, vx: float) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time (A, B) of the lateral error dynamics at speed ``vx``.

    Standard linear single-track error model about the lane center; all
    vx-dependent entries blow up as vx -> 0, hence the positivity guard.
    """
    if vx <= 0.0:
        raise ValueError(f"error dynamics are singular at vx={vx!r}; need vx > 0")
    cf, cr = params.cf, params.cr
    lf, lr = params.lf, params.lr
    m, iz = params.mass, params.iz
    a = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [
                0.0,
                -(2 * cf + 2 * cr) / (m * vx),
                (2 * cf + 2 * cr) / m,
                (-2 * cf * lf + 2 * cr * lr) / (m * vx),
            ],
            [0.0, 0.0, 0.0, 1.0],
            [
                0.0,
                (-2 * cf * lf + 2 * cr * lr) / (iz * vx),
                (2 * cf * lf - 2 * cr * lr) / iz,
                -(2 * cf * lf**2 + 2 * cr * lr**2) / (iz * vx),
            ],
        ]
    )
    b = np.array([[0.0], [2 * cf / m], [0.0], [2 * cf * lf / iz]])
    return a, b


def slip_angle(params: VehicleParams, delta: float) -> float:
    """Kinematic slip angle beta for a front steering angle delta."""
    return math.atan(params.lr / params.wheelbase * math.tan(delta))


def kinematic_step(
    state: KinematicState, params: VehicleParams, delta: float, dt: float
) -> KinematicState:
    """One forward-Euler step of the kinematic bicycle; speed is preserved.

    ``delta`` is clamped into the steering lock before integration.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    delta = min(max(delta, -params.delta_max), params.delta_max)
    beta = slip_angle(params, delta)
    p = state.pose
    v = state.v
    x = p.x + v * math.cos(p.psi + beta) * dt
    y = p.y + v * math.sin(p.psi + beta) * dt
    psi = wrap_angle(p.psi + v * math.cos(beta) * math.tan(delta) / params.wheelbase * dt)
    return KinematicState(WorldPose(x, y, psi), v)


def velocity_components(state: KinematicState, params: VehicleParams, delta: float) -> tuple[float, float]:
    """Body-frame (vx, vy) implied by the kinematic slip angle at ``delta``."""
    beta = slip_angle(params, min(max(delta, -params.delta_max), params.delta_max))
    return state.v * math.cos(beta), state.v * math.sin(beta)


def lateral_velocity(state: KinematicState, params: VehicleParams, delta: float) -> float:
    return velocity_components(state, params, delta)[1]


def error_state_from_frenet(current: TrackPose, previous: TrackPose, dt: float) -> ErrorState:
    """Error state by backward-differencing two consecutive Frenet poses.

    The heading difference is wrapped, so a theta trace hopping across the
    +-pi seam still yields the small physical rate.  Passing the same pose
    twice gives zero derivatives, which is the convention for the first step
    of an episode.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return ErrorState(
        e1=current.d,
        e1_dot=(current.d - previous.d) / dt,
        e2=current.theta,
        e2_dot=wrap_angle(current.theta - previous.theta) / dt,
    )
