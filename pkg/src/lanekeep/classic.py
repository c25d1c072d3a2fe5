"""Baseline steering controllers.

LQR: state feedback on the linear error dynamics, with the gain obtained by
iterating the discrete Riccati recursion at the 50 ms control period.

MPC: constrained finite-horizon tracking of the centerline under the
kinematic bicycle prediction model, solved by projected finite-difference
gradient descent with backtracking (single shooting).  Deliberately
dependency-free so small horizons stay checkable against exhaustive grid
search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    ErrorState,
    KinematicState,
    VehicleParams,
    error_dynamics,
    error_state_from_frenet,
)
from .geometry import (
    Track,
    TrackPose,
    WorldPose,
    centerline_pose,
    offset_pose,
    world_to_track,
    wrap_angle,
)


class RiccatiError(RuntimeError):
    """Riccati iteration failed to reach the fixed point within the cap."""


@dataclass(frozen=True)
class LqrWeights:
    q1: float
    q2: float
    q3: float
    q4: float
    rho: float

    def __post_init__(self) -> None:
        qs = (self.q1, self.q2, self.q3, self.q4)
        if any(q < 0.0 for q in qs) or not any(q > 0.0 for q in qs):
            raise ValueError("state costs must be non-negative with at least one positive")
        if self.rho <= 0.0:
            raise ValueError("action cost rho must be positive")

    def q_matrix(self) -> np.ndarray:
        return np.diag([self.q1, self.q2, self.q3, self.q4])

    def r_matrix(self) -> np.ndarray:
        return np.array([[self.rho]])


@dataclass(frozen=True)
class LqrGain:
    k: np.ndarray          # (4,) feedback row
    p: np.ndarray          # (4, 4) Riccati solution
    residual: float        # max-abs change of the final iteration
    iterations: int


def dare_solve(
    ad: np.ndarray,
    bd: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-10,
    cap: int = 10**6,
    history: list | None = None,
):
    """Fixed-point iteration of the discrete algebraic Riccati equation.

    Starts from P = Q and applies
    P <- Ad' P Ad - Ad' P Bd (R + Bd' P Bd)^-1 Bd' P Ad + Q
    until the max-abs change drops below ``tol``.  Works for any state
    dimension, including scalar systems passed as 1x1 arrays.

    Returns (P, K, iterations, residual); appends each iterate to ``history``
    when given.  Raises RiccatiError if the cap is reached first.
    """
    p = np.asarray(q, dtype=np.float64).copy()
    residual = math.inf
    for it in range(1, cap + 1):
        btp = bd.T @ p
        k = np.linalg.solve(r + btp @ bd, btp @ ad)
        p_next = ad.T @ p @ (ad - bd @ k) + q
        p_next = 0.5 * (p_next + p_next.T)
        residual = float(np.max(np.abs(p_next - p)))
        p = p_next
        if history is not None:
            history.append(p.copy())
        if residual < tol:
            btp = bd.T @ p
            k = np.linalg.solve(r + btp @ bd, btp @ ad)
            return p, k, it, residual
    raise RiccatiError(f"no fixed point within {cap} iterations, residual {residual:.3e}")


def lqr_synthesize(
    params: VehicleParams, vx: float, weights: LqrWeights, dt: float
) -> LqrGain:
    """Discrete LQR gain for the error dynamics at speed ``vx``.

    (A, B) are discretized by forward Euler at ``dt`` and passed through the
    Riccati fixed-point iteration.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    a, b = error_dynamics(params, vx)
    ad = np.eye(4) + dt * a
    bd = dt * b
    p, k, iterations, residual = dare_solve(ad, bd, weights.q_matrix(), weights.r_matrix())
    if float(np.min(np.linalg.eigvalsh(p))) < -1e-8:
        raise RiccatiError("Riccati solution lost positive semidefiniteness")
    return LqrGain(k=k[0].copy(), p=p, residual=residual, iterations=iterations)


def lqr_act(gain: LqrGain, e: ErrorState, delta_max: float) -> float:
    """Normalized steering from state feedback: delta = -K e, clamped."""
    delta = float(-(gain.k @ e.vector()))
    delta = min(max(delta, -delta_max), delta_max)
    return delta / delta_max


# ---------------------------------------------------------------------------
# MPC


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 10
    q_weights: tuple[float, float] = (1.0, 1.0)   # (lateral, heading) output costs
    r_weight: float = 1.0
    delta_bounds: tuple[float, float] = (-0.35, 0.35)
    dt: float = 0.05
    iterations: int = 200
    step_size: float = 0.05
    tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.delta_bounds[0] >= self.delta_bounds[1]:
            raise ValueError("delta_bounds must be an increasing pair")
        if self.iterations < 1:
            raise ValueError("need at least one solver iteration")
        if self.dt <= 0.0 or self.step_size <= 0.0 or self.tol < 0.0:
            raise ValueError("dt, step_size positive and tol non-negative required")


@dataclass(frozen=True)
class MpcSolution:
    actions: np.ndarray    # (horizon - 1,) steering angles, all within bounds
    predicted_cost: float
    converged: bool


def mpc_reference(
    track: Track, pose: WorldPose, v: float, config: MpcConfig
) -> np.ndarray:
    """Centerline reference for the horizon, in the anchor-local frame.

    The anchor is the projection of ``pose``; the local x axis runs along the
    centerline tangent there.  Row k holds (y_ref, psi_ref) of the centerline
    point v*dt*k metres of arc ahead, so row 0 is exactly (0, 0).
    """
    tp = world_to_track(track, pose)
    anchor = centerline_pose(track, tp.s)
    ca, sa = math.cos(anchor.psi), math.sin(anchor.psi)
    out = np.empty((config.horizon, 2))
    for k in range(config.horizon):
        c = centerline_pose(track, tp.s + k * v * config.dt)
        dx, dy = c.x - anchor.x, c.y - anchor.y
        out[k, 0] = -dx * sa + dy * ca
        out[k, 1] = wrap_angle(c.psi - anchor.psi)
    return out


def mpc_solve(
    state: KinematicState,
    reference: np.ndarray,
    params: VehicleParams,
    config: MpcConfig,
    warm_start: np.ndarray | None = None,
) -> MpcSolution:
    """Minimize horizon tracking cost over the steering sequence.

    Cost: sum over predicted outputs of q_y*(y - y_ref)^2 + q_psi*(psi -
    psi_ref)^2 plus r*u^2 per action, the prediction being the forward-Euler
    kinematic rollout from ``state``.  Solved by projected gradient descent
    with central finite differences and backtracking halving; an iterate is
    only ever accepted if it does not increase the cost, and the loop stops
    when the cost decrease falls below ``tol`` or the iteration cap is hit.

    ``warm_start`` is the previous control-step solution: it is shifted by
    one with the last element repeated to form the initial iterate.
    """
    hp = config.horizon
    if reference.shape[0] != hp:
        raise ValueError(f"reference must have {hp} rows, got {reference.shape[0]}")
    n = hp - 1
    lo, hi = config.delta_bounds
    if warm_start is None or len(warm_start) == 0:
        u = [0.0] * n
    else:
        shifted = list(warm_start[1:]) + [warm_start[-1]]
        u = [min(max(float(x), lo), hi) for x in shifted[:n]]
        u += [u[-1] if u else 0.0] * (n - len(u))
    kb = params.lr / params.wheelbase
    wheelbase = params.wheelbase
    vdt = state.v * config.dt
    qy, qpsi = config.q_weights
    rw = config.r_weight
    ref_y = [float(reference[k, 0]) for k in range(hp)]
    ref_psi = [float(reference[k, 1]) for k in range(hp)]
    y0 = state.pose.y
    psi0 = state.pose.psi

    def cost(uv):
        yy, ps = y0, psi0
        ey = yy - ref_y[0]
        ep = wrap_angle(ps - ref_psi[0])
        c = qy * ey * ey + qpsi * ep * ep
        for j in range(n):
            dl = uv[j]
            tn = math.tan(dl)
            beta = math.atan(kb * tn)
            yy += vdt * math.sin(ps + beta)
            ps += vdt * math.cos(beta) * tn / wheelbase
            ey = yy - ref_y[j + 1]
            ep = wrap_angle(ps - ref_psi[j + 1])
            c += qy * ey * ey + qpsi * ep * ep + rw * dl * dl
        return c

    c = cost(u)
    if n == 0:
        return MpcSolution(np.empty(0), c, True)
    h = 1e-6
    converged = False
    for _ in range(config.iterations):
        g = [0.0] * n
        for j in range(n):
            uj = u[j]
            u[j] = uj + h
            cp = cost(u)
            u[j] = uj - h
            cm = cost(u)
            u[j] = uj
            g[j] = (cp - cm) / (2.0 * h)
        step = config.step_size
        improved = False
        while step >= 1e-12:
            candidate = [min(max(u[j] - step * g[j], lo), hi) for j in range(n)]
            c_cand = cost(candidate)
            if c_cand <= c:
                improved = c_cand < c
                break
            step *= 0.5
        if not improved:
            converged = True            # no descent direction left at this scale
            break
        decrease = c - c_cand
        u, c = candidate, c_cand
        if decrease < config.tol:
            converged = True
            break
    return MpcSolution(np.array(u), c, converged)


def mpc_act(
    track: Track,
    state: KinematicState,
    params: VehicleParams,
    config: MpcConfig,
    warm_start: np.ndarray | None = None,
) -> tuple[float, MpcSolution]:
    """Receding-horizon step: build the reference, solve, apply action 0.

    Returns the normalized action and the solution (whose action array is the
    warm start for the next call).
    """
    reference = mpc_reference(track, state.pose, state.v, config)
    tp = world_to_track(track, state.pose)
    local = KinematicState(WorldPose(0.0, tp.d, tp.theta), state.v)
    sol = mpc_solve(local, reference, params, config, warm_start)
    if len(sol.actions) == 0:
        return 0.0, sol
    a = float(sol.actions[0]) / params.delta_max
    return min(1.0, max(-1.0, a)), sol


# ---------------------------------------------------------------------------
# controller adapters for score_episode / the CLI
#
# Both read the perceived (possibly noisy) lateral offset and heading error
# from the observation, exactly what the feature pipeline delivers; track
# position s comes from the episode's accumulated progress.


class LqrController:
    """Differentiates consecutive perceived errors to feed the 4-state gain."""

    def __init__(self, gain: LqrGain, track: Track, params: VehicleParams, dt: float):
        self.gain = gain
        self.track = track
        self.params = params
        self.dt = dt
        self._prev = None

    def reset(self) -> None:
        self._prev = None

    def act(self, obs, info) -> float:
        d = float(obs.sigma[0]) * self.track.half_width
        theta = float(obs.sigma[1]) * math.pi
        cur = TrackPose(0.0, d, theta)
        prev = cur if self._prev is None else self._prev
        e = error_state_from_frenet(cur, prev, self.dt)
        self._prev = cur
        return lqr_act(self.gain, e, self.params.delta_max)


class MpcController:
    """Rebuilds the perceived pose on the track and re-solves each step."""

    def __init__(
        self,
        config: MpcConfig,
        track: Track,
        params: VehicleParams,
        speed: float,
    ):
        self.config = config
        self.track = track
        self.params = params
        self.speed = speed
        self._warm = None

    def reset(self) -> None:
        self._warm = None

    def act(self, obs, info) -> float:
        s = self.track.wrap_s(float(info["s_progress"]))
        d = float(obs.sigma[0]) * self.track.half_width
        theta = float(obs.sigma[1]) * math.pi
        pose = offset_pose(self.track, s, d, theta)
        action, sol = mpc_act(
            self.track,
            KinematicState(pose, self.speed),
            self.params,
            self.config,
            self._warm,
        )
        self._warm = sol.actions
        return action


# ---------------------------------------------------------------------------
# benchmark presets


@dataclass(frozen=True)
class Preset:
    row: int
    track: str
    weights: LqrWeights
    horizon: int


def load_presets() -> dict[int, Preset]:
    """The twelve benchmark tuning rows shipped with the package."""
    from importlib import resources

    text = resources.files("lanekeep").joinpath("data/presets.cfg").read_text()
    presets = {}
    for key, value in _parse_flat_config(text).items():
        if not key.startswith("row"):
            continue
        row = int(key[3:])
        parts = [p.strip() for p in value.split(",")]
        if len(parts) != 7:
            raise ValueError(f"preset {key}: expected 7 fields, got {len(parts)}")
        track = parts[0]
        q1, q2, q3, q4, rho = (float(p) for p in parts[1:6])
        presets[row] = Preset(
            row=row,
            track=track,
            weights=LqrWeights(q1, q2, q3, q4, rho),
            horizon=int(parts[6]),
        )
    return presets


def _parse_flat_config(text: str) -> dict[str, str]:
    """key = value lines; '#' starts a comment; values stay raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
