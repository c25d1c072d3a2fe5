"""Episodic lane-keeping environment.

Gym-flavoured reset/step loop at 20 Hz around the kinematic plant: assembles
the normalized feature vector, perturbs it with Gaussian sensor noise, scores
each step with the lane-centering reward, and terminates on leaving the
corridor, turning backward, or exhausting the step budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .dynamics import (
    KinematicState,
    VehicleParams,
    kinematic_step,
    velocity_components,
)
from .geometry import Track, TrackPose, centerline_pose, heading_class, world_to_track

#: speed that normalizes the velocity features, m/s (75 km/h)
V_NORM = 75.0 / 3.6

#: episode default speed, m/s (70 km/h)
DEFAULT_SPEED = 70.0 / 3.6

OBS_DIM = 7


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an episode that has already finished."""


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.05
    max_steps: int = 6500
    noise_sigma: float = 0.05
    lam: float = 1.0                      # reward trade-off between angle and offset terms
    speed: float = DEFAULT_SPEED
    seed: int = 0
    heading_lookahead: float = geometry.HEADING_LOOKAHEAD

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        if self.lam < 0.0:
            raise ValueError("lam must be non-negative")
        if self.speed <= 0.0:
            raise ValueError("speed must be positive")
        if self.heading_lookahead <= 0.0:
            raise ValueError("heading_lookahead must be positive")


@dataclass(eq=False)
class Observation:
    """Normalized features: sigma = [d, theta, class one-hot], eta = [vx, vy].

    With sensor noise enabled the stored components are the perturbed values;
    ``hard_class`` recovers a definite class label by argmax.
    """

    sigma: np.ndarray  # (5,)
    eta: np.ndarray    # (2,)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.sigma, self.eta])

    def hard_class(self) -> str:
        return geometry.HEADING_CLASSES[int(np.argmax(self.sigma[2:5]))]


@dataclass(eq=False)
class StepResult:
    obs: Observation
    reward: float
    done: bool
    info: dict


@dataclass(frozen=True)
class EpisodeScore:
    total: float
    steps: int
    terminated_early: bool


def reward(theta: float, d: float, w: float, lam: float = 1.0) -> float:
    """Per-step lane keeping reward.

    cos(theta) - lam*sin(|theta|) - d/w while the car points forward
    (|theta| < pi/2); a flat -2 otherwise.  ``d`` is the magnitude of the
    lateral offset.
    """
    if w <= 0.0:
        raise ValueError("half width must be positive")
    if d < 0.0:
        raise ValueError("d is a magnitude, must be >= 0")
    if abs(theta) < math.pi / 2:
        return math.cos(theta) - lam * math.sin(abs(theta)) - d / w
    return -2.0


def quadratic_reward(e1: float, e2: float, delta: float) -> float:
    """Quadratic alternative reward over tracking errors and steering."""
    return -(0.3 * e1 * e1 + e2 * e2 + 0.03 * delta * delta)


def normalize_state(
    d: float, theta: float, cls: str, vx: float, vy: float, w: float
) -> Observation:
    """Scale raw features into [-1, 1] and one-hot the heading class.

    d keeps its sign here (left positive), unlike the reward which sees the
    magnitude only.
    """
    if w <= 0.0:
        raise ValueError("half width must be positive")
    sigma = np.empty(5)
    sigma[0] = d / w
    sigma[1] = theta / math.pi
    sigma[2:5] = geometry.class_onehot(cls)
    eta = np.array([vx / V_NORM, vy / V_NORM])
    return Observation(sigma, eta)


class LaneKeepEnv:
    """Single-vehicle episodic environment over a fixed track.

    One instance owns one mutable episode at a time.  All randomness comes
    from a generator seeded at reset, so equal seeds replay bit-identically.
    """

    def __init__(
        self,
        track: Track,
        config: EnvConfig | None = None,
        params: VehicleParams | None = None,
    ):
        self.track = track
        self.config = config or EnvConfig()
        self.params = params or VehicleParams()
        self._done = True
        self._rng = None
        self._state = None

    @property
    def done(self) -> bool:
        return self._done

    @property
    def state(self) -> KinematicState:
        """Ground-truth plant state (diagnostics; controllers see observations)."""
        return self._state

    @property
    def track_pose(self) -> TrackPose:
        return self._pose

    def _observe(self, delta: float) -> Observation:
        cfg = self.config
        vx, vy = velocity_components(self._state, self.params, delta)
        cls = heading_class(self.track, self._pose.s, cfg.heading_lookahead)
        clean = normalize_state(
            self._pose.d, self._pose.theta, cls, vx, vy, self.track.half_width
        )
        if cfg.noise_sigma > 0.0:
            vec = clean.vector() + self._rng.standard_normal(OBS_DIM) * cfg.noise_sigma
            return Observation(vec[:5], vec[5:])
        return clean

    def reset(self) -> Observation:
        cfg = self.config
        self._rng = np.random.default_rng(cfg.seed)
        start = centerline_pose(self.track, 0.0)
        self._state = KinematicState(start, cfg.speed)
        self._pose = world_to_track(self.track, start)
        self._step_count = 0
        self._progress = 0.0
        self._done = False
        return self._observe(0.0)

    def step(self, action: float) -> StepResult:
        if self._done:
            raise EpisodeDoneError("episode finished; call reset() first")
        raw = float(action)
        if not math.isfinite(raw):
            raise ValueError(f"action must be finite, got {action!r}")
        a = min(max(raw, -1.0), 1.0)
        delta = a * self.params.delta_max
        cfg = self.config
        prev_s = self._pose.s
        self._state = kinematic_step(self._state, self.params, delta, cfg.dt)
        self._pose = world_to_track(self.track, self._state.pose)
        self._step_count += 1
        total = self.track.total_length
        ds = self._pose.s - prev_s
        if self.track.closed:
            ds = (ds + total / 2.0) % total - total / 2.0
        self._progress += ds
        d, theta = self._pose.d, self._pose.theta
        off_track = abs(d) > self.track.half_width
        backward = abs(theta) >= math.pi / 2
        if off_track or backward:
            r = -2.0
            self._done = True
        else:
            r = reward(theta, abs(d), self.track.half_width, cfg.lam)
            if self._step_count >= cfg.max_steps:
                self._done = True
        obs = self._observe(delta)
        info = {
            "step": self._step_count,
            "s_progress": self._progress,
            "d": d,
            "theta": theta,
            "raw_action": raw,
        }
        return StepResult(obs, r, self._done, info)


#: trace CSV column order, one row per step
TRACE_FIELDS = ("step", "t", "s", "d", "theta", "action", "delta", "reward", "vx", "vy")


def score_episode(
    controller,
    track: Track,
    config: EnvConfig,
    params: VehicleParams | None = None,
    trace: list | None = None,
) -> EpisodeScore:
    """Run one full episode under ``controller`` and sum the rewards.

    The controller must provide ``act(obs, info) -> action``; an optional
    ``reset()`` hook clears warm state between episodes.  When ``trace`` is a
    list, one tuple per step is appended in TRACE_FIELDS order.
    """
    env = LaneKeepEnv(track, config, params)
    obs = env.reset()
    if hasattr(controller, "reset"):
        controller.reset()
    info = {
        "step": 0,
        "s_progress": 0.0,
        "d": env.track_pose.d,
        "theta": env.track_pose.theta,
        "raw_action": 0.0,
    }
    total = 0.0
    steps = 0
    while True:
        action = float(controller.act(obs, info))
        res = env.step(action)
        total += res.reward
        steps += 1
        if trace is not None:
            a = min(max(action, -1.0), 1.0)
            vx, vy = velocity_components(env.state, env.params, a * env.params.delta_max)
            trace.append(
                (
                    steps,
                    steps * config.dt,
                    env.track_pose.s,
                    res.info["d"],
                    res.info["theta"],
                    a,
                    a * env.params.delta_max,
                    res.reward,
                    vx,
                    vy,
                )
            )
        if res.done:
            return EpisodeScore(total, steps, steps < config.max_steps)
        obs, info = res.obs, res.info
