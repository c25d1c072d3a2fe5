"""Deterministic-policy-gradient agent: actor/critic with target networks,
uniform replay, and epsilon-scheduled Gaussian exploration."""

from __future__ import annotations

import json
import os
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import nn

Batch = namedtuple("Batch", "s a r s2 done")


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: float
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring; overwrites the oldest entry once full."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._s = None
        self._cursor = 0
        self._fill = 0

    def __len__(self):
        return self._fill

    def push(self, t: Transition):
        if self._s is None:
            dim = len(t.s)
            self._s = np.empty((self.capacity, dim))
            self._a = np.empty((self.capacity, 1))
            self._r = np.empty(self.capacity)
            self._s2 = np.empty((self.capacity, dim))
            self._done = np.empty(self.capacity)
        i = self._cursor
        self._s[i] = t.s
        self._a[i, 0] = t.a
        self._r[i] = t.r
        self._s2[i] = t.s_next
        self._done[i] = 1.0 if t.done else 0.0
        self._cursor = (i + 1) % self.capacity
        self._fill = min(self._fill + 1, self.capacity)

    def transition(self, i: int) -> Transition:
        """i-th stored transition in insertion order, oldest first."""
        if not 0 <= i < self._fill:
            raise IndexError(i)
        j = (self._cursor - self._fill + i) % self.capacity
        return Transition(
            self._s[j].copy(),
            float(self._a[j, 0]),
            float(self._r[j]),
            self._s2[j].copy(),
            bool(self._done[j]),
        )

    def sample(self, rng: np.random.Generator, m: int) -> Batch:
        if self._fill < 1:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._fill, size=m)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._done[idx])


@dataclass(frozen=True)
class ExplorationSchedule:
    eps_init: float = 1.0
    eps_min: float = 0.1
    t_eps: int = 400_000   # steps over which epsilon anneals to the floor
    beta: float = 1.0      # scales the N(0, 0.05^2) perturbation

    def __post_init__(self):
        if not (self.eps_init >= self.eps_min > 0.0):
            raise ValueError("need eps_init >= eps_min > 0")
        if self.t_eps <= 0:
            raise ValueError("t_eps must be positive")


#: standard deviation of the exploration perturbation before beta scaling
EXPLORE_SIGMA = 0.05


def epsilon(schedule: ExplorationSchedule, t: int) -> float:
    """Linear decay from eps_init to the eps_min floor over t_eps steps."""
    if t < 0:
        raise ValueError("t must be non-negative")
    span = schedule.eps_init - schedule.eps_min
    return max(schedule.eps_min, schedule.eps_init - span * (t / schedule.t_eps))


class DdpgAgent:
    """Actor/critic pair plus slowly blended target copies and replay.

    The critic consumes [state, action] with the action joined in at its
    second hidden layer; the actor's action gradient is read off the critic's
    input gradient, exactly the chain the policy-gradient update wants.
    """

    def __init__(
        self,
        state_dim: int = 7,
        action_dim: int = 1,
        hidden=(64, 64),
        gamma: float = 0.99,
        lr_actor: float = 1e-3,
        lr_critic: float = 1e-4,
        tau: float = 0.001,
        batch_size: int = 64,
        buffer_capacity: int = 100_000,
        schedule: ExplorationSchedule | None = None,
        warm_up: int | None = None,
        seed: int = 0,
    ):
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        self.gamma = gamma
        self.lr_actor = lr_actor
        self.lr_critic = lr_critic
        self.tau = tau
        self.batch_size = batch_size
        self.schedule = schedule or ExplorationSchedule()
        self.warm_up = max(batch_size, 1000) if warm_up is None else warm_up
        self.seed = seed
        a_ss, c_ss, r_ss = np.random.SeedSequence(seed).spawn(3)
        self.actor = nn.init([state_dim, *self.hidden, action_dim], a_ss, "tanh")
        self.critic = nn.init(
            [state_dim, *self.hidden, 1], c_ss, "linear",
            aux_dim=action_dim, aux_layer=1,
        )
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.opt_actor = nn.Adam(self.actor.parameters(), lr_actor)
        self.opt_critic = nn.Adam(self.critic.parameters(), lr_critic)
        self.buffer = ReplayBuffer(buffer_capacity)
        self.rng = np.random.default_rng(r_ss)
        self.global_step = 0

    # -- acting --------------------------------------------------------------

    def act(self, s, explore: bool, rng: np.random.Generator | None = None) -> float:
        a = float(np.atleast_1d(self.actor.forward(np.asarray(s, dtype=np.float64)))[0])
        if explore:
            rng = self.rng if rng is None else rng
            if rng.random() < epsilon(self.schedule, self.global_step):
                a += self.schedule.beta * rng.normal(0.0, EXPLORE_SIGMA)
        return min(1.0, max(-1.0, a))

    # -- updates -------------------------------------------------------------

    def critic_target(self, batch: Batch) -> np.ndarray:
        """Bellman targets y = r + gamma * Q'(s', mu'(s')), cut at terminals."""
        a2 = self.target_actor.forward(batch.s2)
        q2 = self.target_critic.forward(np.concatenate([batch.s2, a2], axis=1))[:, 0]
        return batch.r + self.gamma * q2 * (1.0 - batch.done)

    def critic_update(self, batch: Batch) -> float:
        """One descent step on the mean squared Bellman error; returns the
        pre-step loss."""
        if len(self.buffer) < self.batch_size:
            raise ValueError("buffer fill below batch size")
        m = batch.s.shape[0]
        y = self.critic_target(batch)
        xa = np.concatenate([batch.s, batch.a], axis=1)
        q = self.critic.forward(xa)[:, 0]
        resid = q - y
        loss = float(np.mean(resid * resid))
        g = self.critic.backward(xa, (2.0 / m) * resid[:, None])
        self.opt_critic.step(self.critic.parameters(), g.weights + g.biases)
        return loss

    def actor_update(self, batch: Batch) -> float:
        """One ascent step on mean Q(s, mu(s)); critic parameters untouched.
        Returns the pre-step mean Q."""
        if len(self.buffer) < self.batch_size:
            raise ValueError("buffer fill below batch size")
        m = batch.s.shape[0]
        amu = self.actor.forward(batch.s)
        xa = np.concatenate([batch.s, amu], axis=1)
        q = self.critic.forward(xa)
        gc = self.critic.backward(xa, np.full((m, 1), 1.0 / m))
        dq_da = gc.wrt_input[:, self.state_dim:]
        ga = self.actor.backward(batch.s, dq_da)
        self.opt_actor.step(self.actor.parameters(), ga.weights + ga.biases, "ascend")
        return float(np.mean(q))

    def soft_update(self):
        """Blend targets toward the online nets: w_t <- tau*w + (1-tau)*w_t."""
        for net, target in ((self.actor, self.target_actor), (self.critic, self.target_critic)):
            for w, tw in zip(net.parameters(), target.parameters()):
                tw *= 1.0 - self.tau
                tw += self.tau * w


def train(agent: DdpgAgent, env, total_steps: int, on_episode=None) -> list[tuple]:
    """Interleave environment interaction with one update triple per step.

    Returns one (episode, steps, cumulative_reward, epsilon) row per finished
    episode; ``on_episode`` receives each row as it is produced.  Fully
    deterministic given agent and env seeds.
    """
    log = []
    if total_steps <= 0:
        return log
    obs = env.reset().vector()
    ep_reward, ep_steps = 0.0, 0
    for _ in range(total_steps):
        a = agent.act(obs, explore=True)
        res = env.step(a)
        obs2 = res.obs.vector()
        agent.buffer.push(Transition(obs, a, res.reward, obs2, res.done))
        agent.global_step += 1
        ep_reward += res.reward
        ep_steps += 1
        if len(agent.buffer) >= agent.warm_up:
            batch = agent.buffer.sample(agent.rng, agent.batch_size)
            agent.critic_update(batch)
            agent.actor_update(batch)
            agent.soft_update()
        if res.done:
            row = (len(log) + 1, ep_steps, ep_reward, epsilon(agent.schedule, agent.global_step))
            log.append(row)
            if on_episode is not None:
                on_episode(row)
            obs = env.reset().vector()
            ep_reward, ep_steps = 0.0, 0
        else:
            obs = obs2
    return log


TRAIN_LOG_FIELDS = ("episode", "steps", "cumulative_reward", "epsilon")


class PolicyController:
    """Greedy wrapper around a trained actor for scoring runs."""

    def __init__(self, actor: nn.Mlp):
        self.actor = actor

    def act(self, obs, info) -> float:
        a = float(np.atleast_1d(self.actor.forward(obs.vector()))[0])
        return min(1.0, max(-1.0, a))

_NET_FILES = {
    "actor": "actor.net",
    "critic": "critic.net",
    "target_actor": "target_actor.net",
    "target_critic": "target_critic.net",
}


def save_agent(agent: DdpgAgent, directory: str, extra: dict | None = None):
    """Checkpoint all four networks plus a manifest of the hyperparameters.

    Optimizer moments and the replay buffer are not persisted; a loaded agent
    evaluates exactly but does not resume training mid-stride.
    """
    os.makedirs(directory, exist_ok=True)
    for attr, fname in _NET_FILES.items():
        nn.save(getattr(agent, attr), os.path.join(directory, fname))
    manifest = {
        "format": 1,
        "networks": dict(_NET_FILES),
        "hyperparameters": {
            "state_dim": agent.state_dim,
            "action_dim": agent.action_dim,
            "hidden": list(agent.hidden),
            "gamma": agent.gamma,
            "lr_actor": agent.lr_actor,
            "lr_critic": agent.lr_critic,
            "tau": agent.tau,
            "batch_size": agent.batch_size,
            "buffer_capacity": agent.buffer.capacity,
            "warm_up": agent.warm_up,
            "eps_init": agent.schedule.eps_init,
            "eps_min": agent.schedule.eps_min,
            "t_eps": agent.schedule.t_eps,
            "beta": agent.schedule.beta,
            "seed": agent.seed,
        },
        "global_step": agent.global_step,
    }
    if extra:
        manifest["run"] = extra
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(directory: str) -> dict:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_actor(directory: str) -> nn.Mlp:
    """The policy network alone; all an evaluation run needs."""
    manifest = load_manifest(directory)
    return nn.load(os.path.join(directory, manifest["networks"]["actor"]))


def load_agent(directory: str) -> DdpgAgent:
    manifest = load_manifest(directory)
    hp = manifest["hyperparameters"]
    agent = DdpgAgent(
        state_dim=hp["state_dim"],
        action_dim=hp["action_dim"],
        hidden=tuple(hp["hidden"]),
        gamma=hp["gamma"],
        lr_actor=hp["lr_actor"],
        lr_critic=hp["lr_critic"],
        tau=hp["tau"],
        batch_size=hp["batch_size"],
        buffer_capacity=hp["buffer_capacity"],
        schedule=ExplorationSchedule(hp["eps_init"], hp["eps_min"], hp["t_eps"], hp["beta"]),
        warm_up=hp["warm_up"],
        seed=hp["seed"],
    )
    for attr, fname in manifest["networks"].items():
        setattr(agent, attr, nn.load(os.path.join(directory, fname)))
    agent.opt_actor = nn.Adam(agent.actor.parameters(), agent.lr_actor)
    agent.opt_critic = nn.Adam(agent.critic.parameters(), agent.lr_critic)
    agent.global_step = manifest.get("global_step", 0)
    return agent
