"""Gridworld DQN with lpNTK-max exploration.

The Q-network is a :class:`~lpntk.model.NetworkSpec` MLP whose outputs are
the action values; states are one-hot cells.  There is no target network: the
bootstrap uses the current Q and is treated as a constant in the gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (NetworkSpec, TrainingDiverged, init_params, logit_jacobian, logit_jacobians, logits_batch,
                    output_vjp)
from .numerics import argmax_tiebreak, dot, make_rng, row_dots, spawn

ACTIONS = ("up", "down", "left", "right")
MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0))


class RlError(ValueError):
    pass


@dataclass(frozen=True)
class GridState:
    x: int
    y: int
    t: int = 0


@dataclass(frozen=True)
class GridWorld:
    width: int = 5
    height: int = 5
    walls: frozenset = frozenset()
    step_reward: float = -0.01
    goal_reward: float = 1.0
    max_steps: int = 100

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.width * self.height < 2:
            raise RlError("grid must have at least two cells")
        if self.start in self.walls or self.goal in self.walls:
            raise RlError("start and goal must not be walls")
        if self.shortest_path() is None:
            raise RlError("goal is not reachable from the start")

    @property
    def start(self):
        return (0, 0)

    @property
    def goal(self):
        return (self.width - 1, self.height - 1)

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def reset(self) -> GridState:
        return GridState(0, 0, 0)

    def features(self, s: GridState) -> np.ndarray:
        v = np.zeros(self.n_states)
        v[s.y * self.width + s.x] = 1.0
        return v

    def _move(self, cell, a):
        dx, dy = MOVES[a]
        nx, ny = cell[0] + dx, cell[1] + dy
        if not (0 <= nx < self.width and 0 <= ny < self.height) or (nx, ny) in self.walls:
            return cell
        return nx, ny

    def shortest_path(self, cell=None):
        """Breadth-first distance to the goal, or None when unreachable."""
        cell = self.start if cell is None else cell
        frontier, seen, dist = [cell], {cell}, 0
        while frontier:
            if self.goal in frontier:
                return dist
            nxt = []
            for c in frontier:
                for a in range(len(ACTIONS)):
                    m = self._move(c, a)
                    if m not in seen:
                        seen.add(m)
                        nxt.append(m)
            frontier, dist = nxt, dist + 1
        return None

    def optimal_return(self, cell=None) -> float:
        """Undiscounted return of a shortest path: goal reward on the last step."""
        d = self.shortest_path(cell)
        return self.goal_reward + self.step_reward * (d - 1)


def env_step(env: GridWorld, state: GridState, a: int):
    """Deterministic move; returns ``(next_state, reward, done)``."""
    if not 0 <= a < len(ACTIONS):
        raise RlError(f"invalid action {a}")
    cell = env._move((state.x, state.y), a)
    nxt = GridState(cell[0], cell[1], state.t + 1)
    if cell == env.goal:
        return nxt, env.goal_reward, True
    return nxt, env.step_reward, nxt.t >= env.max_steps


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool
    # true goal arrival; a time-limit cut-off still bootstraps
    terminal: bool = False


def td_error(q_s, a: int, r: float, q_next, gamma: float, done: bool) -> float:
    """``Q(s, a) - (r + gamma * max Q(s', .))`` with no bootstrap at terminal states."""
    boot = 0.0 if done else gamma * float(np.max(q_next))
    return float(q_s[a]) - (r + boot)


def dqn_update(params, spec: NetworkSpec, batch, gamma: float, eta: float) -> np.ndarray:
    """One SGD step on ``mean(0.5 * delta^2)`` with the bootstrap held fixed."""
    if not batch:
        raise RlError("empty batch")
    S = np.stack([t.s for t in batch])
    S2 = np.stack([t.s_next for t in batch])
    Q, Q2 = logits_batch(params, spec, S), logits_batch(params, spec, S2)
    seeds = np.zeros_like(Q)
    for i, t in enumerate(batch):
        seeds[i, t.a] = td_error(Q[i], t.a, t.r, Q2[i], gamma, t.terminal)
    if not np.all(np.isfinite(seeds)):
        raise TrainingDiverged(-1)
    grad = output_vjp(params, spec, S, seeds) / len(batch)
    return params - eta * grad


def q_lpntk(params, spec: NetworkSpec, s, a: int, s2, a2: int) -> float:
    """Inner product of row ``a`` of dQ(s)/dw with row ``a2`` of dQ(s2)/dw."""
    return dot(logit_jacobian(params, spec, s)[a], logit_jacobian(params, spec, s2)[a2])


def lpntk_max_action(params, spec: NetworkSpec, s, batch) -> int:
    """Action whose gradient row is, on average, most aligned with the batch pairs."""
    if not batch:
        raise RlError("empty batch")
    J = logit_jacobian(params, spec, s)
    Jb = logit_jacobians(params, spec, np.stack([si for si, _ in batch]))
    rows = Jb[np.arange(len(batch)), [ai for _, ai in batch]]
    return lpntk_max_from_kernel(np.stack([row_dots(rows, J[a]) for a in range(spec.K)], axis=1))


def lpntk_max_from_kernel(kappa) -> int:
    """Column of the (batch, action) kernel table with the largest mean; ties go low."""
    kappa = np.atleast_2d(np.asarray(kappa, dtype=np.float64))
    if kappa.shape[0] == 0:
        raise RlError("empty batch")
    return argmax_tiebreak(kappa.mean(axis=0))


def behaviour_action(params, spec: NetworkSpec, s, batch, eps: float, rng: np.random.Generator,
                     strategy: str = "lpntk_max") -> int:
    """Greedy when ``u >= eps``; otherwise the exploration branch.

    The exploration branch is lpNTK-max or a uniform random action; lpNTK-max
    falls back to uniform while no replay batch exists yet.
    """
    if not 0.0 <= eps <= 1.0:
        raise RlError("eps must lie in [0, 1]")
    if rng.random() >= eps:
        return argmax_tiebreak(logits_batch(params, spec, s[None])[0])
    if strategy == "lpntk_max" and batch:
        return lpntk_max_action(params, spec, s, batch)
    return int(rng.integers(spec.K))


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise RlError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self._items: list = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def ordered(self) -> list:
        """Contents from oldest to newest."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]

    def sample(self, n: int) -> list:
        idx = self.rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class RlConfig:
    gamma: float = 0.9
    eps: float = 0.3
    eta: float = 0.1
    capacity: int = 2000
    batch_size: int = 32
    total_steps: int = 5000
    eval_episodes: int = 1
    eval_every: int = 500
    seed: int = 0
    strategy: str = "eps_greedy"
    hidden: tuple = (32,)
    activation: str = "relu"
    learning_starts: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise RlError("gamma must lie in [0, 1)")
        if not 0.0 <= self.eps <= 1.0:
            raise RlError("eps must lie in [0, 1]")
        if self.eta <= 0 or self.batch_size < 1 or self.capacity < 1 or self.total_steps < 0:
            raise RlError("invalid learning rate, batch size, capacity or step count")
        if self.eval_episodes < 1 or self.eval_every < 1:
            raise RlError("evaluation settings must be positive")
        if self.strategy not in ("eps_greedy", "lpntk_max"):
            raise RlError(f"unknown strategy {self.strategy!r}")

    def network(self, env: GridWorld) -> NetworkSpec:
        return NetworkSpec((env.n_states, *self.hidden, len(ACTIONS)), self.activation)


def evaluate(params, spec: NetworkSpec, env: GridWorld, episodes: int, rng: np.random.Generator | None = None):
    """Mean and std of undiscounted greedy-episode returns.

    Rollouts are deterministic (greedy policy, deterministic grid); ``rng`` is
    accepted for interface symmetry with stochastic policies.
    """
    if episodes < 1:
        raise RlError("need at least one episode")
    returns = []
    for _ in range(episodes):
        s, total, done = env.reset(), 0.0, False
        while not done:
            a = argmax_tiebreak(logits_batch(params, spec, env.features(s)[None])[0])
            s, r, done = env_step(env, s, a)
            total += r
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


def random_policy_return(env: GridWorld, episodes: int, rng: np.random.Generator):
    returns = []
    for _ in range(episodes):
        s, total, done = env.reset(), 0.0, False
        while not done:
            s, r, done = env_step(env, s, int(rng.integers(len(ACTIONS))))
            total += r
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


@dataclass
class RlRun:
    params: np.ndarray
    curve: list = field(default_factory=list)  # (step, eval_mean, eval_std)
    actions: list = field(default_factory=list)

    @property
    def final_return(self) -> float:
        return self.curve[-1][1] if self.curve else float("nan")


def run_training(cfg: RlConfig, env: GridWorld | None = None) -> RlRun:
    """Interleave behaviour-policy steps with one DQN update per step.

    Separate generators drive initialisation, the behaviour policy, replay
    sampling and evaluation, so two strategies with the same seed agree until
    the first exploration draw.
    """
    env = GridWorld() if env is None else env
    spec = cfg.network(env)
    init_rng, policy_rng, replay_rng, eval_rng = spawn(make_rng(cfg.seed), 4)
    params = init_params(spec, init_rng)
    run = RlRun(params)
    if cfg.total_steps == 0:
        return run
    buf = ReplayBuffer(cfg.capacity, replay_rng)
    last_batch: list = []
    s = env.reset()
    for step in range(1, cfg.total_steps + 1):
        x = env.features(s)
        pairs = [(t.s, t.a) for t in last_batch]
        a = behaviour_action(params, spec, x, pairs, cfg.eps, policy_rng, cfg.strategy)
        run.actions.append(a)
        s2, r, done = env_step(env, s, a)
        buf.add(Transition(x, a, r, env.features(s2), done, (s2.x, s2.y) == env.goal))
        s = env.reset() if done else s2
        if len(buf) >= max(cfg.batch_size, cfg.learning_starts):
            last_batch = buf.sample(cfg.batch_size)
            params = dqn_update(params, spec, last_batch, cfg.gamma, cfg.eta)
        if step % cfg.eval_every == 0:
            run.curve.append((step, *evaluate(params, spec, env, cfg.eval_episodes, eval_rng)))
    run.params = params
    return run


def write_curve_csv(path, curve) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "eval_mean", "eval_std"])
        for step, mean, std in curve:
            w.writerow([step, repr(mean), repr(std)])
