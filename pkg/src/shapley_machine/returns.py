"""Return targets: n-step returns, truncated lambda-returns, GAE, and the
coalition-to-horizon correspondence.

All computations run on immutable per-episode Trajectory records.  The
truncation horizon ``m`` counts n-step components; when an episode ends
before ``t + m`` the tail weight moves onto the last available component, so
the weights always form a distribution.  ``agent`` arguments accept an agent
row index or the string ``"team"`` to use the team-level value column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class ReturnConfig:
    gamma: float
    td_lambda: float
    m: int

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 < self.td_lambda < 1.0:
            raise ValueError(f"td_lambda must be in (0, 1), got {self.td_lambda}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")


@dataclass
class Trajectory:
    """One episode: team rewards, per-agent value estimates, done flags.

    ``values`` has T+1 columns; the last column is the bootstrap estimate of
    the post-episode state (zero when the episode terminated).
    ``per_agent_rewards`` holds shaped rewards when a variant uses them.
    ``team_values``, when present, must equal the per-agent column sums.
    """

    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    per_agent_rewards: np.ndarray | None = None
    team_values: np.ndarray | None = None

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        t = self.rewards.shape[0]
        if t < 1 or self.rewards.ndim != 1:
            raise ValueError("rewards must be a non-empty 1-D array")
        if self.values.ndim != 2 or self.values.shape[1] != t + 1:
            raise ValueError(
                f"values must be (n_agents, T+1) = (*, {t + 1}), got {self.values.shape}"
            )
        if self.dones.shape != (t,):
            raise ValueError("dones must have one flag per step")
        if self.per_agent_rewards is not None:
            self.per_agent_rewards = np.asarray(self.per_agent_rewards, dtype=np.float64)
            if self.per_agent_rewards.shape != (self.values.shape[0], t):
                raise ValueError("per_agent_rewards must be (n_agents, T)")
        if self.team_values is not None:
            self.team_values = np.asarray(self.team_values, dtype=np.float64)
            if self.team_values.shape != (t + 1,):
                raise ValueError("team_values must have T+1 entries")
            if np.max(np.abs(self.team_values - self.values.sum(axis=0))) > 1e-9:
                raise ValueError("team_values must equal per-agent value column sums")

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_agents(self) -> int:
        return self.values.shape[0]


def _reward_row(traj: Trajectory, agent, source: str) -> np.ndarray:
    if source == "team":
        return traj.rewards
    if source == "per_agent":
        if traj.per_agent_rewards is None:
            raise ValueError("trajectory has no per-agent rewards")
        return traj.per_agent_rewards[agent]
    raise ValueError(f"unknown reward source {source!r}")


def _value_row(traj: Trajectory, agent) -> np.ndarray:
    if agent == "team":
        if traj.team_values is None:
            raise ValueError("trajectory has no team values")
        return traj.team_values
    return traj.values[agent]


def nstep_return(
    traj: Trajectory, agent, t: int, n: int, cfg: ReturnConfig, reward_source: str = "team"
) -> float:
    """Discounted n-step return with a bootstrapped tail value.

    The horizon clamps at the episode end: rewards past T contribute nothing
    and the bootstrap uses the final value column (zero on termination).
    """
    T = traj.length
    if not 0 <= t < T:
        raise ValueError(f"t must be in [0, {T}), got {t}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rewards = _reward_row(traj, agent, reward_source)
    values = _value_row(traj, agent)
    n_eff = min(n, T - t)
    total = 0.0
    discount = 1.0
    for tau in range(n_eff):
        total += discount * rewards[t + tau]
        discount *= cfg.gamma
    return total + discount * values[t + n_eff]


def ttd_weights(td_lambda: float, m: int) -> np.ndarray:
    """Weights over the first m n-step returns: (1-l)l^{n-1} with tail mass l^{m-1} last.

    Sums to 1 exactly in exact arithmetic (telescoping).
    """
    if not 0.0 < td_lambda < 1.0:
        raise ValueError(f"td_lambda must be in (0, 1), got {td_lambda}")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    powers = td_lambda ** np.arange(m, dtype=np.float64)
    weights = (1.0 - td_lambda) * powers
    weights[m - 1] = powers[m - 1]
    return weights


def ttd_target(
    traj: Trajectory, agent, t: int, cfg: ReturnConfig, reward_source: str = "team"
) -> float:
    """Truncated lambda-return: weighted mixture of the first m n-step returns."""
    m_eff = min(cfg.m, traj.length - t)
    weights = ttd_weights(cfg.td_lambda, m_eff)
    return float(
        sum(
            w * nstep_return(traj, agent, t, n, cfg, reward_source)
            for n, w in enumerate(weights, start=1)
        )
    )


def lambda_return_finite(
    traj: Trajectory, agent, t: int, cfg: ReturnConfig, reward_source: str = "team"
) -> float:
    """Finite-horizon lambda-return; identical to the truncated target with m = T - t."""
    full = ReturnConfig(cfg.gamma, cfg.td_lambda, max(traj.length - t, 1))
    return ttd_target(traj, agent, t, full, reward_source)


def ttd_target_array(
    traj: Trajectory, agent, cfg: ReturnConfig, reward_source: str = "team"
) -> np.ndarray:
    """Truncated lambda-return targets for every t at once.

    Vectorized over t; must agree with per-step ttd_target (tested).
    """
    T = traj.length
    rewards = _reward_row(traj, agent, reward_source)
    values = _value_row(traj, agent)
    gamma, lam, m = cfg.gamma, cfg.td_lambda, min(cfg.m, T)

    targets = np.zeros(T)
    # running discounted reward sums: rew_sum[t] = sum_{tau<n} gamma^tau R_{t+tau}
    rew_sum = np.zeros(T)
    for n in range(1, m + 1):
        ts = np.arange(0, T - n + 1)
        rew_sum[ts] += gamma ** (n - 1) * rewards[ts + n - 1]
        g_n = rew_sum[ts] + gamma**n * values[ts + n]
        w = np.full(ts.shape, (1.0 - lam) * lam ** (n - 1))
        if n < m:
            w[-1] = lam ** (n - 1)  # episode-end truncation absorbs the tail
        else:
            w[:] = lam ** (n - 1)
        targets[ts] += w * g_n
    return targets


def gae(
    traj: Trajectory, agent, cfg: ReturnConfig, reward_source: str = "team"
) -> np.ndarray:
    """Generalized advantage estimates via the backward linear recursion."""
    rewards = _reward_row(traj, agent, reward_source)
    values = _value_row(traj, agent)
    T = traj.length
    deltas = rewards + cfg.gamma * values[1:] - values[:-1]
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = deltas[t] + cfg.gamma * cfg.td_lambda * acc
        adv[t] = acc
    return adv


@dataclass(frozen=True)
class CoalitionReturnMap:
    """Non-empty coalitions in ascending size order, each with its return horizon
    n(i) and the count q(i) of coalitions sharing its size."""

    n_agents: int
    masks: np.ndarray
    horizons: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.masks)


def coalition_return_map(n_agents: int, m: int | None = None) -> CoalitionReturnMap:
    """Map coalitions (ascending by size) to n-step horizons.

    All coalitions of one size share the horizon equal to that size; q(i) is
    the binomial count of same-size coalitions.  ``m`` optionally truncates
    the list to its first m entries.
    """
    if n_agents < 1:
        raise ValueError(f"n_agents must be >= 1, got {n_agents}")
    masks = sorted(range(1, 1 << n_agents), key=lambda mk: (mk.bit_count(), mk))
    if m is not None:
        masks = masks[: max(m, 1)]
    sizes = np.array([mk.bit_count() for mk in masks], dtype=np.int64)
    counts = np.array([math.comb(n_agents, int(s)) for s in sizes], dtype=np.int64)
    return CoalitionReturnMap(
        n_agents, np.array(masks, dtype=np.int64), sizes, counts
    )


def coalition_value_from_nstep(
    traj: Trajectory, cmap: CoalitionReturnMap, i: int, t: int, cfg: ReturnConfig
) -> float:
    """Basis-game value realized from team returns: (1/q(i)) * G_{t:t+n(i)}.

    Test-only realization of the coalition/return correspondence; the
    training path never calls this.
    """
    if not 0 <= i < len(cmap):
        raise ValueError(f"coalition index {i} out of range")
    n = int(cmap.horizons[i])
    return nstep_return(traj, "team", t, n, cfg) / float(cmap.counts[i])
