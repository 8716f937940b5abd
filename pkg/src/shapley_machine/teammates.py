"""Scripted uncontrolled-agent pool and the per-episode team sampling protocol.

Every episode draws the number of uncontrolled slots uniformly from
{1, ..., n_total - 1}, picks one policy group uniformly from the pool for all
of them, and assigns slots without replacement; compositions stay fixed for
the whole episode.  Policies are pure functions of (decoded observation, rng)
so concurrent rollout workers can share them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import N_ACTIONS, STAY, move_result

POLICY_KINDS = ("greedy_chase", "flanker", "random", "lazy", "noisy_greedy")


@dataclass(frozen=True)
class UncontrolledPolicy:
    id: str
    kind: str
    noise: float = 0.2

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")


def build_pool(kinds, noise: float = 0.2) -> list:
    pool = [UncontrolledPolicy(f"{kind}#{i}", kind, noise) for i, kind in enumerate(kinds)]
    if not pool:
        raise ValueError("uncontrolled pool must not be empty")
    return pool


@dataclass
class TeamComposition:
    n_total: int
    controlled_slots: list
    uncontrolled_assignments: dict = field(default_factory=dict)

    def __post_init__(self):
        slots = sorted(list(self.controlled_slots) + list(self.uncontrolled_assignments))
        if slots != list(range(self.n_total)):
            raise ValueError("controlled and uncontrolled slots must partition the team")
        if not self.controlled_slots:
            raise ValueError("at least one slot must be controlled")
        if not self.uncontrolled_assignments:
            raise ValueError("at least one slot must be uncontrolled")

    @property
    def n_controlled(self) -> int:
        return len(self.controlled_slots)

    def is_controlled(self, slot: int) -> bool:
        return slot in self.controlled_slots


def sample_team(rng: np.random.Generator, n_total: int, pool) -> TeamComposition:
    """Draw a composition: uniform uncontrolled count, one pool group for all
    uncontrolled slots, slot indices without replacement."""
    if not pool:
        raise ValueError("uncontrolled pool must not be empty")
    if n_total < 2:
        raise ValueError(f"team size must be >= 2, got {n_total}")
    n_uncontrolled = int(rng.integers(1, n_total))
    group = pool[int(rng.integers(len(pool)))]
    order = rng.permutation(n_total)
    uncontrolled = sorted(int(s) for s in order[:n_uncontrolled])
    controlled = sorted(int(s) for s in order[n_uncontrolled:])
    return TeamComposition(
        n_total, controlled, {slot: group.id for slot in uncontrolled}
    )


def _toward(view: dict, target_delta, rng: np.random.Generator) -> int:
    """Move minimizing the Chebyshev distance to a relative target cell,
    accounting for walls and obstacles; ties break uniformly."""
    own = view["own"]
    best_actions = []
    best = None
    for action in range(N_ACTIONS):
        nxt = move_result(own, action, view["grid_size"], view["obstacles"])
        ndx = target_delta[0] - (nxt[0] - own[0])
        ndy = target_delta[1] - (nxt[1] - own[1])
        dist = max(abs(ndx), abs(ndy))
        if best is None or dist < best:
            best = dist
            best_actions = [action]
        elif dist == best:
            best_actions.append(action)
    return int(best_actions[rng.integers(len(best_actions))])


def _act_pursuit(policy: UncontrolledPolicy, view: dict, rng: np.random.Generator) -> int:
    evader = view["evader"]

    def greedy() -> int:
        if evader is None:
            return int(rng.integers(N_ACTIONS))
        return _toward(view, evader, rng)

    if policy.kind == "random":
        return int(rng.integers(N_ACTIONS))
    if policy.kind == "greedy_chase":
        return greedy()
    if policy.kind == "lazy":
        if rng.random() < 0.8:
            return STAY
        return greedy()
    if policy.kind == "noisy_greedy":
        if rng.random() < policy.noise:
            return int(rng.integers(N_ACTIONS))
        return greedy()
    # flanker: aim for the cell mirrored across the evader from the nearest
    # visible teammate, so the pair closes from both sides
    if evader is None:
        return int(rng.integers(N_ACTIONS))
    teammates = view["teammates"]
    if not teammates:
        return greedy()
    nearest = min(teammates, key=lambda d: max(abs(d[0]), abs(d[1])))
    target = (2 * evader[0] - nearest[0], 2 * evader[1] - nearest[1])
    return _toward(view, target, rng)


def act_uncontrolled(policy: UncontrolledPolicy, view: dict, rng: np.random.Generator) -> int:
    """Action for an uncontrolled agent given its decoded (possibly masked) view."""
    if view["kind"] == "pursuit":
        return _act_pursuit(policy, view, rng)
    if view["kind"] == "diagnostic":
        if policy.kind == "random":
            return int(rng.integers(N_ACTIONS))
        if policy.kind == "noisy_greedy" and rng.random() < policy.noise:
            return int(rng.integers(N_ACTIONS))
        return 0
    raise ValueError(f"unknown view kind {view['kind']!r}")
