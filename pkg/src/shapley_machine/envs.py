"""Toy common-reward Dec-POMDPs.

GridPursuitEnv: n pursuers chase one scripted evader on a square grid with
two static obstacles.  Pursuers move first (walls and obstacles block, cells
may be shared), then the evader flees by maximizing its minimum Euclidean
distance to the pursuers it can see; when a pursuer is Chebyshev-adjacent
the evader takes two flee moves instead of one (the grid analog of a faster
prey, which is what makes lone chasers futile and simultaneous two-sided
capture necessary).  The team earns +1, and the episode ends, when at least
two pursuers stand on or orthogonally adjacent to the evader's cell after
everyone has moved; otherwise the episode ends at the step limit with no
reward.  Observations are egocentric feature vectors with entities masked to
zero beyond a Chebyshev visibility radius.

DiagnosticEnv: a one-step matrix game paying 1 iff every agent picks action
0; it exists to smoke-test the full training stack in seconds.

Each environment instance is single-threaded and owns one rng stream;
run several instances for parallel rollouts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

STAY, UP, DOWN, LEFT, RIGHT = range(5)
N_ACTIONS = 5
# (dx, dy) with x = column and y = row; UP decreases y
MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))
ACTION_NAMES = ("stay", "up", "down", "left", "right")


@dataclass
class EnvState:
    grid_size: int
    pursuer_positions: list
    evader_position: tuple
    obstacle_positions: tuple
    step_count: int

    def copy(self) -> "EnvState":
        return EnvState(
            self.grid_size,
            [tuple(p) for p in self.pursuer_positions],
            tuple(self.evader_position),
            tuple(tuple(o) for o in self.obstacle_positions),
            self.step_count,
        )


def chebyshev(a, b) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def default_obstacles(grid_size: int) -> tuple:
    return ((grid_size // 3, grid_size // 2), (2 * grid_size // 3, grid_size // 2))


def move_result(pos, action: int, grid_size: int, obstacles) -> tuple:
    """Position after applying an action; walls and obstacles block (no-op)."""
    dx, dy = MOVES[action]
    nxt = (pos[0] + dx, pos[1] + dy)
    if not (0 <= nxt[0] < grid_size and 0 <= nxt[1] < grid_size):
        return tuple(pos)
    if nxt in obstacles:
        return tuple(pos)
    return nxt


def evader_policy(state: EnvState, rng: np.random.Generator, radius: int) -> int:
    """Maximin flee move: maximize the minimum Euclidean distance to visible
    pursuers; ties (including the no-pursuer-visible case) break uniformly."""
    visible = [
        p for p in state.pursuer_positions
        if chebyshev(p, state.evader_position) <= radius
    ]
    candidates = []
    best = -1.0
    for action in range(N_ACTIONS):
        nxt = move_result(state.evader_position, action, state.grid_size, state.obstacle_positions)
        if action != STAY and nxt == tuple(state.evader_position):
            continue  # blocked move; staying is already a candidate
        score = min(
            (float(np.hypot(p[0] - nxt[0], p[1] - nxt[1])) for p in visible),
            default=0.0,
        )
        if score > best + 1e-12:
            best = score
            candidates = [action]
        elif score >= best - 1e-12:
            candidates.append(action)
    return int(candidates[rng.integers(len(candidates))])


class GridPursuitEnv:
    """Grid predator-prey with a shared scalar reward and masked observations."""

    name = "pursuit"

    # the evader sprints (two flee moves) whenever a pursuer is this close
    sprint_threat_distance = 1

    def __init__(self, n_agents: int = 3, grid_size: int = 7, episode_limit: int = 100,
                 visibility_radius: int = 3, evader_radius: int | None = None):
        if not 2 <= n_agents <= 5:
            raise ValueError(f"n_agents must be in [2, 5], got {n_agents}")
        if grid_size < 4:
            raise ValueError("grid too small for pursuers, evader, and obstacles")
        self.n_agents = n_agents
        self.grid_size = grid_size
        self.episode_limit = episode_limit
        self.visibility_radius = visibility_radius
        # the adversarial evader sees the whole grid unless configured tighter
        self.evader_radius = 2 * grid_size if evader_radius is None else evader_radius
        self.n_actions = N_ACTIONS
        # own xy + per-teammate (dx, dy, visible) + evader + two obstacles
        self.obs_dim = 2 + 3 * (n_agents - 1) + 3 + 6
        self.state: EnvState | None = None
        self.done = True
        self._rng: np.random.Generator | None = None

    def reset(self, seed: int):
        self._rng = np.random.default_rng(seed)
        obstacles = default_obstacles(self.grid_size)
        free = [
            (x, y)
            for x in range(self.grid_size)
            for y in range(self.grid_size)
            if (x, y) not in obstacles
        ]
        picks = self._rng.choice(len(free), size=self.n_agents + 1, replace=False)
        cells = [free[int(i)] for i in picks]
        self.state = EnvState(
            grid_size=self.grid_size,
            pursuer_positions=cells[: self.n_agents],
            evader_position=cells[self.n_agents],
            obstacle_positions=obstacles,
            step_count=0,
        )
        self.done = False
        return self.observations()

    def step(self, actions):
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        actions = list(actions)
        if len(actions) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(actions)}")
        if any(not 0 <= a < N_ACTIONS for a in actions):
            raise ValueError(f"illegal action in {actions}")
        st = self.state
        st.pursuer_positions = [
            move_result(p, a, st.grid_size, st.obstacle_positions)
            for p, a in zip(st.pursuer_positions, actions)
        ]
        threat = min(chebyshev(p, st.evader_position) for p in st.pursuer_positions)
        flee_moves = 2 if threat <= self.sprint_threat_distance else 1
        for _ in range(flee_moves):
            ev_action = evader_policy(st, self._rng, self.evader_radius)
            st.evader_position = move_result(
                st.evader_position, ev_action, st.grid_size, st.obstacle_positions
            )
        st.step_count += 1
        adjacent = sum(
            1
            for p in st.pursuer_positions
            if p == st.evader_position
            or abs(p[0] - st.evader_position[0]) + abs(p[1] - st.evader_position[1]) == 1
        )
        reward = 1.0 if adjacent >= 2 else 0.0
        self.done = reward > 0.0 or st.step_count >= self.episode_limit
        return self.observations(), reward, self.done

    def _entity_features(self, own, entity, radius) -> list:
        dx = entity[0] - own[0]
        dy = entity[1] - own[1]
        if max(abs(dx), abs(dy)) > radius:
            return [0.0, 0.0, 0.0]
        scale = self.grid_size - 1
        return [dx / scale, dy / scale, 1.0]

    def observation(self, slot: int) -> np.ndarray:
        st = self.state
        own = st.pursuer_positions[slot]
        scale = self.grid_size - 1
        feats = [2.0 * own[0] / scale - 1.0, 2.0 * own[1] / scale - 1.0]
        r = self.visibility_radius
        for j in range(self.n_agents):
            if j == slot:
                continue
            feats += self._entity_features(own, st.pursuer_positions[j], r)
        feats += self._entity_features(own, st.evader_position, r)
        for obstacle in st.obstacle_positions:
            feats += self._entity_features(own, obstacle, r)
        return np.array(feats, dtype=np.float64)

    def observations(self):
        return [self.observation(i) for i in range(self.n_agents)]

    def policy_view(self, slot: int, full_state: bool = False) -> dict:
        """Decoded view for scripted policies: own cell, static layout, and the
        visible (or, with full_state, all) entity offsets."""
        st = self.state
        own = st.pursuer_positions[slot]
        radius = self.grid_size * 2 if full_state else self.visibility_radius
        evader = None
        if chebyshev(own, st.evader_position) <= radius:
            evader = (st.evader_position[0] - own[0], st.evader_position[1] - own[1])
        teammates = [
            (p[0] - own[0], p[1] - own[1])
            for j, p in enumerate(st.pursuer_positions)
            if j != slot and chebyshev(own, p) <= radius
        ]
        return {
            "kind": "pursuit",
            "own": own,
            "grid_size": st.grid_size,
            "obstacles": st.obstacle_positions,
            "evader": evader,
            "teammates": teammates,
        }


class DiagnosticEnv:
    """One-step coordination game: reward 1 iff every agent plays action 0."""

    name = "diagnostic"
    cooperative_action = 0

    def __init__(self, n_agents: int = 2, episode_limit: int = 1, grid_size: int = 0,
                 visibility_radius: int = 0):
        if not 2 <= n_agents <= 5:
            raise ValueError(f"n_agents must be in [2, 5], got {n_agents}")
        self.n_agents = n_agents
        self.episode_limit = 1
        self.n_actions = N_ACTIONS
        self.obs_dim = 1
        self.done = True
        self.state = None

    def reset(self, seed: int):
        self.done = False
        self.state = EnvState(0, [], (0, 0), (), 0)
        return self.observations()

    def observations(self):
        return [np.ones(1) for _ in range(self.n_agents)]

    def step(self, actions):
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        actions = list(actions)
        if len(actions) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(actions)}")
        reward = 1.0 if all(a == self.cooperative_action for a in actions) else 0.0
        self.state.step_count = 1
        self.done = True
        return self.observations(), reward, True

    def policy_view(self, slot: int, full_state: bool = False) -> dict:
        return {"kind": "diagnostic"}


def make_env(name: str, **kwargs):
    if name == "pursuit":
        return GridPursuitEnv(**kwargs)
    if name == "diagnostic":
        return DiagnosticEnv(**kwargs)
    raise ValueError(f"unknown environment {name!r}")


# ---------------------------------------------------------------------------
# replay logs: one JSON line per step, consumed by the CLI renderer

def replay_line(state: EnvState, actions, reward: float, done: bool) -> str:
    return json.dumps(
        {
            "t": state.step_count,
            "grid": state.grid_size,
            "pursuers": [list(p) for p in state.pursuer_positions],
            "evader": list(state.evader_position),
            "obstacles": [list(o) for o in state.obstacle_positions],
            "actions": [int(a) for a in actions],
            "reward": reward,
            "done": bool(done),
        },
        separators=(",", ":"),
    )


def parse_replay_line(line: str) -> dict:
    rec = json.loads(line)
    for key in ("t", "grid", "pursuers", "evader", "actions", "reward", "done"):
        if key not in rec:
            raise ValueError(f"replay line missing field {key!r}")
    return rec


def render_replay_record(rec: dict) -> str:
    grid = rec["grid"]
    if grid <= 0:
        acts = ",".join(str(a) for a in rec["actions"])
        return f"t={rec['t']} actions=[{acts}] reward={rec['reward']}"
    rows = [["." for _ in range(grid)] for _ in range(grid)]
    for x, y in rec.get("obstacles", []):
        rows[y][x] = "#"
    for i, (x, y) in enumerate(rec["pursuers"]):
        rows[y][x] = str(i)
    ex, ey = rec["evader"]
    rows[ey][ex] = "E" if rows[ey][ex] == "." else "*"
    lines = ["".join(r) for r in rows]
    lines.append(f"t={rec['t']} reward={rec['reward']} done={rec['done']}")
    return "\n".join(lines)
