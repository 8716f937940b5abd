"""Exact cooperative-game computations over small agent sets.

A game is a characteristic function ``v: 2^N -> R>=0`` stored as a dense
array indexed by coalition bitmask (bit ``i`` set iff agent ``i`` is in the
coalition).  Everything here is exact combinatorics: unanimity games, the
dividend (Mobius) decomposition and its inverse, Shapley and Banzhaf values,
the payoff axiom checkers used as test oracles, and superadditivity
machinery.  All functions are pure and safe to call concurrently.

Tolerances live in two named constants: TOL_EXACT for identities that are
exact up to float rounding, TOL_ALGO for agreement between independent
computations of the same quantity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Callable, Iterator

import numpy as np

TOL_EXACT = 1e-12
TOL_ALGO = 1e-9

MAX_BITMASK_AGENTS = 24   # CoalitionId width cap
MAX_VALUE_AGENTS = 12     # shapley/banzhaf subset-enumeration budget
MAX_COVER_AGENTS = 10     # superadditive-cover budget
MAX_PERMUTATION_AGENTS = 8

# Test hook: cmd_verify's fault-injection path scales shapley_exact output
# by this factor so the efficiency oracle can be seen to fail.
_SHAPLEY_FAULT_SCALE = 1.0


class BudgetError(Exception):
    """Raised when an exact computation would exceed its agent-count budget."""


def grand_coalition(n_agents: int) -> int:
    return (1 << n_agents) - 1


def coalition_size(mask: int) -> int:
    return int(mask).bit_count()


def coalitions(n_agents: int, include_empty: bool = False) -> Iterator[int]:
    """All coalition bitmasks in ascending bitmask order."""
    return iter(range(0 if include_empty else 1, 1 << n_agents))


def _check_n_agents(n_agents: int) -> None:
    if not 1 <= n_agents <= MAX_BITMASK_AGENTS:
        raise ValueError(f"n_agents must be in [1, {MAX_BITMASK_AGENTS}], got {n_agents}")


def _check_coalition(mask: int, n_agents: int) -> None:
    if not 0 <= mask < (1 << n_agents):
        raise ValueError(f"coalition bitmask {mask} out of range for {n_agents} agents")


def _popcounts(n_agents: int) -> np.ndarray:
    return np.array([m.bit_count() for m in range(1 << n_agents)], dtype=np.int64)


@dataclass(frozen=True)
class CharacteristicGame:
    """A nonnegative characteristic function over ``n_agents`` agents.

    ``values[mask]`` is the worth of the coalition with that bitmask;
    ``values[0]`` (the empty coalition) is always 0.
    """

    n_agents: int
    values: np.ndarray

    def __post_init__(self):
        _check_n_agents(self.n_agents)
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != ((1 << self.n_agents),):
            raise ValueError(
                f"values must have length 2^{self.n_agents}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("game values must be finite")
        if abs(values[0]) > TOL_EXACT:
            raise ValueError(f"empty coalition must have value 0, got {values[0]}")
        if np.any(values < -TOL_ALGO):
            raise ValueError("game values must be nonnegative")
        object.__setattr__(self, "values", values)

    @property
    def grand_value(self) -> float:
        return float(self.values[-1])

    def value(self, mask: int) -> float:
        _check_coalition(mask, self.n_agents)
        return float(self.values[mask])


@dataclass(frozen=True)
class BasisCoefficients:
    """Coordinates of a game in the unanimity basis (one per non-empty coalition).

    ``k[mask - 1]`` is the dividend of the coalition with bitmask ``mask``.
    """

    n_agents: int
    k: np.ndarray

    def __post_init__(self):
        _check_n_agents(self.n_agents)
        k = np.asarray(self.k, dtype=np.float64)
        if k.shape != ((1 << self.n_agents) - 1,):
            raise ValueError(
                f"k must have length 2^{self.n_agents}-1, got shape {k.shape}"
            )
        if not np.all(np.isfinite(k)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "k", k)

    def coefficient(self, mask: int) -> float:
        _check_coalition(mask, self.n_agents)
        if mask == 0:
            raise ValueError("the empty coalition has no basis coefficient")
        return float(self.k[mask - 1])


@dataclass
class StateGameFamily:
    """A family of games over one shared agent set, keyed by state identifier."""

    n_agents: int
    games: dict = field(default_factory=dict)

    def add(self, state_id, game: CharacteristicGame) -> None:
        if game.n_agents != self.n_agents:
            raise ValueError(
                f"game has {game.n_agents} agents, family expects {self.n_agents}"
            )
        self.games[state_id] = game

    def get(self, state_id) -> CharacteristicGame:
        return self.games[state_id]

    def __len__(self) -> int:
        return len(self.games)

    def __contains__(self, state_id) -> bool:
        return state_id in self.games


def unanimity_game(members: int, z: float, n_agents: int) -> CharacteristicGame:
    """The game worth ``z`` on every coalition containing ``members`` and 0 elsewhere."""
    _check_n_agents(n_agents)
    _check_coalition(members, n_agents)
    if members == 0:
        raise ValueError("unanimity game requires a non-empty carrier coalition")
    if z < 0:
        raise ValueError(f"z must be nonnegative, got {z}")
    masks = np.arange(1 << n_agents)
    values = np.where((masks & members) == members, float(z), 0.0)
    return CharacteristicGame(n_agents, values)


def additive_game(weights) -> CharacteristicGame:
    """The game v(C) = sum of per-agent weights over C."""
    weights = np.asarray(weights, dtype=np.float64)
    n = len(weights)
    _check_n_agents(n)
    if np.any(weights < 0):
        raise ValueError("additive game weights must be nonnegative")
    masks = np.arange(1 << n)
    values = np.zeros(1 << n)
    for i in range(n):
        values[(masks >> i) & 1 == 1] += weights[i]
    return CharacteristicGame(n, values)


def random_game(rng: np.random.Generator, n_agents: int, scale: float = 1.0) -> CharacteristicGame:
    """A game with iid-uniform nonnegative coalition values (empty coalition 0)."""
    values = rng.uniform(0.0, scale, size=1 << n_agents)
    values[0] = 0.0
    return CharacteristicGame(n_agents, values)


def random_nonneg_coefficients(
    rng: np.random.Generator, n_agents: int, scale: float = 1.0
) -> BasisCoefficients:
    return BasisCoefficients(n_agents, rng.uniform(0.0, scale, size=(1 << n_agents) - 1))


def mobius_coefficients(v: CharacteristicGame) -> BasisCoefficients:
    """Dividends k_C = sum over T subset of C of (-1)^{|C|-|T|} v(T).

    Computed by the in-place subset-sum inversion, one bit at a time.
    """
    n = v.n_agents
    k = v.values.copy()
    masks = np.arange(1 << n)
    for i in range(n):
        has_bit = (masks >> i) & 1 == 1
        k[has_bit] -= k[masks[has_bit] ^ (1 << i)]
    return BasisCoefficients(n, k[1:])


def reconstruct_game(k: BasisCoefficients) -> CharacteristicGame:
    """Inverse of mobius_coefficients: v(D) = sum of k_C over non-empty C subset of D."""
    n = k.n_agents
    values = np.concatenate([[0.0], k.k])
    masks = np.arange(1 << n)
    for i in range(n):
        has_bit = (masks >> i) & 1 == 1
        values[has_bit] += values[masks[has_bit] ^ (1 << i)]
    return CharacteristicGame(n, values)


def lemma1_rescale(v: CharacteristicGame) -> BasisCoefficients:
    """Dividends rescaled by the grand-coalition value.

    Reconstructing with unanimity games scaled by z = v(N) reproduces v.
    """
    vn = v.grand_value
    if vn == 0.0:
        raise ZeroDivisionError("grand coalition has value 0; rescaled basis undefined")
    k = mobius_coefficients(v)
    return BasisCoefficients(v.n_agents, k.k / vn)


def shapley_exact(v: CharacteristicGame) -> np.ndarray:
    """The Shapley value, cross-checked between two independent computations.

    Path (a) is the subset-weighted marginal sum
    ``phi_i = sum_S |S|!(n-|S|-1)!/n! (v(S+i) - v(S))``; path (b) spreads each
    dividend equally over its coalition, ``phi_i = sum_{C owns i} k_C / |C|``.
    The two must agree to TOL_ALGO.
    """
    n = v.n_agents
    if n > MAX_VALUE_AGENTS:
        raise BudgetError(f"shapley_exact limited to {MAX_VALUE_AGENTS} agents, got {n}")
    values = v.values
    sizes = _popcounts(n)
    fact = [math.factorial(s) for s in range(n + 1)]
    weight_by_size = np.array(
        [fact[s] * fact[n - s - 1] / fact[n] for s in range(n)], dtype=np.float64
    )

    phi = np.zeros(n)
    masks = np.arange(1 << n)
    for i in range(n):
        without_i = masks[(masks >> i) & 1 == 0]
        marginals = values[without_i | (1 << i)] - values[without_i]
        phi[i] = float(np.dot(weight_by_size[sizes[without_i]], marginals))

    k = np.concatenate([[0.0], mobius_coefficients(v).k])
    phi_dividends = np.zeros(n)
    spread = k / np.maximum(sizes, 1)
    for i in range(n):
        owns_i = masks[(masks >> i) & 1 == 1]
        phi_dividends[i] = float(spread[owns_i].sum())

    if np.max(np.abs(phi - phi_dividends)) > TOL_ALGO:
        raise ArithmeticError("shapley computation paths disagree beyond tolerance")
    return phi * _SHAPLEY_FAULT_SCALE


def shapley_permutation(v: CharacteristicGame) -> np.ndarray:
    """Brute-force Shapley value: average marginal contribution over all orderings.

    Independent oracle for shapley_exact; budgeted to small n.
    """
    n = v.n_agents
    if n > MAX_PERMUTATION_AGENTS:
        raise BudgetError(
            f"shapley_permutation limited to {MAX_PERMUTATION_AGENTS} agents, got {n}"
        )
    perms = np.array(list(permutations(range(n))), dtype=np.int64)
    prefixes = np.zeros((len(perms), n + 1), dtype=np.int64)
    for pos in range(n):
        prefixes[:, pos + 1] = prefixes[:, pos] | (1 << perms[:, pos])
    phi = np.zeros(n)
    values = v.values
    for pos in range(n):
        marginals = values[prefixes[:, pos + 1]] - values[prefixes[:, pos]]
        np.add.at(phi, perms[:, pos], marginals)
    return phi / len(perms)


def banzhaf_exact(v: CharacteristicGame) -> np.ndarray:
    """Banzhaf index: mean marginal contribution over all coalitions excluding the agent."""
    n = v.n_agents
    if n > MAX_VALUE_AGENTS:
        raise BudgetError(f"banzhaf_exact limited to {MAX_VALUE_AGENTS} agents, got {n}")
    values = v.values
    masks = np.arange(1 << n)
    phi = np.zeros(n)
    for i in range(n):
        without_i = masks[(masks >> i) & 1 == 0]
        phi[i] = float(np.mean(values[without_i | (1 << i)] - values[without_i]))
    return phi


def check_efficiency(v: CharacteristicGame, phi: np.ndarray, tol: float = TOL_ALGO) -> bool:
    """True iff the payoffs sum to the grand-coalition value."""
    return abs(float(np.sum(phi)) - v.grand_value) < tol


def check_symmetry(v: CharacteristicGame, phi: np.ndarray, tol: float = TOL_ALGO) -> bool:
    """True iff every pair of interchangeable agents receives equal payoff.

    Agents i and j are interchangeable when v(S+i) = v(S+j) for every S
    avoiding both; all pairs and all such S are enumerated.
    """
    n = v.n_agents
    values = v.values
    masks = np.arange(1 << n)
    for i in range(n):
        for j in range(i + 1, n):
            avoid_both = masks[((masks >> i) & 1 == 0) & ((masks >> j) & 1 == 0)]
            with_i = values[avoid_both | (1 << i)]
            with_j = values[avoid_both | (1 << j)]
            if np.max(np.abs(with_i - with_j)) <= TOL_EXACT:
                if abs(phi[i] - phi[j]) >= tol:
                    return False
    return True


def check_linearity(
    payoff_fn: Callable[[CharacteristicGame], np.ndarray],
    rng: np.random.Generator,
    n_agents: int = 4,
    trials: int = 50,
    tol: float = 1e-8,
) -> bool:
    """True iff payoff_fn(a*v + b*w) = a*payoff_fn(v) + b*payoff_fn(w) on random pairs.

    Scalars are drawn positive so combinations stay in the nonnegative-game domain.
    """
    for _ in range(trials):
        v = random_game(rng, n_agents)
        w = random_game(rng, n_agents)
        a, b = rng.uniform(0.1, 2.0, size=2)
        combined = CharacteristicGame(n_agents, a * v.values + b * w.values)
        lhs = payoff_fn(combined)
        rhs = a * payoff_fn(v) + b * payoff_fn(w)
        if np.max(np.abs(lhs - rhs)) >= tol:
            return False
    return True


def is_superadditive(v: CharacteristicGame, tol: float = TOL_ALGO) -> bool:
    """True iff v(C u D) >= v(C) + v(D) for all disjoint non-empty C, D."""
    n = v.n_agents
    values = v.values
    full = grand_coalition(n)
    for c in range(1, full + 1):
        comp = full ^ c
        d = comp
        while d:
            if values[c | d] + tol < values[c] + values[d]:
                return False
            d = (d - 1) & comp
    return True


def superadditive_cover(v: CharacteristicGame) -> CharacteristicGame:
    """Pointwise-smallest superadditive game dominating v.

    v*(C) is the best total worth over all partitions of C, computed by the
    subset DP v*(C) = max(v(C), max_S v*(S) + v*(C\\S)).
    """
    n = v.n_agents
    if n > MAX_COVER_AGENTS:
        raise BudgetError(f"superadditive_cover limited to {MAX_COVER_AGENTS} agents, got {n}")
    vstar = v.values.copy()
    for mask in range(1, 1 << n):
        s = (mask - 1) & mask
        best = vstar[mask]
        while s:
            rest = mask ^ s
            if rest:
                cand = vstar[s] + vstar[rest]
                if cand > best:
                    best = cand
            s = (s - 1) & mask
        vstar[mask] = best
    return CharacteristicGame(n, vstar)


def search_negative_dividend(
    rng: np.random.Generator, n_agents: int = 3, trials: int = 200
) -> tuple[CharacteristicGame, int, float] | None:
    """Random search for a superadditive game with a negative dividend.

    Samples random games, takes their superadditive cover, and inspects the
    dividends.  Returns (game, coalition bitmask, dividend) for the first hit,
    or None if the budget is exhausted.  Desk-check experiment only; callers
    report the outcome rather than asserting it.
    """
    for _ in range(trials):
        g = superadditive_cover(random_game(rng, n_agents))
        k = mobius_coefficients(g)
        worst = int(np.argmin(k.k))
        if k.k[worst] < -TOL_ALGO:
            return g, worst + 1, float(k.k[worst])
    return None


def save_game(v: CharacteristicGame, path) -> None:
    """Write a game as `n_agents=<k>` then one `bitmask value` line per non-empty coalition.

    Values are printed with 17 significant digits so the writer round-trips
    float64 bit-exactly.
    """
    lines = [f"n_agents={v.n_agents}"]
    for mask in coalitions(v.n_agents):
        lines.append(f"{mask} {v.values[mask]:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_game(path) -> CharacteristicGame:
    """Read a game written by save_game; validates header, order, and completeness."""
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines or not lines[0].startswith("n_agents="):
        raise ValueError(f"{path}: missing n_agents header")
    n = int(lines[0].split("=", 1)[1])
    _check_n_agents(n)
    expected = (1 << n) - 1
    if len(lines) - 1 != expected:
        raise ValueError(f"{path}: expected {expected} coalition lines, got {len(lines) - 1}")
    values = np.zeros(1 << n)
    for idx, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}: malformed line {idx + 1!r}: {line!r}")
        mask = int(parts[0])
        if mask != idx:
            raise ValueError(f"{path}: line {idx + 1} has bitmask {mask}, expected {idx}")
        values[mask] = float(parts[1])
    return CharacteristicGame(n, values)
