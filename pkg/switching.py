"""
Switching laws for the jump linear system.

Markov laws are given by a generator, semi-Markov laws by an embedded jump
matrix plus a table of sojourn distributions F_ij that depend on both the
current and the next mode. Sample paths are drawn from a Philox
(counter-based) generator so a seed reproduces the same path everywhere.
"""

import functools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.stats
from scipy.sparse.csgraph import connected_components

import mathkit

logger = logging.getLogger(__name__)

GENERATOR_TOL = 1e-12
UNIFORM_BLOCK = 4096

SOJOURN_FAMILIES = ("exponential", "weibull", "uniform")


class InvalidLawError(ValueError):
    pass


# --- Shared Utils ---

def is_irreducible(jump_matrix: np.ndarray) -> bool:
    """Strong connectivity of the support graph of a transition matrix."""
    support = (np.asarray(jump_matrix) > 0).astype(int)
    n_components, _ = connected_components(support, directed=True, connection='strong')
    return n_components == 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


class _UniformStream:
    """Sequential uniforms on [0, 1) drawn from the generator in blocks."""

    def __init__(self, seed: int):
        self._rng = make_rng(seed)
        self._block = self._rng.random(UNIFORM_BLOCK)
        self._pos = 0

    def next(self) -> float:
        if self._pos == UNIFORM_BLOCK:
            self._block = self._rng.random(UNIFORM_BLOCK)
            self._pos = 0
        u = self._block[self._pos]
        self._pos += 1
        return float(u)


def _pick(cum_row: np.ndarray, u: float) -> int:
    return int(np.searchsorted(cum_row, u, side='right'))


def _cumulative_rows(jump_matrix: np.ndarray) -> np.ndarray:
    cum = np.cumsum(jump_matrix, axis=1)
    return cum / cum[:, -1:]


# --- Sojourn distributions ---

@dataclass(frozen=True)
class SojournDistribution:
    """
    Holding-time law. Parameters by family:
    exponential(rate), weibull(shape, scale), uniform(lo, hi).
    """
    family: str
    params: Tuple[float, ...]

    def __post_init__(self):
        if self.family not in SOJOURN_FAMILIES:
            raise InvalidLawError(f"unknown sojourn family '{self.family}'")
        expected = {'exponential': 1, 'weibull': 2, 'uniform': 2}[self.family]
        if len(self.params) != expected:
            raise InvalidLawError(f"{self.family} takes {expected} parameter(s), got {len(self.params)}")
        if not all(math.isfinite(v) for v in self.params):
            raise InvalidLawError(f"{self.family} parameters must be finite")
        if self.family == 'exponential' and self.params[0] <= 0:
            raise InvalidLawError("exponential rate must be > 0")
        if self.family == 'weibull' and (self.params[0] <= 0 or self.params[1] <= 0):
            raise InvalidLawError("weibull shape and scale must be > 0")
        if self.family == 'uniform' and not (0 <= self.params[0] < self.params[1]):
            raise InvalidLawError("uniform bounds must satisfy 0 <= lo < hi")

    @classmethod
    def exponential(cls, rate: float) -> "SojournDistribution":
        return cls('exponential', (float(rate),))

    @classmethod
    def weibull(cls, shape: float, scale: float) -> "SojournDistribution":
        return cls('weibull', (float(shape), float(scale)))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "SojournDistribution":
        return cls('uniform', (float(lo), float(hi)))

    @functools.cached_property
    def frozen(self):
        if self.family == 'exponential':
            return scipy.stats.expon(scale=1.0 / self.params[0])
        if self.family == 'weibull':
            return scipy.stats.weibull_min(self.params[0], scale=self.params[1])
        lo, hi = self.params
        return scipy.stats.uniform(loc=lo, scale=hi - lo)

    def mean(self) -> float:
        return float(self.frozen.mean())

    def inverse_cdf(self, u: float) -> float:
        if self.family == 'exponential':
            return -math.log1p(-u) / self.params[0]
        if self.family == 'weibull':
            shape, scale = self.params
            return scale * (-math.log1p(-u)) ** (1.0 / shape)
        lo, hi = self.params
        return lo + u * (hi - lo)

    def to_dict(self) -> dict:
        names = {'exponential': ('rate',), 'weibull': ('shape', 'scale'), 'uniform': ('lo', 'hi')}
        out = {'family': self.family}
        out.update(dict(zip(names[self.family], self.params)))
        return out


def sojourn_cdf_mass(dist: SojournDistribution, a: float, b: float) -> float:
    """Probability that the sojourn falls in [a, b]; b may be +inf."""
    if not (0 <= a <= b) or math.isnan(b):
        raise ValueError(f"invalid interval [{a}, {b}]")
    if math.isinf(b):
        return float(dist.frozen.sf(a))
    return float(dist.frozen.cdf(b) - dist.frozen.cdf(a))


# --- Laws ---

@dataclass(frozen=True, eq=False)
class MarkovLaw:
    generator: np.ndarray

    def __post_init__(self):
        G = np.array(self.generator, dtype=float)
        object.__setattr__(self, 'generator', G)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise InvalidLawError(f"generator must be square, got shape {G.shape}")
        M = G.shape[0]
        if M < 2:
            raise InvalidLawError("a generator needs at least two modes (use a fixed law for one mode)")
        if not np.all(np.isfinite(G)):
            raise InvalidLawError("generator entries must be finite")
        off = G - np.diag(np.diag(G))
        if np.any(off < 0):
            i, j = np.argwhere(off < 0)[0]
            raise InvalidLawError(f"generator[{i}][{j}] = {G[i, j]} is a negative rate")
        scale = max(1.0, float(np.max(np.abs(G))))
        for i, s in enumerate(G.sum(axis=1)):
            if abs(s) > GENERATOR_TOL * scale:
                raise InvalidLawError(f"generator row {i} sums to {s:.6g}, expected 0")
        for i in range(M):
            if -G[i, i] <= 0:
                raise InvalidLawError(f"mode {i} is absorbing (zero exit rate)")
        if not is_irreducible(off):
            raise InvalidLawError("embedded chain is not irreducible")

    @property
    def M(self) -> int:
        return self.generator.shape[0]

    @property
    def rates(self) -> np.ndarray:
        """Exit rates gamma_p = -gamma_pp."""
        return -np.diag(self.generator)


@dataclass(frozen=True, eq=False)
class SemiMarkovLaw:
    jump_matrix: np.ndarray
    sojourn: Tuple[Tuple[Optional[SojournDistribution], ...], ...]

    def __post_init__(self):
        L = np.array(self.jump_matrix, dtype=float)
        object.__setattr__(self, 'jump_matrix', L)
        object.__setattr__(self, 'sojourn', tuple(tuple(row) for row in self.sojourn))
        if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[0] < 2:
            raise InvalidLawError(f"jump matrix must be square with at least two modes, got {L.shape}")
        M = L.shape[0]
        if np.any(np.diag(L) != 0):
            raise InvalidLawError("jump matrix diagonal must be zero")
        if np.any(L < 0):
            raise InvalidLawError("jump probabilities must be non-negative")
        for i, s in enumerate(L.sum(axis=1)):
            if abs(s - 1.0) > GENERATOR_TOL:
                raise InvalidLawError(f"jump matrix row {i} sums to {s:.15g}, expected 1")
        if len(self.sojourn) != M or any(len(row) != M for row in self.sojourn):
            raise InvalidLawError(f"sojourn table must be {M}x{M}")
        for i in range(M):
            for j in range(M):
                if L[i, j] > 0 and self.sojourn[i][j] is None:
                    raise InvalidLawError(f"sojourn[{i}][{j}] missing for a reachable transition")
        if not is_irreducible(L):
            raise InvalidLawError("jump matrix is not irreducible")

    @property
    def M(self) -> int:
        return self.jump_matrix.shape[0]


@dataclass(frozen=True)
class FixedLaw:
    """A single mode that never switches."""
    M: int = 1

    def __post_init__(self):
        if self.M != 1:
            raise InvalidLawError("a fixed law has exactly one mode")


SwitchingLaw = Union[MarkovLaw, SemiMarkovLaw, FixedLaw]


@dataclass(frozen=True, eq=False)
class SwitchingPath:
    jump_times: np.ndarray
    modes: np.ndarray
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, 'jump_times', np.asarray(self.jump_times, dtype=float))
        object.__setattr__(self, 'modes', np.asarray(self.modes, dtype=int))

    def __len__(self) -> int:
        return len(self.jump_times)


# --- Operations ---

def embedded_chain(law: Union[MarkovLaw, np.ndarray]) -> np.ndarray:
    """lambda_ij = -gamma_ij / gamma_ii for i != j, zero diagonal."""
    G = law.generator if isinstance(law, MarkovLaw) else np.asarray(law, dtype=float)
    diag = np.diag(G)
    if np.any(diag >= 0):
        raise InvalidLawError("invalid generator: a mode has zero exit rate")
    L = -G / diag[:, None]
    np.fill_diagonal(L, 0.0)
    return L


def jump_matrix(law: SwitchingLaw) -> np.ndarray:
    if isinstance(law, MarkovLaw):
        return embedded_chain(law)
    if isinstance(law, SemiMarkovLaw):
        return law.jump_matrix
    return np.zeros((1, 1))


def stationary(law: SwitchingLaw) -> np.ndarray:
    """Stationary distribution of the embedded (jump) chain."""
    if isinstance(law, FixedLaw):
        return np.ones(1)
    return mathkit.stationary_distribution(jump_matrix(law))


def ctmc_stationary_distribution(law: MarkovLaw) -> np.ndarray:
    """Time-stationary distribution, pi Gamma = 0."""
    return mathkit.generator_stationary_distribution(law.generator)


def mean_sojourn(law: SwitchingLaw) -> np.ndarray:
    """Mean holding time per mode."""
    if isinstance(law, MarkovLaw):
        return 1.0 / law.rates
    if isinstance(law, SemiMarkovLaw):
        means = np.zeros(law.M)
        for i in range(law.M):
            for j in range(law.M):
                if law.jump_matrix[i, j] > 0:
                    means[i] += law.jump_matrix[i, j] * law.sojourn[i][j].mean()
        return means
    return np.array([math.inf])


def _check_path_args(law: SwitchingLaw, horizon: float, initial_mode: int) -> None:
    if not horizon >= 0 or math.isinf(horizon):
        raise ValueError(f"horizon must be finite and >= 0, got {horizon}")
    if not 0 <= initial_mode < law.M:
        raise ValueError(f"initial mode {initial_mode} outside [0, {law.M})")


def sample_path_markov(law: MarkovLaw, horizon: float, seed: int, initial_mode: int = 0) -> SwitchingPath:
    _check_path_args(law, horizon, initial_mode)
    stream = _UniformStream(seed)
    cum = _cumulative_rows(embedded_chain(law))
    rates = law.rates

    times: List[float] = [0.0]
    modes: List[int] = [initial_mode]
    t, mode = 0.0, initial_mode
    while True:
        t += -math.log1p(-stream.next()) / rates[mode]
        if t > horizon:
            break
        mode = _pick(cum[mode], stream.next())
        times.append(t)
        modes.append(mode)
    return SwitchingPath(np.array(times), np.array(modes), float(horizon))


def sample_path_semimarkov(law: SemiMarkovLaw, horizon: float, seed: int, initial_mode: int = 0) -> SwitchingPath:
    _check_path_args(law, horizon, initial_mode)
    stream = _UniformStream(seed)
    cum = _cumulative_rows(law.jump_matrix)

    times: List[float] = [0.0]
    modes: List[int] = [initial_mode]
    t, mode = 0.0, initial_mode
    while True:
        # next mode first: F_ij is conditioned on the destination
        nxt = _pick(cum[mode], stream.next())
        t += law.sojourn[mode][nxt].inverse_cdf(stream.next())
        if t > horizon:
            break
        mode = nxt
        times.append(t)
        modes.append(mode)
    return SwitchingPath(np.array(times), np.array(modes), float(horizon))


def sample_path(law: SwitchingLaw, horizon: float, seed: int, initial_mode: int = 0) -> SwitchingPath:
    if isinstance(law, MarkovLaw):
        return sample_path_markov(law, horizon, seed, initial_mode)
    if isinstance(law, SemiMarkovLaw):
        return sample_path_semimarkov(law, horizon, seed, initial_mode)
    _check_path_args(law, horizon, initial_mode)
    return SwitchingPath(np.zeros(1), np.array([initial_mode]), float(horizon))


def mode_at(path: SwitchingPath, t: float) -> int:
    """Mode of the last jump at or before t (right-continuous)."""
    if not 0 <= t <= path.horizon:
        raise ValueError(f"t = {t} outside [0, {path.horizon}]")
    idx = int(np.searchsorted(path.jump_times, t, side='right')) - 1
    return int(path.modes[idx])


def jump_times_between(path: SwitchingPath, a: float, b: float) -> np.ndarray:
    """Jump instants strictly inside (a, b)."""
    lo = int(np.searchsorted(path.jump_times, a, side='right'))
    hi = int(np.searchsorted(path.jump_times, b, side='left'))
    return path.jump_times[lo:hi]


def sojourn_samples(path: SwitchingPath, mode: Optional[int] = None) -> np.ndarray:
    """Completed holding times, optionally restricted to one mode."""
    if len(path) < 2:
        return np.zeros(0)
    holds = np.diff(path.jump_times)
    if mode is None:
        return holds
    return holds[path.modes[:-1] == mode]


def occupancy_fractions(path: SwitchingPath, M: int) -> np.ndarray:
    """Share of [0, horizon] spent in each mode."""
    edges = np.append(path.jump_times, path.horizon)
    durations = np.diff(edges)
    occ = np.bincount(path.modes, weights=durations, minlength=M)
    total = occ.sum()
    return occ / total if total > 0 else occ


def law_from_rates(rates: Sequence[float], jump: np.ndarray) -> MarkovLaw:
    """Builds the generator gamma_ij = gamma_i * lambda_ij, gamma_ii = -gamma_i."""
    rates = np.asarray(rates, dtype=float)
    G = rates[:, None] * np.asarray(jump, dtype=float)
    np.fill_diagonal(G, -rates)
    return MarkovLaw(G)
