"""
Finite data-rate communication protocol.

At every sample t_k = k*tau the encoder locates x(t_k) inside the hypercube
of radius E_k around x*_k, sends the index of one of N^n boxes together with
the active mode, and both endpoints update (x*_k, E_k) by the same rules:
the no-switch law when the plant mode stayed put over the interval, the
switch law built from the expected/worst interval propagators otherwise.
Box index 0 is reserved for "outside the hypercube".
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import mathkit
import switching

logger = logging.getLogger(__name__)

WORST_STRATEGIES = ("bound", "grid_dp")

QUANT_RTOL = 1e-9
RADIUS_FLOOR = 1e-300


class ProtocolError(RuntimeError):
    pass


class AssumptionViolation(ValueError):
    """Open-loop growth ||exp(A_p tau)|| reaches N for some mode."""

    def __init__(self, mode: int, Lambda: float, N: int):
        self.mode = mode
        self.Lambda = Lambda
        self.N = N
        super().__init__(
            f"mode {mode + 1}: Lambda_p = ||exp(A_p tau)|| = {Lambda:.6g} is not below N = {N}"
        )


# --- Plant modes ---

@dataclass(frozen=True, eq=False)
class ModeLinearSystem:
    """One mode of the plant: dx/dt = A x + B u with feedback gain K."""
    A: np.ndarray
    B: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        A = mathkit.as_matrix(self.A, "A")
        B = mathkit.as_matrix(self.B, "B")
        K = mathkit.as_matrix(self.K, "K")
        n = A.shape[0]
        if A.shape != (n, n):
            raise mathkit.MatrixError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise mathkit.MatrixError(f"B must have {n} rows, got {B.shape}")
        if K.shape != (B.shape[1], n):
            raise mathkit.MatrixError(f"K must be {B.shape[1]}x{n}, got {K.shape}")
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)
        object.__setattr__(self, 'K', K)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def closed_loop(self) -> np.ndarray:
        return self.A + self.B @ self.K

    def open_loop_propagator(self, tau: float) -> np.ndarray:
        return mathkit.mat_exp(self.A, tau)

    def closed_loop_propagator(self, tau: float) -> np.ndarray:
        return mathkit.mat_exp(self.closed_loop(), tau)

    def without_gain(self) -> "ModeLinearSystem":
        return ModeLinearSystem(self.A, self.B, np.zeros_like(self.K))


def block_generator(p_sys: ModeLinearSystem, q_sys: ModeLinearSystem) -> np.ndarray:
    """
    A_{p,q} = [[A_q, B_q K_p], [0, A_p + B_p K_p]]: plant in mode q, controller
    holding the mode p sampled at t_k.
    """
    n = p_sys.n
    top = np.hstack([q_sys.A, q_sys.B @ p_sys.K])
    bottom = np.hstack([np.zeros((n, n)), p_sys.closed_loop()])
    return np.vstack([top, bottom])


def open_loop_norms(systems: Sequence[ModeLinearSystem], tau: float) -> np.ndarray:
    """Lambda_p = ||exp(A_p tau)|| for every mode."""
    return np.array([mathkit.inf_norm(s.open_loop_propagator(tau)) for s in systems])


def check_growth_condition(systems: Sequence[ModeLinearSystem], tau: float, N: int) -> np.ndarray:
    Lambdas = open_loop_norms(systems, tau)
    for p, Lam in enumerate(Lambdas):
        if not Lam < N:
            raise AssumptionViolation(p, float(Lam), N)
    return Lambdas


# --- Configuration and shared state ---

@dataclass(frozen=True)
class ProtocolConfig:
    tau: float
    N: int
    n: int
    M: int
    E0: float
    xstar0: Tuple[float, ...]
    worst_strategy: str = "bound"
    grid_points: int = 8
    max_switches: int = 2

    def __post_init__(self):
        object.__setattr__(self, 'xstar0', tuple(float(v) for v in self.xstar0))
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ProtocolError(f"tau must be positive, got {self.tau}")
        if int(self.N) != self.N or self.N < 2:
            raise ProtocolError(f"N must be an integer >= 2, got {self.N}")
        if self.n < 1 or self.M < 1:
            raise ProtocolError("state dimension and mode count must be positive")
        if not (self.E0 > 0 and math.isfinite(self.E0)):
            raise ProtocolError(f"E0 must be positive, got {self.E0}")
        if len(self.xstar0) != self.n:
            raise ProtocolError(f"xstar0 must have {self.n} entries, got {len(self.xstar0)}")
        if self.worst_strategy not in WORST_STRATEGIES:
            raise ProtocolError(f"worst_strategy must be one of {WORST_STRATEGIES}")
        if self.worst_strategy == "grid_dp" and self.grid_points < 2:
            raise ProtocolError(f"grid_dp needs grid_points >= 2, got {self.grid_points}")
        if self.max_switches < 0:
            raise ProtocolError("max_switches must be >= 0")
        if self.N % 2 == 0:
            logger.warning(f"N = {self.N} is even; the quantizer does not need odd N but the midpoint lies on a cell edge")

    @property
    def symbol_format(self) -> "SymbolFormat":
        return SymbolFormat(self.N, self.n, self.M)


@dataclass(frozen=True, eq=False)
class QuantizerState:
    k: int
    xstar: np.ndarray
    E: float
    mode: int

    def __post_init__(self):
        if not self.E > 0:
            raise ProtocolError(f"quantizer radius must stay positive, got {self.E}")


def initial_state(cfg: ProtocolConfig, mode: int = 0) -> QuantizerState:
    return QuantizerState(0, np.array(cfg.xstar0, dtype=float), float(cfg.E0), mode)


@dataclass(frozen=True)
class Symbol:
    box_index: int
    mode: int


class SymbolFormat(NamedTuple):
    N: int
    n: int
    M: int

    @property
    def boxes(self) -> int:
        return self.N ** self.n

    @property
    def widths(self) -> Tuple[int, int]:
        # ceil(log2(N^n + 1)) and ceil(log2 M)
        return self.boxes.bit_length(), (self.M - 1).bit_length()

    @property
    def bits_per_sample(self) -> int:
        return sum(self.widths)


# --- Data rate ---

def data_rate_for(N: int, n: int, M: int, tau: float) -> float:
    """R = (log2(N^n + 1) + log2 M) / tau, in bits per second."""
    return (math.log2(N ** n + 1) + math.log2(M)) / tau


def data_rate(cfg: ProtocolConfig) -> float:
    return data_rate_for(cfg.N, cfg.n, cfg.M, cfg.tau)


def min_symbols_per_dimension(systems: Sequence[ModeLinearSystem], tau: float) -> int:
    """Smallest N satisfying Lambda_p < N for every mode."""
    return max(2, int(math.floor(float(np.max(open_loop_norms(systems, tau))))) + 1)


def minimum_data_rate(systems: Sequence[ModeLinearSystem], tau: float) -> float:
    return data_rate_for(min_symbols_per_dimension(systems, tau), systems[0].n, len(systems), tau)


# --- Quantizer ---

def quantize_offset(d: np.ndarray, E: float, N: int, mode: int) -> Symbol:
    """Quantizes the offset d = x - x* against a hypercube of radius E."""
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)) or mathkit.inf_norm(d) > E * (1.0 + QUANT_RTOL):
        return Symbol(0, mode)
    cells = np.floor((d + E) * N / (2.0 * E)).astype(int)
    cells = np.clip(cells, 0, N - 1)
    box = 1 + sum(int(c) * N ** i for i, c in enumerate(cells))
    return Symbol(box, mode)


def quantize(x: np.ndarray, state: QuantizerState, N: int) -> Symbol:
    return quantize_offset(np.asarray(x, dtype=float) - state.xstar, state.E, N, state.mode)


def box_cells(box_index: int, N: int, n: int) -> List[int]:
    rest = box_index - 1
    cells = []
    for _ in range(n):
        rest, c = divmod(rest, N)
        cells.append(c)
    return cells


def center_offset(box_index: int, E: float, N: int, n: int) -> np.ndarray:
    """Center of the indexed box relative to x*."""
    if box_index == 0:
        raise ProtocolError("overflow symbol carries no box center; protocol resets")
    if not 1 <= box_index <= N ** n:
        raise ProtocolError(f"box index {box_index} outside [1, {N ** n}]")
    cells = np.array(box_cells(box_index, N, n), dtype=float)
    return -E + (2.0 * cells + 1.0) * E / N


def decode_center(sym: Symbol, state: QuantizerState, N: int) -> np.ndarray:
    return state.xstar + center_offset(sym.box_index, state.E, N, state.xstar.size)


# --- Bit packing ---

def _format_of(cfg) -> SymbolFormat:
    return SymbolFormat(cfg.N, cfg.n, cfg.M)


def encode_bits(sym: Symbol, cfg) -> str:
    fmt = _format_of(cfg)
    box_bits, mode_bits = fmt.widths
    if not 0 <= sym.box_index <= fmt.boxes:
        raise ProtocolError(f"box index {sym.box_index} outside [0, {fmt.boxes}]")
    if not 0 <= sym.mode < fmt.M:
        raise ProtocolError(f"mode {sym.mode} outside [0, {fmt.M})")
    box = format(sym.box_index, f"0{box_bits}b")
    mode = format(sym.mode, f"0{mode_bits}b") if mode_bits else ""
    return box + mode


def decode_bits(bits: str, cfg) -> Symbol:
    fmt = _format_of(cfg)
    box_bits, mode_bits = fmt.widths
    if len(bits) != box_bits + mode_bits or set(bits) - {"0", "1"}:
        raise ProtocolError(f"expected {box_bits + mode_bits} bits, got '{bits}'")
    box = int(bits[:box_bits], 2)
    mode = int(bits[box_bits:], 2) if mode_bits else 0
    if box > fmt.boxes or mode >= fmt.M:
        raise ProtocolError(f"bit string '{bits}' decodes outside the symbol alphabet")
    return Symbol(box, mode)


# --- Interval propagators ---

class TransitionEstimates(NamedTuple):
    S_tilde: np.ndarray
    S_check_norm: float
    S_diff_norm: float
    chi: float
    psi: float

    @classmethod
    def from_norms(cls, S_tilde: np.ndarray, S_check_norm: float, S_diff_norm: float, N: int) -> "TransitionEstimates":
        chi = 2.0 * S_check_norm + S_diff_norm
        psi = ((N - 1) * S_diff_norm + (2 * N - 1) * S_check_norm) / N
        return cls(S_tilde, float(S_check_norm), float(S_diff_norm), float(chi), float(psi))


class WorstCase(NamedTuple):
    S_check_norm: float
    S_diff_norm: float
    S_check: Optional[np.ndarray]


def expected_segments(p: int, law: switching.SwitchingLaw, tau: float) -> List[Tuple[int, float]]:
    """Visiting order (p first, then ascending) with mean-sojourn-proportional lengths."""
    M = law.M
    if M == 1:
        return [(p, tau)]
    weights = switching.mean_sojourn(law)
    order = [p] + [q for q in range(M) if q != p]
    total = float(np.sum(weights))
    return [(q, tau * weights[q] / total) for q in order]


def expected_transition(p: int, systems: Sequence[ModeLinearSystem], law: switching.SwitchingLaw,
                        cfg: ProtocolConfig) -> np.ndarray:
    """S~ = [I, 0] * prod exp(A_{p,q} dt_q), left-multiplied in visiting order."""
    n = cfg.n
    prod = np.eye(2 * n)
    for q, length in expected_segments(p, law, cfg.tau):
        prod = mathkit.mat_exp(block_generator(systems[p], systems[q]), length) @ prod
    return prod[:n]


def _worst_bound(p: int, systems: Sequence[ModeLinearSystem], cfg: ProtocolConfig) -> float:
    widest = max(mathkit.inf_norm(block_generator(systems[p], q_sys)) for q_sys in systems)
    return math.exp(widest * cfg.tau)


def _worst_on_grid(p: int, steps: List[np.ndarray], n: int, G: int, max_switches: int) -> np.ndarray:
    """
    Dynamic program over (current mode, switches used). Each state keeps the
    product whose [I, 0] block has the largest norm; the interval starts in p.
    """
    def score(P):
        return mathkit.inf_norm(P[:n])

    layer = {(p, 0): steps[p]}
    for _ in range(1, G):
        nxt = {}
        for (q, s), P in layer.items():
            for r, step in enumerate(steps):
                s2 = s if r == q else s + 1
                if s2 > max_switches:
                    continue
                cand = step @ P
                key = (r, s2)
                if key not in nxt or score(cand) > score(nxt[key]):
                    nxt[key] = cand
        layer = nxt
    return max(layer.values(), key=score)[:n]


def worst_transition(p: int, systems: Sequence[ModeLinearSystem], cfg: ProtocolConfig,
                     S_tilde: np.ndarray) -> WorstCase:
    if cfg.worst_strategy == "bound":
        S_check_norm = _worst_bound(p, systems, cfg)
        return WorstCase(S_check_norm, mathkit.inf_norm(S_tilde) + S_check_norm, None)

    if cfg.grid_points < 2:
        raise ProtocolError(f"grid_dp needs grid_points >= 2, got {cfg.grid_points}")
    blocks = [block_generator(systems[p], q_sys) for q_sys in systems]
    best = None
    # coarser grids are not sub-grids of finer ones, so keep the best over all of them
    for G in range(2, cfg.grid_points + 1):
        steps = [mathkit.mat_exp(blk, cfg.tau / G) for blk in blocks]
        cand = _worst_on_grid(p, steps, cfg.n, G, cfg.max_switches)
        if best is None or mathkit.inf_norm(cand) > mathkit.inf_norm(best):
            best = cand
    return WorstCase(mathkit.inf_norm(best), mathkit.inf_norm(S_tilde - best), best)


def transition_estimates(p: int, systems: Sequence[ModeLinearSystem], law: switching.SwitchingLaw,
                         cfg: ProtocolConfig) -> TransitionEstimates:
    S_tilde = expected_transition(p, systems, law, cfg)
    worst = worst_transition(p, systems, cfg, S_tilde)
    return TransitionEstimates.from_norms(S_tilde, worst.S_check_norm, worst.S_diff_norm, cfg.N)


@dataclass(frozen=True, eq=False)
class ProtocolTables:
    """Per-mode quantities that do not depend on k; built once per run."""
    cfg: ProtocolConfig
    closed_loop_props: List[np.ndarray]
    Lambdas: np.ndarray
    estimates: List[TransitionEstimates]


def build_tables(systems: Sequence[ModeLinearSystem], law: switching.SwitchingLaw,
                 cfg: ProtocolConfig) -> ProtocolTables:
    Lambdas = check_growth_condition(systems, cfg.tau, cfg.N)
    props = [s.closed_loop_propagator(cfg.tau) for s in systems]
    estimates = [transition_estimates(p, systems, law, cfg) for p in range(len(systems))]
    for p, est in enumerate(estimates):
        logger.debug(f"mode {p + 1}: Lambda={Lambdas[p]:.6g} chi={est.chi:.6g} psi={est.psi:.6g}")
    return ProtocolTables(cfg, props, Lambdas, estimates)


# --- Update laws ---

def update_no_switch(state: QuantizerState, c_k: np.ndarray, tables: ProtocolTables) -> QuantizerState:
    """x* <- exp((A_p + B_p K_p) tau) c_k, E <- (Lambda_p / N) E."""
    p = state.mode
    xstar = tables.closed_loop_props[p] @ c_k
    E = max(tables.Lambdas[p] / tables.cfg.N * state.E, RADIUS_FLOOR)
    return QuantizerState(state.k + 1, xstar, E, p)


def update_with_switch(state: QuantizerState, c_k: np.ndarray, estimates: TransitionEstimates) -> QuantizerState:
    """x* <- S~ [c_k; c_k], E <- chi ||x*_k|| + psi E."""
    xstar = estimates.S_tilde @ np.concatenate([c_k, c_k])
    E = max(estimates.chi * mathkit.inf_norm(state.xstar) + estimates.psi * state.E, RADIUS_FLOOR)
    return QuantizerState(state.k + 1, xstar, E, state.mode)


def update_overflow(state: QuantizerState, tables: ProtocolTables) -> QuantizerState:
    """Recovery after an overflow symbol: hold x-hat at x*, double the radius."""
    logger.warning(f"overflow at sample {state.k}: resetting radius {state.E:.6g} -> {2 * state.E:.6g}")
    xstar = tables.closed_loop_props[state.mode] @ state.xstar
    return QuantizerState(state.k + 1, xstar, 2.0 * state.E, state.mode)


# --- Endpoints ---

class EncodedSample(NamedTuple):
    symbol: Symbol
    bits: str
    center: np.ndarray
    offset: Optional[np.ndarray]


class _Endpoint:
    def __init__(self, tables: ProtocolTables, mode: int = 0):
        self.tables = tables
        self.state = initial_state(tables.cfg, mode)
        self._center: Optional[np.ndarray] = None
        self._overflow = False

    def _accept(self, sym: Symbol) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        self.state = dataclasses.replace(self.state, mode=sym.mode)
        if sym.box_index == 0:
            self._overflow = True
            self._center = self.state.xstar
            return self._center, None
        self._overflow = False
        offset = center_offset(sym.box_index, self.state.E, self.tables.cfg.N, self.tables.cfg.n)
        self._center = self.state.xstar + offset
        return self._center, offset

    def advance(self, switched: bool) -> QuantizerState:
        """Applies the update law for the interval that just ended."""
        if self._center is None:
            raise ProtocolError("advance() called before a sample was processed")
        if self._overflow:
            self.state = update_overflow(self.state, self.tables)
        elif switched:
            self.state = update_with_switch(self.state, self._center, self.tables.estimates[self.state.mode])
        else:
            self.state = update_no_switch(self.state, self._center, self.tables)
        self._center = None
        return self.state


class Encoder(_Endpoint):
    def encode_offset(self, d: np.ndarray, mode: int) -> EncodedSample:
        """Encodes a sample given its offset d = x(t_k) - x*_k."""
        cfg = self.tables.cfg
        sym = quantize_offset(d, self.state.E, cfg.N, mode)
        center, offset = self._accept(sym)
        return EncodedSample(sym, encode_bits(sym, cfg), center, offset)

    def encode(self, x: np.ndarray, mode: int) -> EncodedSample:
        return self.encode_offset(np.asarray(x, dtype=float) - self.state.xstar, mode)


class Decoder(_Endpoint):
    def receive(self, bits: str) -> np.ndarray:
        """Returns c_k (x*_k itself after an overflow symbol)."""
        center, _ = self._accept(decode_bits(bits, self.tables.cfg))
        return center
