"""
Closed-loop simulation of the jump linear system under the quantized protocol.

Within each sampling interval the controller keeps the mode it sampled at
t_k while the plant follows the switching path. The event-exact integrator
propagates the pair (e, x_hat), e = x - x_hat, with one block exponential
per constant-mode piece; the fixed-step integrator runs explicit Euler on
(x, x_hat).
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import certificate
import mathkit
import protocol
import switching
from protocol import ModeLinearSystem, ProtocolConfig

logger = logging.getLogger(__name__)

INTEGRATORS = ("event_exact", "fixed_step")
DIVERGENCE_NORM = 1e300
DEFAULT_DT = 1e-4
STEP_RTOL = 1e-9
LENGTH_DIGITS = 14


class SoundnessError(RuntimeError):
    """Overflow symbol emitted where the protocol guarantees containment."""


@dataclass(frozen=True, eq=False)
class Scenario:
    systems: List[ModeLinearSystem]
    law: switching.SwitchingLaw
    protocol: ProtocolConfig
    x0: np.ndarray
    horizon: float
    integrator: str = "event_exact"
    dt: float = DEFAULT_DT
    seed: int = 0
    initial_mode: int = 0
    record_points: int = 10

    def __post_init__(self):
        object.__setattr__(self, 'systems', list(self.systems))
        object.__setattr__(self, 'x0', np.asarray(self.x0, dtype=float))
        n, m = self.systems[0].n, self.systems[0].m
        for p, s in enumerate(self.systems):
            if (s.n, s.m) != (n, m):
                raise ValueError(f"mode {p + 1} has dimensions {(s.n, s.m)}, expected {(n, m)}")
        if len(self.systems) != self.law.M:
            raise ValueError(f"{len(self.systems)} modes but the switching law has {self.law.M}")
        if (self.protocol.n, self.protocol.M) != (n, len(self.systems)):
            raise ValueError("protocol dimensions do not match the mode set")
        # K_p = 0 on unstabilizable modes, matching the certificate
        object.__setattr__(self, 'systems', certificate.prepare_systems(self.systems, self.protocol.tau)[1])
        if self.x0.shape != (n,):
            raise ValueError(f"x0 must have {n} entries, got shape {self.x0.shape}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}, got '{self.integrator}'")
        if self.record_points < 1:
            raise ValueError("record_points must be >= 1")
        if not 0 <= self.initial_mode < len(self.systems):
            raise ValueError(f"initial mode {self.initial_mode + 1} outside [1, {len(self.systems)}]")
        if self.integrator == "fixed_step":
            ratio = self.protocol.tau / self.dt
            if not (0 < self.dt <= self.protocol.tau) or abs(ratio - round(ratio)) > STEP_RTOL * ratio:
                raise ValueError(f"fixed_step needs dt <= tau with tau/dt an integer (tau={self.protocol.tau}, dt={self.dt})")

    @property
    def steps_per_interval(self) -> int:
        return int(round(self.protocol.tau / self.dt))

    @property
    def sample_count(self) -> int:
        return int(math.floor(self.horizon / self.protocol.tau + STEP_RTOL)) + 1


class QuantizerRecord(NamedTuple):
    k: int
    t_k: float
    xstar: np.ndarray
    E: float
    box_index: int
    mode: int
    switch_flag: bool
    containment: float


@dataclass(eq=False)
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    mode: np.ndarray
    u: np.ndarray
    sample_index: np.ndarray
    quantizer_log: List[QuantizerRecord]
    path: switching.SwitchingPath
    sample_x: np.ndarray
    centers: np.ndarray
    horizon: float
    diverged: bool = False
    overflow_count: int = 0
    containment_violations: int = 0


class _Recorder:
    def __init__(self, path: switching.SwitchingPath):
        self.path = path
        self.rows: Dict[str, list] = {name: [] for name in ('t', 'x', 'xhat', 'mode', 'u', 'k')}

    def add(self, t: float, x: np.ndarray, xhat: np.ndarray, ctrl: ModeLinearSystem, k: int) -> None:
        t_clamped = min(t, self.path.horizon)
        self.rows['t'].append(t)
        self.rows['x'].append(x.copy())
        self.rows['xhat'].append(xhat.copy())
        self.rows['mode'].append(switching.mode_at(self.path, t_clamped))
        self.rows['u'].append(ctrl.K @ xhat)
        self.rows['k'].append(k)


# --- Generators ---

def error_block_generator(p_sys: ModeLinearSystem, q_sys: ModeLinearSystem) -> np.ndarray:
    """
    A_{p,q} in coordinates (e, x_hat), e = x - x_hat:
    [[A_q, A_q + B_q K_p - A_p - B_p K_p], [0, A_p + B_p K_p]].
    """
    n = p_sys.n
    closed_p = p_sys.closed_loop()
    top = np.hstack([q_sys.A, q_sys.A + q_sys.B @ p_sys.K - closed_p])
    bottom = np.hstack([np.zeros((n, n)), closed_p])
    return np.vstack([top, bottom])


class _ExactPropagators:
    def __init__(self, systems: Sequence[ModeLinearSystem]):
        M = len(systems)
        self.generators = [[error_block_generator(systems[p], systems[q]) for q in range(M)] for p in range(M)]
        self._cache: Dict[Tuple[int, int, float], np.ndarray] = {}

    def __call__(self, p: int, q: int, length: float) -> np.ndarray:
        # record spacings differ in the last bits only; share one exponential
        length = round(length, LENGTH_DIGITS)
        key = (p, q, length)
        prop = self._cache.get(key)
        if prop is None:
            prop = mathkit.mat_exp(self.generators[p][q], length)
            if len(self._cache) < 4096:
                self._cache[key] = prop
        return prop


# --- Simulation ---

def _path_for(sc: Scenario) -> switching.SwitchingPath:
    return switching.sample_path(sc.law, sc.horizon, sc.seed, sc.initial_mode)


def simulate(sc: Scenario, path: Optional[switching.SwitchingPath] = None,
             tables: Optional[protocol.ProtocolTables] = None, strict: bool = True) -> Trajectory:
    """
    Runs the closed loop over [0, horizon]. With strict=True an overflow
    symbol under event_exact integration and the bound strategy raises
    SoundnessError; otherwise overflows are counted and recovered.
    """
    cfg = sc.protocol
    n = cfg.n
    tau = cfg.tau
    path = path if path is not None else _path_for(sc)
    tables = tables if tables is not None else protocol.build_tables(sc.systems, sc.law, cfg)
    exact = sc.integrator == "event_exact"

    encoder = protocol.Encoder(tables, sc.initial_mode)
    decoder = protocol.Decoder(tables, sc.initial_mode)
    rec = _Recorder(path)
    log: List[QuantizerRecord] = []
    sample_x, centers = [], []
    overflow_count = 0
    violations = 0
    diverged = False

    props = _ExactPropagators(sc.systems) if exact else None
    euler = _euler_steps(sc.systems, sc.dt) if not exact else None

    # (e, x_hat) before the first sample: x_hat(0-) = x*_0
    xhat = encoder.state.xstar.copy()
    e = sc.x0 - xhat
    hat_is_center = True

    times = [k * tau for k in range(sc.sample_count)]
    times[-1] = min(times[-1], sc.horizon)

    for k, t_k in enumerate(times):
        p = switching.mode_at(path, t_k)
        state = encoder.state
        full = k + 1 < len(times)
        end = times[k + 1] if full else sc.horizon

        # offset from the current centre; exact in error coordinates after a no-switch interval
        d = e if hat_is_center else (xhat - state.xstar) + e
        x_k = xhat + e
        ratio = mathkit.inf_norm(d) / state.E

        sample = encoder.encode_offset(d, p)
        center = decoder.receive(sample.bits)
        if not np.array_equal(center, sample.center):
            raise protocol.ProtocolError(f"decoder left lockstep at sample {k}")

        overflow = sample.symbol.box_index == 0
        if overflow or ratio > 1.0 + protocol.QUANT_RTOL:
            violations += 1
        if overflow:
            overflow_count += 1
            if strict and exact and cfg.worst_strategy == "bound":
                raise SoundnessError(f"overflow at sample {k} (t={t_k:.6g}, ratio {ratio:.6g})")
            e = d
        else:
            e = d - sample.offset
        xhat = center.copy()

        switched = len(switching.jump_times_between(path, t_k, end)) > 0
        log.append(QuantizerRecord(k, t_k, state.xstar.copy(), state.E, sample.symbol.box_index, p, switched, ratio))
        sample_x.append(x_k.copy())
        centers.append(center.copy())
        rec.add(t_k, x_k, xhat, sc.systems[p], k)

        if end <= t_k:
            break
        if exact:
            e, xhat, diverged = _propagate_exact(props, path, p, e, xhat, t_k, end, not full, sc, rec, k)
        else:
            e, xhat, diverged = _propagate_fixed(euler, path, p, e, xhat, t_k, end, not full, sc, rec, k)
        if diverged:
            logger.warning(f"run with seed {sc.seed} diverged before t={end:.6g}; freezing")
            break
        if not full:
            break

        encoder.advance(switched)
        decoder.advance(switched)
        if not overflow and not switched:
            # x_hat(t_{k+1}-) = exp((A_p + B_p K_p) tau) c_k = x*_{k+1}
            if not exact:
                e = xhat + e - encoder.state.xstar
            xhat = encoder.state.xstar.copy()
            hat_is_center = True
        else:
            hat_is_center = False

    rows = rec.rows
    return Trajectory(
        t=np.array(rows['t']),
        x=np.array(rows['x']).reshape(-1, n),
        xhat=np.array(rows['xhat']).reshape(-1, n),
        mode=np.array(rows['mode'], dtype=int),
        u=np.array(rows['u']).reshape(len(rows['t']), -1),
        sample_index=np.array(rows['k'], dtype=int),
        quantizer_log=log,
        path=path,
        sample_x=np.array(sample_x).reshape(-1, n),
        centers=np.array(centers).reshape(-1, n),
        horizon=sc.horizon,
        diverged=diverged,
        overflow_count=overflow_count,
        containment_violations=violations,
    )


def _record_times(t_k: float, end: float, tau: float, R: int) -> List[float]:
    h = tau / R
    return [t_k + j * h for j in range(1, R) if t_k + j * h < end]


def _blown_up(x: np.ndarray) -> bool:
    return not np.all(np.isfinite(x)) or mathkit.inf_norm(x) > DIVERGENCE_NORM


def _propagate_exact(props: _ExactPropagators, path: switching.SwitchingPath, p: int, e: np.ndarray,
                     xhat: np.ndarray, t_k: float, end: float, record_end: bool, sc: Scenario,
                     rec: _Recorder, k: int) -> Tuple[np.ndarray, np.ndarray, bool]:
    n = e.size
    records = _record_times(t_k, end, sc.protocol.tau, sc.record_points)
    jumps = switching.jump_times_between(path, t_k, end)
    cuts = sorted(set(records) | set(float(j) for j in jumps) | {end})
    record_set = set(records)
    if record_end:
        record_set.add(end)

    z = np.concatenate([e, xhat])
    prev = t_k
    for c in cuts:
        q = switching.mode_at(path, prev)
        z = props(p, q, c - prev) @ z
        prev = c
        if c in record_set:
            x = z[:n] + z[n:]
            if _blown_up(x):
                return z[:n], z[n:], True
            rec.add(c, x, z[n:], sc.systems[p], k)
    e, xhat = z[:n], z[n:]
    return e, xhat, _blown_up(e + xhat)


def _euler_steps(systems: Sequence[ModeLinearSystem], dt: float) -> List[List[np.ndarray]]:
    M = len(systems)
    size = 2 * systems[0].n
    return [[np.eye(size) + dt * protocol.block_generator(systems[p], systems[q]) for q in range(M)]
            for p in range(M)]


def _propagate_fixed(euler: List[List[np.ndarray]], path: switching.SwitchingPath, p: int, e: np.ndarray,
                     xhat: np.ndarray, t_k: float, end: float, record_end: bool, sc: Scenario,
                     rec: _Recorder, k: int) -> Tuple[np.ndarray, np.ndarray, bool]:
    n = e.size
    dt = sc.dt
    steps = sc.steps_per_interval
    count = min(steps, int(math.floor((end - t_k) / dt + STEP_RTOL)))
    starts = t_k + np.arange(count) * dt
    modes = path.modes[np.searchsorted(path.jump_times, starts, side='right') - 1]

    R = sc.record_points
    record_steps = {int(round(j * steps / R)) for j in range(1, R)}
    record_steps = {s for s in record_steps if 0 < s < count}
    if record_end:
        record_steps.add(count)
    breaks = sorted(record_steps | {count} | set(int(i) for i in np.flatnonzero(np.diff(modes)) + 1))

    w = np.concatenate([e + xhat, xhat])
    done = 0
    for b in breaks:
        if b <= done:
            continue
        q = int(modes[done])
        w = np.linalg.matrix_power(euler[p][q], b - done) @ w
        done = b
        if b in record_steps:
            if _blown_up(w[:n]):
                return w[:n] - w[n:], w[n:], True
            rec.add(t_k + b * dt, w[:n], w[n:], sc.systems[p], k)
    return w[:n] - w[n:], w[n:], _blown_up(w[:n])


# --- Lyapunov exponent ---

class LyapunovEstimate(NamedTuple):
    exponent: float
    final_norm: float
    initial_norm: float
    T: float
    underflow: bool
    diverged: bool


def lyapunov_exponent(traj: Trajectory) -> LyapunovEstimate:
    """(1/T) ln(||x(T)|| / ||x(0)||) over the recorded run."""
    if traj.t.size == 0:
        raise ValueError("empty trajectory")
    x0_norm = mathkit.inf_norm(traj.x[0])
    if x0_norm == 0:
        raise ValueError("x(0) = 0: exponent undefined")
    T = float(traj.t[-1])
    if T <= 0:
        raise ValueError("trajectory covers no time")
    final = mathkit.inf_norm(traj.x[-1])
    underflow = final == 0.0
    if underflow:
        final = math.ulp(0.0)
    exponent = (math.log(final) - math.log(x0_norm)) / T
    return LyapunovEstimate(exponent, final, x0_norm, T, underflow, traj.diverged)


# --- Monte Carlo ---

@dataclass
class RunResult:
    seed: int
    exponent: float
    violations: int
    overflows: int
    diverged: bool


@dataclass
class MonteCarloSummary:
    runs: List[RunResult] = field(default_factory=list)

    @property
    def exponents(self) -> np.ndarray:
        return np.array([r.exponent for r in self.runs])

    @property
    def fraction_negative(self) -> float:
        return float(np.mean(self.exponents < 0)) if self.runs else 0.0

    @property
    def violations(self) -> int:
        return sum(r.violations for r in self.runs)

    @property
    def overflows(self) -> int:
        return sum(r.overflows for r in self.runs)

    def stats(self) -> Dict[str, float]:
        ex = self.exponents
        return {
            'runs': len(self.runs),
            'min': float(np.min(ex)),
            'median': float(np.median(ex)),
            'max': float(np.max(ex)),
            'fraction_negative': self.fraction_negative,
            'violations': self.violations,
            'overflows': self.overflows,
            'diverged': sum(r.diverged for r in self.runs),
        }


def _run_seed(sc: Scenario, seed: int, tables: protocol.ProtocolTables) -> RunResult:
    run = Scenario(sc.systems, sc.law, sc.protocol, sc.x0, sc.horizon, sc.integrator,
                   sc.dt, seed, sc.initial_mode, sc.record_points)
    traj = simulate(run, tables=tables, strict=False)
    est = lyapunov_exponent(traj)
    return RunResult(seed, est.exponent, traj.containment_violations, traj.overflow_count, traj.diverged)


def monte_carlo(sc: Scenario, runs: int, workers: int = 1, progress: bool = True) -> MonteCarloSummary:
    """Runs seeds sc.seed, sc.seed + 1, ...; results are ordered by seed."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    tables = protocol.build_tables(sc.systems, sc.law, sc.protocol)
    seeds = [sc.seed + i for i in range(runs)]
    summary = MonteCarloSummary()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_run_seed, [sc] * runs, seeds, [tables] * runs)
            for res in tqdm(results, total=runs, desc="Monte Carlo", unit="run", disable=not progress):
                summary.runs.append(res)
    else:
        for seed in tqdm(seeds, desc="Monte Carlo", unit="run", disable=not progress):
            summary.runs.append(_run_seed(sc, seed, tables))
    return summary


# --- Inter-sample diagnostic ---

class IntersampleDiagnostic(NamedTuple):
    checked: int
    violations: int
    max_ratio: float
    min_slack: float


def intersample_bound_check(traj: Trajectory, systems: Sequence[ModeLinearSystem],
                            cfg: ProtocolConfig) -> IntersampleDiagnostic:
    """Checks ||x(t)|| <= max_q exp(||A_{p,q}|| tau) (||x_k|| + ||c_k||) at every recorded point."""
    M = len(systems)
    growth = [max(math.exp(mathkit.inf_norm(protocol.block_generator(systems[p], systems[q])) * cfg.tau)
                  for q in range(M)) for p in range(M)]
    modes = np.array([rec.mode for rec in traj.quantizer_log], dtype=int)
    violations = 0
    max_ratio = 0.0
    min_slack = math.inf
    for x, k in zip(traj.x, traj.sample_index):
        bound = growth[modes[k]] * (mathkit.inf_norm(traj.sample_x[k]) + mathkit.inf_norm(traj.centers[k]))
        norm = mathkit.inf_norm(x)
        min_slack = min(min_slack, bound - norm)
        if bound > 0:
            max_ratio = max(max_ratio, norm / bound)
        if norm > bound * (1.0 + protocol.QUANT_RTOL) + 1e-300:
            violations += 1
    return IntersampleDiagnostic(len(traj.t), violations, max_ratio, min_slack)
