"""
Almost-sure stabilization certificate.

Computes the per-mode gains nu_p (stabilizable modes), upsilon_p
(unstabilizable modes) and the pairwise switch gains mu_pq, weighs their
logarithms with the sojourn-time probabilities of the switching law and
the stationary distribution of the jump chain, and searches the free
constants (rho, alpha, beta, the Lyapunov pair scale) for the most
negative condition value.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from tqdm import tqdm

import mathkit
import protocol
import switching
from protocol import ModeLinearSystem, ProtocolConfig

logger = logging.getLogger(__name__)

UPSILON_THRESHOLDS = ("tau", "two_tau")
DEFAULT_BUDGET = 5000

LOG_GRID = tuple(range(-3, 4))
LOG_LIMIT = 12.0
MIN_LOG_STEP = 1.0 / 64
SIMPLEX_STEP = 0.5
CONDITION_TOL = 1e-9
PENALTY = 1e6


class CertificateError(ValueError):
    pass


# --- Types ---

class ModeClasses(NamedTuple):
    stabilizable: Tuple[int, ...]
    unstabilizable: Tuple[int, ...]

    def is_stabilizable(self, p: int) -> bool:
        return p in self.stabilizable


@dataclass(frozen=True, eq=False)
class CertificateParams:
    """
    Free constants. Per-mode arrays are indexed by mode; alpha is only read
    for stabilizable modes and beta only for unstabilizable ones. Q[p] is
    None for unstabilizable modes.
    """
    rho: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    alpha_pair: np.ndarray
    beta_pair: np.ndarray
    P: List[np.ndarray]
    Q: List[Optional[np.ndarray]]

    def __post_init__(self):
        for name in ('rho', 'alpha', 'beta', 'alpha_pair', 'beta_pair'):
            values = np.asarray(getattr(self, name), dtype=float)
            if not np.all(values > 0):
                raise CertificateError(f"{name} must be strictly positive")
            object.__setattr__(self, name, values)
        for p, P in enumerate(self.P):
            if not mathkit.is_positive_definite(P):
                raise CertificateError(f"P_{p + 1} is not positive definite")
        for p, Q in enumerate(self.Q):
            if Q is not None and not mathkit.is_positive_definite(Q):
                raise CertificateError(f"Q_{p + 1} is not positive definite")


@dataclass(frozen=True, eq=False)
class ModeGains:
    """Gains and their intermediates; entries not defined for a mode's class are NaN."""
    nu: np.ndarray
    upsilon: np.ndarray
    mu_pair: np.ndarray
    alpha1: np.ndarray
    beta1: np.ndarray
    alpha2: np.ndarray
    beta2: np.ndarray
    alpha3: np.ndarray
    beta3: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return np.max(self.mu_pair, axis=1)


class ProbabilityWeights(NamedTuple):
    p_nu: np.ndarray
    p_upsilon: np.ndarray
    p_mu: np.ndarray


@dataclass(frozen=True, eq=False)
class CertificateReport:
    gains: ModeGains
    weights: ProbabilityWeights
    stationary: np.ndarray
    condition_value: float
    data_rate: float
    params: CertificateParams
    mode_classes: ModeClasses
    Lambdas: np.ndarray
    chi: np.ndarray
    psi: np.ndarray
    tau: float
    N: int
    strategy: str
    evaluations: int = 1
    ctmc_stationary: Optional[np.ndarray] = None

    @property
    def passes(self) -> bool:
        return self.condition_value < 0


# --- Mode classification ---

def classify_modes(systems: Sequence[ModeLinearSystem], tau: float) -> ModeClasses:
    """p is stabilizable iff exp((A_p + B_p K_p) tau) is Schur."""
    stab, unstab = [], []
    for p, s in enumerate(systems):
        (stab if mathkit.is_schur(s.closed_loop_propagator(tau)) else unstab).append(p)
    return ModeClasses(tuple(stab), tuple(unstab))


def prepare_systems(systems: Sequence[ModeLinearSystem], tau: float) -> Tuple[ModeClasses, List[ModeLinearSystem]]:
    """Classifies the modes and zeroes K_p on every unstabilizable mode."""
    classes = classify_modes(systems, tau)
    prepared = []
    for p, s in enumerate(systems):
        if p in classes.unstabilizable and np.any(s.K != 0):
            logger.warning(f"mode {p + 1} is not stabilized by its gain at tau={tau}; using K_{p + 1} = 0")
            s = s.without_gain()
        prepared.append(s)
    return classes, prepared


def mode_propagator(p: int, systems: Sequence[ModeLinearSystem], classes: ModeClasses, tau: float) -> np.ndarray:
    """S_p: closed-loop propagator for stabilizable modes, open-loop otherwise."""
    s = systems[p]
    if classes.is_stabilizable(p):
        return s.closed_loop_propagator(tau)
    return s.open_loop_propagator(tau)


# --- Gains ---

def _quant_factor(N: int) -> float:
    return ((N - 1) / N) ** 2


def _nu_terms(lam_Q: float, lam_P_max: float, lam_P_min: float, lam_SQS: float,
              alpha: float, rho: float, Lam: float, n: int, N: int) -> Tuple[float, float, float]:
    alpha1 = lam_Q / lam_P_max - alpha * lam_SQS / lam_P_min
    beta1 = (1.0 + 1.0 / alpha) * n * lam_SQS * _quant_factor(N)
    nu = max(1.0 - alpha1, beta1 / rho + Lam ** 2 / N ** 2)
    return nu, alpha1, beta1


def _upsilon_terms(lam_SPS: float, lam_P_min: float, beta: float, rho: float,
                   Lam: float, n: int, N: int) -> Tuple[float, float, float]:
    alpha2 = (1.0 + beta) * lam_SPS / lam_P_min
    beta2 = (1.0 + 1.0 / beta) * n * lam_SPS * _quant_factor(N)
    upsilon = max(alpha2, beta2 / rho + Lam ** 2 / N ** 2)
    return upsilon, alpha2, beta2


def _mu_terms(lam_SPS: float, lam_P_min: float, alpha_pq: float, beta_pq: float,
              rho_p: float, rho_q: float, chi: float, psi: float, n: int, N: int) -> Tuple[float, float, float]:
    alpha3 = (2.0 * (1.0 + beta_pq) * lam_SPS / lam_P_min
              + rho_q * chi ** 2 * (1.0 + alpha_pq) / lam_P_min)
    beta3 = (2.0 * (1.0 + 1.0 / beta_pq) * n * lam_SPS * _quant_factor(N)
             + rho_q * psi ** 2 * (1.0 + 1.0 / alpha_pq))
    return max(alpha3, beta3 / rho_p), alpha3, beta3


def _check_pd(P: np.ndarray, label: str) -> None:
    if not mathkit.is_positive_definite(P):
        raise CertificateError(f"{label} is not positive definite")


def mode_gain_nu(p: int, params: CertificateParams, systems: Sequence[ModeLinearSystem],
                 cfg: ProtocolConfig) -> float:
    """nu_p for a stabilizable mode p."""
    P, Q = params.P[p], params.Q[p]
    _check_pd(P, f"P_{p + 1}")
    if Q is None:
        raise CertificateError(f"mode {p + 1} has no Q_p; nu_p is defined for stabilizable modes only")
    S = systems[p].closed_loop_propagator(cfg.tau)
    P_ext = mathkit.sym_eig_extremes(P)
    Lam = mathkit.inf_norm(systems[p].open_loop_propagator(cfg.tau))
    nu, _, _ = _nu_terms(mathkit.sym_eig_extremes(Q).lambda_min, P_ext.lambda_max, P_ext.lambda_min,
                         mathkit.sym_eig_extremes(S.T @ Q @ S).lambda_max,
                         params.alpha[p], params.rho[p], Lam, cfg.n, cfg.N)
    return nu


def mode_gain_upsilon(p: int, params: CertificateParams, systems: Sequence[ModeLinearSystem],
                      cfg: ProtocolConfig) -> float:
    """upsilon_p for an unstabilizable mode p (K_p taken as zero)."""
    P = params.P[p]
    _check_pd(P, f"P_{p + 1}")
    S = systems[p].open_loop_propagator(cfg.tau)
    Lam = mathkit.inf_norm(S)
    upsilon, _, _ = _upsilon_terms(mathkit.sym_eig_extremes(S.T @ P @ S).lambda_max,
                                   mathkit.sym_eig_extremes(P).lambda_min,
                                   params.beta[p], params.rho[p], Lam, cfg.n, cfg.N)
    return upsilon


def pair_gain_mu(p: int, q: int, params: CertificateParams, estimates: Sequence[protocol.TransitionEstimates],
                 cfg: ProtocolConfig) -> float:
    """mu_pq from the expected propagator of mode p and P_q."""
    est = estimates[p]
    S = est.S_tilde
    P_q = params.P[q]
    if S.shape != (cfg.n, 2 * cfg.n) or P_q.shape != (cfg.n, cfg.n):
        raise CertificateError(f"dimension mismatch: S~ {S.shape}, P_{q + 1} {P_q.shape}")
    _check_pd(params.P[p], f"P_{p + 1}")
    mu, _, _ = _mu_terms(mathkit.sym_eig_extremes(S.T @ P_q @ S).lambda_max,
                         mathkit.sym_eig_extremes(params.P[p]).lambda_min,
                         params.alpha_pair[p, q], params.beta_pair[p, q],
                         params.rho[p], params.rho[q], est.chi, est.psi, cfg.n, cfg.N)
    return mu


# --- Sojourn weights ---

def weights_markov(law: switching.MarkovLaw, tau: float, upsilon_threshold: str = "tau") -> ProbabilityWeights:
    gamma = law.rates
    two = np.exp(-2.0 * gamma * tau)
    one = two if upsilon_threshold == "two_tau" else np.exp(-gamma * tau)
    return ProbabilityWeights(two, one, -np.expm1(-2.0 * gamma * tau))


def weights_semimarkov(law: switching.SemiMarkovLaw, tau: float, upsilon_threshold: str = "tau") -> ProbabilityWeights:
    M = law.M
    p_nu, p_upsilon, p_mu = np.zeros(M), np.zeros(M), np.zeros(M)
    ups_from = 2.0 * tau if upsilon_threshold == "two_tau" else tau
    for p in range(M):
        for q in range(M):
            lam = law.jump_matrix[p, q]
            if lam <= 0:
                continue
            dist = law.sojourn[p][q]
            p_mu[p] += lam * switching.sojourn_cdf_mass(dist, 0.0, 2.0 * tau)
            p_nu[p] += lam * switching.sojourn_cdf_mass(dist, 2.0 * tau, math.inf)
            p_upsilon[p] += lam * switching.sojourn_cdf_mass(dist, ups_from, math.inf)
    return ProbabilityWeights(p_nu, p_upsilon, p_mu)


def sojourn_weights(law: switching.SwitchingLaw, tau: float, upsilon_threshold: str = "tau") -> ProbabilityWeights:
    if upsilon_threshold not in UPSILON_THRESHOLDS:
        raise CertificateError(f"upsilon_threshold must be one of {UPSILON_THRESHOLDS}")
    if isinstance(law, switching.MarkovLaw):
        return weights_markov(law, tau, upsilon_threshold)
    if isinstance(law, switching.SemiMarkovLaw):
        return weights_semimarkov(law, tau, upsilon_threshold)
    # no switching: the switch event has probability zero
    return ProbabilityWeights(np.ones(1), np.ones(1), np.zeros(1))


# --- Condition ---

def condition_value(gains: ModeGains, weights: ProbabilityWeights, stationary: np.ndarray,
                    mode_classes: ModeClasses) -> float:
    """
    sum_p pi_p p_mu ln mu_p + sum_{p stab} pi_p p_nu ln nu_p
    + sum_{p unstab} pi_p p_upsilon ln upsilon_p
    """
    mu = gains.mu
    total = 0.0
    for p in range(len(stationary)):
        if not mu[p] > 0:
            raise CertificateError(f"mu_{p + 1} = {mu[p]} is not positive")
        total += stationary[p] * weights.p_mu[p] * math.log(mu[p])
        if mode_classes.is_stabilizable(p):
            gain, w = gains.nu[p], weights.p_nu[p]
            label = "nu"
        else:
            gain, w = gains.upsilon[p], weights.p_upsilon[p]
            label = "upsilon"
        if not gain > 0:
            raise CertificateError(f"{label}_{p + 1} = {gain} is not positive")
        total += stationary[p] * w * math.log(gain)
    return float(total)


# --- Evaluation context ---

class _Problem:
    """
    Everything in the gain formulas that does not depend on the free
    constants. Eigen extremes are taken once at unit scale; scaling the
    pair (P_p, Q_p) by kappa_p scales them linearly.
    """

    def __init__(self, systems: Sequence[ModeLinearSystem], law: switching.SwitchingLaw,
                 cfg: ProtocolConfig, upsilon_threshold: str = "tau"):
        self.cfg = cfg
        self.M = len(systems)
        self.classes, self.systems = prepare_systems(systems, cfg.tau)
        self.Lambdas = protocol.check_growth_condition(self.systems, cfg.tau, cfg.N)
        self.estimates = [protocol.transition_estimates(p, self.systems, law, cfg) for p in range(self.M)]
        self.weights = sojourn_weights(law, cfg.tau, upsilon_threshold)
        self.stationary = switching.stationary(law)
        self.ctmc_stationary = (switching.ctmc_stationary_distribution(law)
                                if isinstance(law, switching.MarkovLaw) else None)

        n = cfg.n
        self.S = [mode_propagator(p, self.systems, self.classes, cfg.tau) for p in range(self.M)]
        self.P0: List[np.ndarray] = []
        self.Q0: List[Optional[np.ndarray]] = []
        for p in range(self.M):
            if self.classes.is_stabilizable(p):
                self.P0.append(mathkit.solve_discrete_lyapunov(self.S[p], np.eye(n)))
                self.Q0.append(np.eye(n))
            else:
                self.P0.append(np.eye(n))
                self.Q0.append(None)

        self.P_ext = [mathkit.sym_eig_extremes(P) for P in self.P0]
        self.lam_Q = np.array([mathkit.sym_eig_extremes(Q).lambda_min if Q is not None else math.nan
                               for Q in self.Q0])
        self.lam_SQS = np.array([mathkit.sym_eig_extremes(S.T @ Q @ S).lambda_max if Q is not None else math.nan
                                 for S, Q in zip(self.S, self.Q0)])
        self.lam_SPS = np.array([mathkit.sym_eig_extremes(S.T @ P @ S).lambda_max
                                 for S, P in zip(self.S, self.P0)])
        self.lam_pair = np.array([[mathkit.sym_eig_extremes(est.S_tilde.T @ self.P0[q] @ est.S_tilde).lambda_max
                                   for q in range(self.M)] for est in self.estimates])
        self.chi = np.array([est.chi for est in self.estimates])
        self.psi = np.array([est.psi for est in self.estimates])

    def gains(self, rho, alpha, beta, alpha_pair, beta_pair, kappa) -> ModeGains:
        M, n, N = self.M, self.cfg.n, self.cfg.N
        nan = np.full(M, math.nan)
        nu, alpha1, beta1 = nan.copy(), nan.copy(), nan.copy()
        upsilon, alpha2, beta2 = nan.copy(), nan.copy(), nan.copy()
        for p in range(M):
            k, ext = kappa[p], self.P_ext[p]
            if self.classes.is_stabilizable(p):
                nu[p], alpha1[p], beta1[p] = _nu_terms(
                    k * self.lam_Q[p], k * ext.lambda_max, k * ext.lambda_min, k * self.lam_SQS[p],
                    alpha[p], rho[p], self.Lambdas[p], n, N)
            else:
                upsilon[p], alpha2[p], beta2[p] = _upsilon_terms(
                    k * self.lam_SPS[p], k * ext.lambda_min, beta[p], rho[p], self.Lambdas[p], n, N)
        mu_pair, alpha3, beta3 = np.zeros((M, M)), np.zeros((M, M)), np.zeros((M, M))
        for p in range(M):
            for q in range(M):
                mu_pair[p, q], alpha3[p, q], beta3[p, q] = _mu_terms(
                    kappa[q] * self.lam_pair[p, q], kappa[p] * self.P_ext[p].lambda_min,
                    alpha_pair[p, q], beta_pair[p, q], rho[p], rho[q],
                    self.chi[p], self.psi[p], n, N)
        return ModeGains(nu, upsilon, mu_pair, alpha1, beta1, alpha2, beta2, alpha3, beta3)

    def balanced(self, rho: np.ndarray, kappa: np.ndarray) -> Dict[str, np.ndarray]:
        """Best alpha, beta and pair constants for the given rho and kappa."""
        M, n = self.M, self.cfg.n
        q_fac = _quant_factor(self.cfg.N)
        d = self.Lambdas ** 2 / self.cfg.N ** 2
        alpha, beta = np.ones(M), np.ones(M)
        for p in range(M):
            ext = self.P_ext[p]
            if self.classes.is_stabilizable(p):
                alpha[p] = balance_nu(self.lam_Q[p] / ext.lambda_max, self.lam_SQS[p] / ext.lambda_min,
                                      n * kappa[p] * self.lam_SQS[p] * q_fac / rho[p], d[p])
            else:
                beta[p] = balance_upsilon(self.lam_SPS[p] / ext.lambda_min,
                                          n * kappa[p] * self.lam_SPS[p] * q_fac / rho[p], d[p])
        alpha_pair, beta_pair = np.ones((M, M)), np.ones((M, M))
        for p in range(M):
            scale = kappa[p] * self.P_ext[p].lambda_min
            for q in range(M):
                lam = kappa[q] * self.lam_pair[p, q]
                alpha_pair[p, q], beta_pair[p, q] = balance_mu(
                    2.0 * lam / scale, rho[q] * self.chi[p] ** 2 / scale,
                    2.0 * n * lam * q_fac / rho[p], rho[q] * self.psi[p] ** 2 / rho[p])
        return dict(rho=np.asarray(rho, dtype=float), alpha=alpha, beta=beta,
                    alpha_pair=alpha_pair, beta_pair=beta_pair, kappa=np.asarray(kappa, dtype=float))

    def condition(self, gains: ModeGains) -> float:
        return condition_value(gains, self.weights, self.stationary, self.classes)

    def params(self, rho, alpha, beta, alpha_pair, beta_pair, kappa) -> CertificateParams:
        return CertificateParams(
            rho=np.array(rho), alpha=np.array(alpha), beta=np.array(beta),
            alpha_pair=np.array(alpha_pair), beta_pair=np.array(beta_pair),
            P=[k * P for k, P in zip(kappa, self.P0)],
            Q=[k * Q if Q is not None else None for k, Q in zip(kappa, self.Q0)],
        )

    def report(self, gains: ModeGains, value: float, params: CertificateParams, evaluations: int) -> CertificateReport:
        return CertificateReport(
            gains=gains, weights=self.weights, stationary=self.stationary, condition_value=value,
            data_rate=protocol.data_rate(self.cfg), params=params, mode_classes=self.classes,
            Lambdas=self.Lambdas, chi=self.chi, psi=self.psi, tau=self.cfg.tau, N=self.cfg.N,
            strategy=self.cfg.worst_strategy, evaluations=evaluations, ctmc_stationary=self.ctmc_stationary,
        )


# --- Parameter search ---

def _balance_root(a2: float, a1: float, a0: float) -> float:
    """Positive root of a2 x^2 + a1 x - a0 = 0 for a2, a0 > 0."""
    disc = math.sqrt(a1 * a1 + 4.0 * a2 * a0)
    if a1 >= 0:
        return 2.0 * a0 / (a1 + disc)
    return (disc - a1) / (2.0 * a2)


def balance_nu(a: float, b: float, c: float, d: float) -> float:
    """
    alpha minimizing max(1 - a + b alpha, c (1 + 1/alpha) + d): the first
    branch grows and the second falls with alpha, so they meet at the optimum.
    """
    return _balance_root(b, 1.0 - a - c - d, c)


def balance_upsilon(s: float, c: float, d: float) -> float:
    """beta minimizing max(s (1 + beta), c (1 + 1/beta) + d)."""
    return _balance_root(s, s - c - d, c)


def balance_mu(A: float, B: float, C: float, D: float) -> Tuple[float, float]:
    """
    (alpha_pq, beta_pq) minimizing
    max(A (1 + beta) + B (1 + alpha), C (1 + 1/beta) + D (1 + 1/alpha)).
    Both branches meet at the optimum with alpha = s sqrt(D/B) and
    beta = s sqrt(C/A) for a common scale s.
    """
    if A <= 0 or C <= 0:
        A = C = 0.0
    if B <= 0 or D <= 0:
        B = D = 0.0
    K = math.sqrt(A * C) + math.sqrt(B * D)
    if K == 0:
        return 1.0, 1.0
    s = _balance_root(K, A + B - C - D, K)
    alpha = s * math.sqrt(D / B) if B > 0 else 1.0
    beta = s * math.sqrt(C / A) if A > 0 else 1.0
    return alpha, beta


class _Coordinates:
    """
    Log10 coordinates of rho_p and kappa_p. kappa_1 stays at one: scaling
    every rho and kappa by the same factor leaves all gains unchanged.
    """

    def __init__(self, M: int):
        self.M = M

    def __len__(self) -> int:
        return 2 * self.M - 1

    def unpack(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        M = self.M
        rho = 10.0 ** np.asarray(x[:M], dtype=float)
        kappa = np.ones(M)
        kappa[1:] = 10.0 ** np.asarray(x[M:], dtype=float)
        return rho, kappa


class _BudgetExhausted(Exception):
    pass


def optimize_params(systems: Sequence[ModeLinearSystem], law: switching.SwitchingLaw, cfg: ProtocolConfig,
                    budget: int = DEFAULT_BUDGET, upsilon_threshold: str = "tau") -> Tuple[CertificateParams, CertificateReport]:
    """
    Searches rho and kappa in log10 space; alpha, beta and the pair
    constants follow in closed form (_Problem.balanced).

    Stages, all deterministic and cut off by the evaluation budget:
    a scan of each coordinate over 10^-3..10^3 from all-ones, Nelder-Mead
    and Powell from the best point, then +/- coordinate steps halved down
    to 1/64 decade.
    """
    if budget < 1:
        raise CertificateError(f"budget must be >= 1, got {budget}")
    problem = _Problem(systems, law, cfg, upsilon_threshold)
    coords = _Coordinates(problem.M)

    evaluations = 0
    x = np.zeros(len(coords))
    best = math.inf

    def better(value: float) -> bool:
        if not math.isfinite(best):
            return value < best
        return value < best - CONDITION_TOL * abs(best)

    def evaluate(trial: np.ndarray) -> float:
        nonlocal evaluations, x, best
        if evaluations >= budget:
            raise _BudgetExhausted()
        evaluations += 1
        trial = np.clip(np.asarray(trial, dtype=float), -LOG_LIMIT, LOG_LIMIT)
        try:
            value = problem.condition(problem.gains(**problem.balanced(*coords.unpack(trial))))
        except CertificateError:
            value = math.inf
        if not math.isfinite(value):
            value = math.inf
        if better(value):
            x, best = trial.copy(), value
        return value

    def smooth(trial: np.ndarray) -> float:
        return min(evaluate(trial), PENALTY)

    try:
        evaluate(x)

        # stage 1: absolute grid scan per coordinate
        improved = True
        while improved:
            improved = False
            for i in range(len(coords)):
                for g in LOG_GRID:
                    if g == x[i]:
                        continue
                    trial = x.copy()
                    trial[i] = g
                    before = best
                    evaluate(trial)
                    improved = improved or best < before

        # stage 2: simplex and direction-set searches from the best point
        start = x.copy()
        simplex = np.vstack([start] + [start + SIMPLEX_STEP * e for e in np.eye(len(coords))])
        optimize.minimize(smooth, start, method='Nelder-Mead',
                          options={'initial_simplex': simplex, 'xatol': MIN_LOG_STEP, 'fatol': CONDITION_TOL,
                                   'maxfev': budget, 'maxiter': budget})
        optimize.minimize(smooth, x.copy(), method='Powell',
                          options={'xtol': MIN_LOG_STEP, 'ftol': CONDITION_TOL, 'maxfev': budget})

        # stage 3: local refinement
        step = 0.5
        while step >= MIN_LOG_STEP:
            improved = False
            for i in range(len(coords)):
                for direction in (1.0, -1.0):
                    trial = x.copy()
                    trial[i] = float(np.clip(trial[i] + direction * step, -LOG_LIMIT, LOG_LIMIT))
                    if trial[i] == x[i]:
                        continue
                    before = best
                    evaluate(trial)
                    improved = improved or best < before
            if not improved:
                step /= 2.0
    except _BudgetExhausted:
        pass

    values = problem.balanced(*coords.unpack(x))
    params = problem.params(**values)
    gains = problem.gains(**values)
    value = problem.condition(gains)
    logger.debug(f"optimizer used {evaluations} evaluations, condition value {value:.6g}")
    return params, problem.report(gains, value, params, evaluations)


def certify(systems: Sequence[ModeLinearSystem], law: switching.SwitchingLaw, cfg: ProtocolConfig,
            budget: int = DEFAULT_BUDGET, upsilon_threshold: str = "tau") -> CertificateReport:
    _, report = optimize_params(systems, law, cfg, budget, upsilon_threshold)
    if report.ctmc_stationary is not None:
        gap = mathkit.inf_norm(report.ctmc_stationary - report.stationary)
        if gap > 1e-6:
            logger.info(f"jump-chain pi {np.round(report.stationary, 4).tolist()} differs from "
                        f"time-stationary pi {np.round(report.ctmc_stationary, 4).tolist()}; the condition uses the jump chain")
    return report


# --- Tau sweep ---

class TauSweepPoint(NamedTuple):
    tau: float
    condition_value: float
    passes: bool
    data_rate: float
    note: str


def parse_sweep(text: str) -> np.ndarray:
    """'lo:hi:steps' -> linearly spaced taus."""
    try:
        lo, hi, steps = text.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise CertificateError(f"tau sweep must look like lo:hi:steps, got '{text}'")
    if not (0 < lo <= hi) or steps < 1:
        raise CertificateError(f"tau sweep needs 0 < lo <= hi and steps >= 1, got '{text}'")
    return np.linspace(lo, hi, steps)


def tau_sweep(systems: Sequence[ModeLinearSystem], law: switching.SwitchingLaw, cfg: ProtocolConfig,
              taus: Sequence[float], budget: int = DEFAULT_BUDGET, upsilon_threshold: str = "tau",
              certify_fn: Optional[Callable[..., CertificateReport]] = None) -> List[TauSweepPoint]:
    certify_fn = certify_fn or certify
    points = []
    for tau in tqdm(taus, desc="Sweeping tau", unit="tau"):
        trial = ProtocolConfig(float(tau), cfg.N, cfg.n, cfg.M, cfg.E0, cfg.xstar0,
                               cfg.worst_strategy, cfg.grid_points, cfg.max_switches)
        rate = protocol.data_rate(trial)
        try:
            report = certify_fn(systems, law, trial, budget, upsilon_threshold)
        except protocol.AssumptionViolation as e:
            points.append(TauSweepPoint(float(tau), math.nan, False, rate, str(e)))
            continue
        points.append(TauSweepPoint(float(tau), report.condition_value, report.passes, rate, ""))
    return points


def passing_range(points: Sequence[TauSweepPoint]) -> Optional[Tuple[float, float]]:
    taus = [pt.tau for pt in points if pt.passes]
    if not taus:
        return None
    return min(taus), max(taus)


# --- Rendering ---

def _maybe(v: float) -> Optional[float]:
    return None if v is None or math.isnan(v) else float(v)


def report_rows(report: CertificateReport) -> List[dict]:
    """One row per mode, 1-based labels."""
    rows = []
    g, w = report.gains, report.weights
    for p in range(len(report.stationary)):
        stab = report.mode_classes.is_stabilizable(p)
        rows.append({
            'mode': p + 1,
            'stabilizable': stab,
            'pi': float(report.stationary[p]),
            'pi_time': _maybe(report.ctmc_stationary[p]) if report.ctmc_stationary is not None else None,
            'p_nu': float(w.p_nu[p]),
            'p_upsilon': float(w.p_upsilon[p]),
            'p_mu': float(w.p_mu[p]),
            'Lambda': float(report.Lambdas[p]),
            'chi': float(report.chi[p]),
            'psi': float(report.psi[p]),
            'nu': _maybe(g.nu[p]),
            'upsilon': _maybe(g.upsilon[p]),
            'mu': float(g.mu[p]),
            'rho': float(report.params.rho[p]),
            'alpha': float(report.params.alpha[p]) if stab else None,
            'beta': None if stab else float(report.params.beta[p]),
        })
    return rows


def report_document(report: CertificateReport) -> dict:
    return {
        'passes': bool(report.passes),
        'condition_value': float(report.condition_value),
        'tau': float(report.tau),
        'N': int(report.N),
        'data_rate': float(report.data_rate),
        'strategy': report.strategy,
        'evaluations': int(report.evaluations),
        'stabilizable': [p + 1 for p in report.mode_classes.stabilizable],
        'unstabilizable': [p + 1 for p in report.mode_classes.unstabilizable],
        'modes': report_rows(report),
        'mu_pair': [[float(v) for v in row] for row in report.gains.mu_pair],
    }
