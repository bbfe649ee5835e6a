"""
YAML scenario documents: strict loading, validation with dotted field
paths, and dumping of the effective configuration.
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

import certificate
import mathkit
import protocol
import simulator
import switching

logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")
BUNDLED_CONFIGS = {"paper_example": "paper_example.yaml"}

SECTIONS = ("modes", "law", "protocol", "experiment", "certificate")
LAW_KINDS = ("markov", "semimarkov", "fixed")
SOJOURN_KEYS = {'exponential': ('rate',), 'weibull': ('shape', 'scale'), 'uniform': ('lo', 'hi')}

PROTOCOL_DEFAULTS = {'worst_strategy': 'bound', 'grid_points': 8, 'max_switches': 2}
EXPERIMENT_DEFAULTS = {
    'horizon': 100.0, 'integrator': 'event_exact', 'dt': simulator.DEFAULT_DT, 'seed': 0,
    'runs': 20, 'record_points': 10, 'threshold': 1.0,
}
CERTIFICATE_DEFAULTS = {'budget': certificate.DEFAULT_BUDGET, 'upsilon_threshold': 'tau', 'strategy': None}


class ConfigError(ValueError):
    """Invalid configuration; `path` is the dotted location of the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class CertificateSettings:
    budget: int = certificate.DEFAULT_BUDGET
    upsilon_threshold: str = "tau"
    strategy: Optional[str] = None


@dataclass(frozen=True, eq=False)
class LoadedConfig:
    scenario: simulator.Scenario
    certificate: CertificateSettings
    runs: int
    threshold: float
    source: str = ""


# --- Field readers ---

def _mapping(value: Any, path: str, allowed: tuple, required: tuple = ()) -> Dict[str, Any]:
    if not isinstance(value, dict):
        raise ConfigError(path, "expected a mapping")
    unknown = [k for k in value if k not in allowed]
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else str(unknown[0]), "unknown key")
    for key in required:
        if key not in value:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required key")
    return value


def _number(value: Any, path: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    if positive and value <= 0:
        raise ConfigError(path, f"must be > 0, got {value}")
    return value


def _integer(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return value


def _choice(value: Any, path: str, choices: tuple) -> str:
    if value not in choices:
        raise ConfigError(path, f"must be one of {list(choices)}, got {value!r}")
    return value


def _matrix(value: Any, path: str) -> np.ndarray:
    try:
        return mathkit.as_matrix(value, path)
    except mathkit.MatrixError as e:
        raise ConfigError(path, str(e).split(": ", 1)[-1])


def _vector(value: Any, path: str, size: int) -> np.ndarray:
    if not isinstance(value, list) or len(value) != size:
        raise ConfigError(path, f"expected a list of {size} numbers")
    return np.array([_number(v, f"{path}[{i}]") for i, v in enumerate(value)])


# --- Sections ---

def _parse_modes(doc: Any) -> List[protocol.ModeLinearSystem]:
    if not isinstance(doc, list) or not doc:
        raise ConfigError("modes", "expected a non-empty list of {A, B, K}")
    systems = []
    for i, entry in enumerate(doc):
        path = f"modes[{i}]"
        _mapping(entry, path, ('A', 'B', 'K'), ('A', 'B', 'K'))
        A, B, K = (_matrix(entry[key], f"{path}.{key}") for key in ('A', 'B', 'K'))
        try:
            systems.append(protocol.ModeLinearSystem(A, B, K))
        except mathkit.MatrixError as e:
            raise ConfigError(path, str(e))
    n, m = systems[0].n, systems[0].m
    for i, s in enumerate(systems):
        if (s.n, s.m) != (n, m):
            raise ConfigError(f"modes[{i}]", f"dimensions {(s.n, s.m)} differ from mode 1 {(n, m)}")
    return systems


def _parse_sojourn(entry: Any, path: str) -> Optional[switching.SojournDistribution]:
    if entry is None:
        return None
    family = _mapping(entry, path, ('family', 'rate', 'shape', 'scale', 'lo', 'hi'), ('family',))['family']
    _choice(family, f"{path}.family", switching.SOJOURN_FAMILIES)
    keys = SOJOURN_KEYS[family]
    _mapping(entry, path, ('family',) + keys, ('family',) + keys)
    params = tuple(_number(entry[k], f"{path}.{k}") for k in keys)
    try:
        return switching.SojournDistribution(family, params)
    except switching.InvalidLawError as e:
        raise ConfigError(path, str(e))


def _parse_law(doc: Any, M: int):
    _mapping(doc, "law", ('kind', 'generator', 'jump_matrix', 'sojourn', 'initial_mode'), ('kind',))
    kind = _choice(doc['kind'], "law.kind", LAW_KINDS)
    initial_mode = _integer(doc.get('initial_mode', 1), "law.initial_mode", 1)
    if initial_mode > M:
        raise ConfigError("law.initial_mode", f"mode {initial_mode} outside [1, {M}]")

    if kind == "fixed":
        _mapping(doc, "law", ('kind', 'initial_mode'))
        if M != 1:
            raise ConfigError("law.kind", f"a fixed law needs exactly one mode, got {M}")
        return switching.FixedLaw(), initial_mode - 1

    if kind == "markov":
        _mapping(doc, "law", ('kind', 'generator', 'initial_mode'), ('generator',))
        G = _matrix(doc['generator'], "law.generator")
        if G.shape != (M, M):
            raise ConfigError("law.generator", f"expected {M}x{M}, got {G.shape[0]}x{G.shape[1]}")
        try:
            return switching.MarkovLaw(G), initial_mode - 1
        except switching.InvalidLawError as e:
            raise ConfigError("law.generator", str(e))

    _mapping(doc, "law", ('kind', 'jump_matrix', 'sojourn', 'initial_mode'), ('jump_matrix', 'sojourn'))
    L = _matrix(doc['jump_matrix'], "law.jump_matrix")
    if L.shape != (M, M):
        raise ConfigError("law.jump_matrix", f"expected {M}x{M}, got {L.shape[0]}x{L.shape[1]}")
    table = doc['sojourn']
    if not isinstance(table, list) or len(table) != M or any(not isinstance(r, list) or len(r) != M for r in table):
        raise ConfigError("law.sojourn", f"expected a {M}x{M} table (null where no transition)")
    sojourn = [[_parse_sojourn(table[i][j], f"law.sojourn[{i}][{j}]") for j in range(M)] for i in range(M)]
    try:
        return switching.SemiMarkovLaw(L, sojourn), initial_mode - 1
    except switching.InvalidLawError as e:
        raise ConfigError("law", str(e))


def _parse_protocol(doc: Any, n: int, M: int) -> protocol.ProtocolConfig:
    allowed = ('tau', 'N', 'E0', 'xstar0', 'worst_strategy', 'grid_points', 'max_switches')
    _mapping(doc, "protocol", allowed, ('tau', 'N', 'E0'))
    merged = {**PROTOCOL_DEFAULTS, **doc}
    tau = _number(merged['tau'], "protocol.tau", positive=True)
    N = _integer(merged['N'], "protocol.N", 2)
    E0 = _number(merged['E0'], "protocol.E0", positive=True)
    xstar0 = _vector(merged.get('xstar0', [0.0] * n), "protocol.xstar0", n)
    strategy = _choice(merged['worst_strategy'], "protocol.worst_strategy", protocol.WORST_STRATEGIES)
    grid_points = _integer(merged['grid_points'], "protocol.grid_points", 2)
    max_switches = _integer(merged['max_switches'], "protocol.max_switches", 0)
    try:
        return protocol.ProtocolConfig(tau, N, n, M, E0, tuple(xstar0), strategy, grid_points, max_switches)
    except protocol.ProtocolError as e:
        raise ConfigError("protocol", str(e))


def _parse_experiment(doc: Any, n: int) -> Dict[str, Any]:
    _mapping(doc, "experiment", tuple(EXPERIMENT_DEFAULTS) + ('x0',), ('x0',))
    merged = {**EXPERIMENT_DEFAULTS, **doc}
    return {
        'x0': _vector(merged['x0'], "experiment.x0", n),
        'horizon': _number(merged['horizon'], "experiment.horizon", positive=True),
        'integrator': _choice(merged['integrator'], "experiment.integrator", simulator.INTEGRATORS),
        'dt': _number(merged['dt'], "experiment.dt", positive=True),
        'seed': _integer(merged['seed'], "experiment.seed", 0),
        'runs': _integer(merged['runs'], "experiment.runs", 1),
        'record_points': _integer(merged['record_points'], "experiment.record_points", 1),
        'threshold': _number(merged['threshold'], "experiment.threshold"),
    }


def _parse_certificate(doc: Any) -> CertificateSettings:
    _mapping(doc, "certificate", tuple(CERTIFICATE_DEFAULTS))
    merged = {**CERTIFICATE_DEFAULTS, **doc}
    strategy = merged['strategy']
    if strategy is not None:
        _choice(strategy, "certificate.strategy", protocol.WORST_STRATEGIES)
    return CertificateSettings(
        budget=_integer(merged['budget'], "certificate.budget", 1),
        upsilon_threshold=_choice(merged['upsilon_threshold'], "certificate.upsilon_threshold",
                                  certificate.UPSILON_THRESHOLDS),
        strategy=strategy,
    )


# --- Documents ---

def parse_config(doc: Any, source: str = "") -> LoadedConfig:
    _mapping(doc, "", SECTIONS, ('modes', 'law', 'protocol', 'experiment'))
    systems = _parse_modes(doc['modes'])
    n, M = systems[0].n, len(systems)
    law, initial_mode = _parse_law(doc['law'], M)
    cfg = _parse_protocol(doc['protocol'], n, M)
    try:
        protocol.check_growth_condition(systems, cfg.tau, cfg.N)
    except protocol.AssumptionViolation as e:
        raise ConfigError("protocol.N", str(e))
    exp = _parse_experiment(doc['experiment'], n)
    cert = _parse_certificate(doc.get('certificate') or {})
    try:
        scenario = simulator.Scenario(systems, law, cfg, exp['x0'], exp['horizon'], exp['integrator'],
                                      exp['dt'], exp['seed'], initial_mode, exp['record_points'])
    except ValueError as e:
        raise ConfigError("experiment", str(e))
    return LoadedConfig(scenario, cert, exp['runs'], exp['threshold'], source)


def resolve_config_path(name: str) -> str:
    """Bundled names (e.g. 'paper_example') map into configs/; anything else is a path."""
    if name in BUNDLED_CONFIGS and not os.path.exists(name):
        return os.path.join(CONFIG_DIR, BUNDLED_CONFIGS[name])
    return name


def load_config(path: str) -> LoadedConfig:
    """Raises OSError when unreadable, ConfigError when malformed."""
    resolved = resolve_config_path(path)
    with open(resolved, 'r', encoding='utf-8') as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError("", f"YAML parse error in {resolved}: {e}")
    loaded = parse_config(doc, resolved)
    logger.info(f"Loaded config {resolved}: {loaded.scenario.law.M} mode(s), n={loaded.scenario.protocol.n}")
    return loaded


def _rows(A: np.ndarray) -> List[List[float]]:
    return [[float(v) for v in row] for row in np.atleast_2d(A)]


def config_document(loaded: LoadedConfig) -> Dict[str, Any]:
    """The effective document: every default filled in."""
    sc = loaded.scenario
    cfg = sc.protocol
    law = sc.law
    law_doc: Dict[str, Any]
    if isinstance(law, switching.MarkovLaw):
        law_doc = {'kind': 'markov', 'generator': _rows(law.generator)}
    elif isinstance(law, switching.SemiMarkovLaw):
        law_doc = {
            'kind': 'semimarkov',
            'jump_matrix': _rows(law.jump_matrix),
            'sojourn': [[d.to_dict() if d is not None else None for d in row] for row in law.sojourn],
        }
    else:
        law_doc = {'kind': 'fixed'}
    law_doc['initial_mode'] = sc.initial_mode + 1
    return {
        'modes': [{'A': _rows(s.A), 'B': _rows(s.B), 'K': _rows(s.K)} for s in sc.systems],
        'law': law_doc,
        'protocol': {
            'tau': cfg.tau, 'N': cfg.N, 'E0': cfg.E0, 'xstar0': list(cfg.xstar0),
            'worst_strategy': cfg.worst_strategy, 'grid_points': cfg.grid_points, 'max_switches': cfg.max_switches,
        },
        'experiment': {
            'x0': [float(v) for v in sc.x0], 'horizon': float(sc.horizon), 'integrator': sc.integrator,
            'dt': float(sc.dt), 'seed': sc.seed, 'runs': loaded.runs,
            'record_points': sc.record_points, 'threshold': float(loaded.threshold),
        },
        'certificate': {
            'budget': loaded.certificate.budget,
            'upsilon_threshold': loaded.certificate.upsilon_threshold,
            'strategy': loaded.certificate.strategy,
        },
    }


def dump_config(loaded: LoadedConfig, output_path: str) -> None:
    directory = os.path.dirname(output_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(output_path, 'w', encoding='utf-8') as f:
        yaml.dump(config_document(loaded), f, sort_keys=False, default_flow_style=False, indent=4)
    logger.info(f"Saved effective config to {output_path}")
