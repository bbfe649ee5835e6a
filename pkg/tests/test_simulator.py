import logging
import math

import numpy as np
import pytest

import mathkit
import protocol
import simulator
import switching
from protocol import ModeLinearSystem, ProtocolConfig
from simulator import Scenario

MODE_1 = ModeLinearSystem([[1.0, 0.0], [0.0, -1.0]], [[1.0], [0.0]], [[-2.0, 0.0]])
MODE_2 = ModeLinearSystem([[1.0, 0.0], [0.0, -1.0]], [[0.0], [1.0]], [[0.0, 0.0]])
MODE_3 = ModeLinearSystem([[0.0, 1.0], [-1.0, 0.0]], [[0.0], [1.0]], [[0.0, -4.0]])
DECAY = ModeLinearSystem([[-1.0]], [[0.0]], [[0.0]])

GENERATOR = np.array([
    [-0.050, 0.010, 0.040],
    [0.075, -0.150, 0.075],
    [0.039375, 0.005625, -0.045],
])


def cfg_for(n, M, E0=10.0, **kwargs):
    return ProtocolConfig(tau=0.1, N=kwargs.pop('N', 10), n=n, M=M, E0=E0, xstar0=(0.0,) * n, **kwargs)


def single_mode(system, x0, horizon, **kwargs):
    E0 = kwargs.pop('E0', 10.0)
    return Scenario([system], switching.FixedLaw(), cfg_for(system.n, 1, E0=E0), np.array(x0, dtype=float),
                    horizon, **kwargs)


@pytest.fixture
def example_scenario():
    return Scenario([MODE_1, MODE_2, MODE_3], switching.MarkovLaw(GENERATOR), cfg_for(2, 3),
                    np.array([-5.0, 8.9]), 2.0)


# --- Scenario validation ---

def test_scenario_rejects_mismatched_law():
    with pytest.raises(ValueError, match="switching law"):
        Scenario([MODE_1, MODE_2], switching.FixedLaw(), cfg_for(2, 2), np.zeros(2), 1.0)


@pytest.mark.parametrize("changes", [
    {'integrator': 'rk4'},
    {'integrator': 'fixed_step', 'dt': 0.03},
    {'integrator': 'fixed_step', 'dt': 0.2},
    {'record_points': 0},
    {'initial_mode': 1},
])
def test_scenario_rejects_bad_settings(changes):
    with pytest.raises(ValueError):
        single_mode(DECAY, [1.0], 1.0, **changes)


def test_unstabilizing_gain_is_dropped(caplog):
    bad = ModeLinearSystem([[1.0]], [[1.0]], [[0.5]])
    with caplog.at_level(logging.WARNING):
        sc = single_mode(bad, [1.0], 2.0)
    assert np.all(sc.systems[0].K == 0)
    assert "K_1 = 0" in caplog.text
    traj = simulator.simulate(sc)
    assert traj.sample_x[:, 0] == pytest.approx(np.exp(0.1 * np.arange(21)), rel=1e-9)
    assert traj.containment_violations == 0


def test_sample_count():
    assert single_mode(DECAY, [1.0], 1.0).sample_count == 11
    assert single_mode(DECAY, [1.0], 1.05).sample_count == 11
    assert single_mode(DECAY, [1.0], 0.05).sample_count == 1


def test_error_generator_is_change_of_coordinates():
    n = 2
    T = np.block([[np.eye(n), -np.eye(n)], [np.zeros((n, n)), np.eye(n)]])
    for p, q in ((MODE_1, MODE_3), (MODE_3, MODE_2), (MODE_2, MODE_2)):
        expected = T @ protocol.block_generator(p, q) @ np.linalg.inv(T)
        assert np.allclose(simulator.error_block_generator(p, q), expected, atol=1e-14)


# --- Single-mode oracles ---

def test_decay_exponent_is_minus_one():
    traj = simulator.simulate(single_mode(DECAY, [1.0], 5.0))
    assert traj.sample_x[:, 0] == pytest.approx(np.exp(-0.1 * np.arange(51)), rel=1e-12)
    est = simulator.lyapunov_exponent(traj)
    assert est.T == pytest.approx(5.0)
    assert est.exponent == pytest.approx(-1.0, rel=1e-9)
    assert not est.underflow


def test_unstabilizable_mode_grows():
    traj = simulator.simulate(single_mode(MODE_2, [-5.0, 8.9], 50.0))
    est = simulator.lyapunov_exponent(traj)
    assert est.exponent == pytest.approx(1.0, rel=0.05)
    assert traj.overflow_count == 0


def test_no_switch_offsets_follow_open_loop():
    traj = simulator.simulate(single_mode(MODE_1, [-5.0, 8.9], 2.0))
    Phi_open = MODE_1.open_loop_propagator(0.1)
    Phi_closed = MODE_1.closed_loop_propagator(0.1)
    log = traj.quantizer_log
    for k in range(len(log) - 1):
        assert np.allclose(log[k + 1].xstar, Phi_closed @ traj.centers[k], atol=1e-12)
        d_next = traj.sample_x[k + 1] - log[k + 1].xstar
        assert np.allclose(d_next, Phi_open @ (traj.sample_x[k] - traj.centers[k]), atol=1e-9)


def test_containment_without_switching():
    traj = simulator.simulate(single_mode(MODE_1, [-5.0, 8.9], 5.0))
    assert traj.overflow_count == 0
    assert traj.containment_violations == 0
    assert max(r.containment for r in traj.quantizer_log) <= 1.0 + 1e-9
    diag = simulator.intersample_bound_check(traj, [MODE_1], cfg_for(2, 1))
    assert diag.checked == len(traj.t)
    assert diag.violations == 0


def test_record_points_per_interval():
    traj = simulator.simulate(single_mode(DECAY, [1.0], 1.0))
    assert len(traj.t) == 11 + 10 * 9
    assert np.all(np.diff(traj.t) > 0)
    assert traj.t[-1] == 1.0
    assert list(traj.sample_index[:10]) == [0] * 10


def test_horizon_between_samples_is_recorded():
    traj = simulator.simulate(single_mode(DECAY, [1.0], 1.05))
    assert len(traj.quantizer_log) == 11
    assert traj.t[-1] == 1.05
    assert traj.x[-1, 0] == pytest.approx(math.exp(-1.05), rel=1e-12)


def test_fixed_step_agrees_with_exact():
    exact = simulator.simulate(single_mode(DECAY, [1.0], 2.0))
    euler = simulator.simulate(single_mode(DECAY, [1.0], 2.0, integrator='fixed_step', dt=1e-4))
    assert exact.sample_x.shape == euler.sample_x.shape
    assert np.max(np.abs(exact.sample_x - euler.sample_x)) <= 1e-3


# --- Overflow handling ---

def test_overflow_is_unsound_under_bound_strategy():
    sc = single_mode(DECAY, [5.0], 1.0, E0=1.0)
    with pytest.raises(simulator.SoundnessError):
        simulator.simulate(sc)


def test_overflow_recovers_when_not_strict():
    sc = single_mode(DECAY, [5.0], 1.0, E0=1.0)
    traj = simulator.simulate(sc, strict=False)
    assert traj.overflow_count >= 1
    assert traj.quantizer_log[0].box_index == 0
    assert traj.quantizer_log[1].E == 2.0
    assert traj.containment_violations >= traj.overflow_count


# --- Switching ---

def test_switch_flags_use_open_intervals(example_scenario):
    path = switching.SwitchingPath(np.array([0.0, 0.25, 0.5]), np.array([0, 2, 0]), 1.0)
    sc = Scenario(example_scenario.systems, example_scenario.law, example_scenario.protocol,
                  example_scenario.x0, 1.0)
    traj = simulator.simulate(sc, path=path, strict=False)
    flags = [r.switch_flag for r in traj.quantizer_log]
    modes = [r.mode for r in traj.quantizer_log]
    assert flags == [False, False, True, False, False, False, False, False, False, False, False]
    assert modes[:6] == [0, 0, 0, 2, 2, 0]
    assert traj.path is path


def test_same_seed_same_trajectory(example_scenario):
    a = simulator.simulate(example_scenario, strict=False)
    b = simulator.simulate(example_scenario, strict=False)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.centers, b.centers)
    assert [r.box_index for r in a.quantizer_log] == [r.box_index for r in b.quantizer_log]


def test_example_shapes(example_scenario):
    traj = simulator.simulate(example_scenario, strict=False)
    assert traj.x.shape == traj.xhat.shape == (len(traj.t), 2)
    assert traj.u.shape == (len(traj.t), 1)
    assert traj.sample_x.shape == (example_scenario.sample_count, 2)
    assert set(np.unique(traj.mode)) <= {0, 1, 2}


# --- Lyapunov exponent ---

def make_traj(xs, ts):
    xs = np.array(xs, dtype=float).reshape(len(ts), -1)
    path = switching.SwitchingPath(np.zeros(1), np.zeros(1, dtype=int), float(ts[-1]))
    return simulator.Trajectory(np.array(ts, dtype=float), xs, xs, np.zeros(len(ts), dtype=int),
                                np.zeros((len(ts), 1)), np.zeros(len(ts), dtype=int), [], path,
                                xs[:1], xs[:1], float(ts[-1]))


def test_exponent_rejects_zero_start():
    with pytest.raises(ValueError):
        simulator.lyapunov_exponent(make_traj([[0.0], [1.0]], [0.0, 1.0]))


def test_exponent_underflow_is_clamped():
    est = simulator.lyapunov_exponent(make_traj([[1.0], [0.0]], [0.0, 2.0]))
    assert est.underflow
    assert est.final_norm == math.ulp(0.0)
    assert est.exponent == pytest.approx(math.log(math.ulp(0.0)) / 2.0)


# --- Monte Carlo ---

def test_monte_carlo_runs_consecutive_seeds(example_scenario):
    summary = simulator.monte_carlo(example_scenario, 3, progress=False)
    assert [r.seed for r in summary.runs] == [0, 1, 2]
    stats = summary.stats()
    assert stats['runs'] == 3
    assert stats['min'] <= stats['median'] <= stats['max']
    assert 0.0 <= summary.fraction_negative <= 1.0
    single = simulator._run_seed(example_scenario, 1, protocol.build_tables(
        example_scenario.systems, example_scenario.law, example_scenario.protocol))
    assert single.exponent == summary.runs[1].exponent


def test_monte_carlo_parallel_matches_serial(example_scenario):
    serial = simulator.monte_carlo(example_scenario, 2, progress=False)
    parallel = simulator.monte_carlo(example_scenario, 2, workers=2, progress=False)
    assert np.array_equal(serial.exponents, parallel.exponents)


def test_monte_carlo_rejects_zero_runs(example_scenario):
    with pytest.raises(ValueError):
        simulator.monte_carlo(example_scenario, 0)


def test_stable_example_mode_mix_decays():
    sc = Scenario([MODE_1, MODE_3], switching.MarkovLaw(np.array([[-0.05, 0.05], [0.05, -0.05]])),
                  cfg_for(2, 2), np.array([-5.0, 8.9]), 20.0)
    summary = simulator.monte_carlo(sc, 2, progress=False)
    assert summary.fraction_negative == 1.0
    assert mathkit.inf_norm(summary.exponents) < 10.0


# --- Containment under switching ---

def random_switching_scenario(n, M, seed, horizon=3.0):
    rng = np.random.default_rng(seed)
    systems = [ModeLinearSystem(rng.uniform(-1.0, 1.0, (n, n)), rng.uniform(-1.0, 1.0, (n, 1)),
                                rng.uniform(-1.0, 1.0, (1, n))) for _ in range(M)]
    off = rng.uniform(0.5, 2.0, (M, M))
    np.fill_diagonal(off, 0.0)
    generator = off - np.diag(off.sum(axis=1))
    return Scenario(systems, switching.MarkovLaw(generator), cfg_for(n, M, E0=2.0),
                    rng.uniform(-1.0, 1.0, n), horizon, seed=seed)


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("M", [2, 3])
def test_random_switching_keeps_containment(n, M):
    jumps = 0
    for seed in range(4):
        sc = random_switching_scenario(n, M, seed)
        traj = simulator.simulate(sc, strict=True)
        assert traj.overflow_count == 0
        assert traj.containment_violations == 0
        assert max(r.containment for r in traj.quantizer_log) <= 1.0 + 1e-9
        jumps += len(traj.path) - 1
    assert jumps > 0


def test_example_switching_is_sound_when_strict(example_scenario):
    sc = Scenario(example_scenario.systems, example_scenario.law, example_scenario.protocol,
                  example_scenario.x0, 30.0, seed=3)
    traj = simulator.simulate(sc, strict=True)
    assert traj.containment_violations == 0
    assert traj.overflow_count == 0


def test_example_monte_carlo_all_runs_decay(example_scenario):
    sc = Scenario(example_scenario.systems, example_scenario.law, example_scenario.protocol,
                  example_scenario.x0, 100.0)
    summary = simulator.monte_carlo(sc, 20, progress=False)
    assert len(summary.runs) == 20
    assert summary.fraction_negative == 1.0
    assert summary.violations == 0
    assert summary.overflows == 0
