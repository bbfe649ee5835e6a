import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mathkit
import protocol
import switching
from protocol import ModeLinearSystem, ProtocolConfig


@pytest.fixture
def systems():
    return [
        ModeLinearSystem([[1.0, 0.0], [0.0, -1.0]], [[1.0], [0.0]], [[-2.0, 0.0]]),
        ModeLinearSystem([[1.0, 0.0], [0.0, -1.0]], [[0.0], [1.0]], [[0.0, 0.0]]),
        ModeLinearSystem([[0.0, 1.0], [-1.0, 0.0]], [[0.0], [1.0]], [[0.0, -4.0]]),
    ]


@pytest.fixture
def law():
    return switching.MarkovLaw(np.array([
        [-0.050, 0.010, 0.040],
        [0.075, -0.150, 0.075],
        [0.039375, 0.005625, -0.045],
    ]))


@pytest.fixture
def cfg():
    return ProtocolConfig(tau=0.1, N=10, n=2, M=3, E0=10.0, xstar0=(0.0, 0.0))


@pytest.fixture
def tables(systems, law, cfg):
    return protocol.build_tables(systems, law, cfg)


# --- Plant modes ---

def test_mode_shape_validation():
    with pytest.raises(mathkit.MatrixError):
        ModeLinearSystem([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0]], [[0.0, 0.0]])
    with pytest.raises(mathkit.MatrixError):
        ModeLinearSystem([[1.0, 0.0], [0.0, 1.0]], [[1.0], [0.0]], [[0.0]])


def test_block_generator_layout(systems):
    Apq = protocol.block_generator(systems[0], systems[1])
    assert Apq.shape == (4, 4)
    assert np.array_equal(Apq[:2, :2], systems[1].A)
    assert np.array_equal(Apq[:2, 2:], systems[1].B @ systems[0].K)
    assert np.array_equal(Apq[2:, :2], np.zeros((2, 2)))
    assert np.array_equal(Apq[2:, 2:], systems[0].closed_loop())


def test_open_loop_norms(systems):
    Lambdas = protocol.open_loop_norms(systems, 0.1)
    assert Lambdas[0] == pytest.approx(math.exp(0.1), rel=1e-12)
    assert Lambdas[1] == pytest.approx(math.exp(0.1), rel=1e-12)
    assert Lambdas[2] == pytest.approx(math.cos(0.1) + math.sin(0.1), rel=1e-12)


def test_assumption_violation_names_mode():
    fast = ModeLinearSystem([[30.0]], [[1.0]], [[0.0]])
    slow = ModeLinearSystem([[-1.0]], [[1.0]], [[0.0]])
    with pytest.raises(protocol.AssumptionViolation) as err:
        protocol.check_growth_condition([slow, fast], 0.1, 10)
    assert err.value.mode == 1
    assert err.value.Lambda == pytest.approx(math.exp(3.0))
    assert "mode 2" in str(err.value)


# --- Configuration ---

@pytest.mark.parametrize("changes", [
    {'tau': 0.0}, {'tau': float('inf')}, {'N': 1}, {'N': 2.5}, {'E0': -1.0},
    {'xstar0': (0.0,)}, {'worst_strategy': 'exact'}, {'max_switches': -1},
    {'worst_strategy': 'grid_dp', 'grid_points': 1},
])
def test_invalid_protocol_config(changes):
    kwargs = dict(tau=0.1, N=3, n=2, M=3, E0=1.0, xstar0=(0.0, 0.0))
    kwargs.update(changes)
    with pytest.raises(protocol.ProtocolError):
        ProtocolConfig(**kwargs)


def test_even_N_warns(caplog):
    with caplog.at_level(logging.WARNING):
        ProtocolConfig(tau=0.1, N=4, n=1, M=1, E0=1.0, xstar0=(0.0,))
    assert "even" in caplog.text


def test_quantizer_state_rejects_nonpositive_radius():
    with pytest.raises(protocol.ProtocolError):
        protocol.QuantizerState(0, np.zeros(2), 0.0, 0)


# --- Data rate ---

def test_data_rate_of_example(cfg):
    assert protocol.data_rate(cfg) == pytest.approx((math.log2(101) + math.log2(3)) / 0.1, rel=1e-12)
    assert protocol.data_rate(cfg) == pytest.approx(82.43, abs=0.01)
    fmt = cfg.symbol_format
    assert fmt.boxes == 100
    assert fmt.widths == (7, 2)
    assert fmt.bits_per_sample == 9


def test_single_mode_has_no_mode_bits():
    fmt = protocol.SymbolFormat(N=3, n=1, M=1)
    assert fmt.widths == (2, 0)
    assert protocol.data_rate_for(3, 1, 1, 1.0) == pytest.approx(2.0)


def test_minimum_symbols(systems):
    assert protocol.min_symbols_per_dimension(systems, 0.1) == 2
    assert protocol.minimum_data_rate(systems, 0.1) == pytest.approx((math.log2(5) + math.log2(3)) / 0.1)
    unstable = [ModeLinearSystem([[math.log(3.5)]], [[1.0]], [[0.0]])]
    assert protocol.min_symbols_per_dimension(unstable, 1.0) == 4


# --- Quantizer ---

def test_quantizer_worked_example():
    state = protocol.QuantizerState(0, np.zeros(1), 1.0, 0)
    sym = protocol.quantize(np.array([0.5]), state, 3)
    assert sym.box_index == 3
    assert protocol.decode_center(sym, state, 3) == pytest.approx([2.0 / 3.0])


def test_quantizer_boundaries():
    assert protocol.quantize_offset(np.array([1.0]), 1.0, 3, 0).box_index == 3
    assert protocol.quantize_offset(np.array([-1.0]), 1.0, 3, 0).box_index == 1
    assert protocol.quantize_offset(np.array([1.0 + 1e-12]), 1.0, 3, 0).box_index == 3
    assert protocol.quantize_offset(np.array([1.001]), 1.0, 3, 0).box_index == 0
    assert protocol.quantize_offset(np.array([float('nan')]), 1.0, 3, 0).box_index == 0


def test_box_index_is_mixed_radix():
    # first coordinate is the least significant digit
    sym = protocol.quantize_offset(np.array([0.9, -0.9]), 1.0, 3, 1)
    assert sym == protocol.Symbol(1 + 2 + 0 * 3, 1)
    assert protocol.box_cells(sym.box_index, 3, 2) == [2, 0]


def test_center_offset_rejects_overflow_and_range():
    with pytest.raises(protocol.ProtocolError):
        protocol.center_offset(0, 1.0, 3, 1)
    with pytest.raises(protocol.ProtocolError):
        protocol.center_offset(4, 1.0, 3, 1)


@settings(max_examples=200, deadline=None)
@given(d=st.lists(st.floats(-1.0, 1.0), min_size=2, max_size=2),
       E=st.floats(1e-6, 1e6), N=st.integers(2, 15))
def test_quantizer_containment(d, E, N):
    offset = np.array(d) * E
    sym = protocol.quantize_offset(offset, E, N, 0)
    assert 1 <= sym.box_index <= N ** 2
    center = protocol.center_offset(sym.box_index, E, N, 2)
    assert mathkit.inf_norm(offset - center) <= E / N * (1 + 1e-9)


# --- Bit packing ---

def test_bits_are_big_endian(cfg):
    assert protocol.encode_bits(protocol.Symbol(3, 1), cfg) == "0000011" + "01"
    assert protocol.encode_bits(protocol.Symbol(0, 2), cfg) == "0000000" + "10"


def test_decode_bits_rejects_bad_strings(cfg):
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_bits("00000110", cfg)
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_bits("1111111" + "00", cfg)
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_bits("0000011" + "11", cfg)
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_bits("000001a" + "00", cfg)


@settings(max_examples=100, deadline=None)
@given(box=st.integers(0, 100), mode=st.integers(0, 2))
def test_bits_decode_to_same_symbol(box, mode):
    cfg = protocol.SymbolFormat(10, 2, 3)
    sym = protocol.Symbol(box, mode)
    bits = protocol.encode_bits(sym, cfg)
    assert len(bits) == 9
    assert protocol.decode_bits(bits, cfg) == sym


# --- Interval propagators ---

def test_expected_segments_order_and_lengths(law):
    segments = protocol.expected_segments(1, law, 0.1)
    assert [q for q, _ in segments] == [1, 0, 2]
    assert sum(length for _, length in segments) == pytest.approx(0.1)
    means = np.array([20.0, 1 / 0.15, 1 / 0.045])
    assert segments[0][1] == pytest.approx(0.1 * means[1] / means.sum())


def test_expected_segments_single_mode():
    assert protocol.expected_segments(0, switching.FixedLaw(), 0.3) == [(0, 0.3)]


def test_expected_transition_without_switching_matches_closed_loop(systems, law, cfg):
    # identical modes: the product collapses to exp(A_pp tau)
    same = [systems[0]] * 3
    S_tilde = protocol.expected_transition(0, same, law, cfg)
    c = np.array([0.3, -1.2])
    assert np.allclose(S_tilde @ np.concatenate([c, c]), systems[0].closed_loop_propagator(0.1) @ c, atol=1e-12)


def test_transition_estimate_formulas():
    est = protocol.TransitionEstimates.from_norms(np.zeros((2, 4)), 1.5, 0.5, 10)
    assert est.chi == pytest.approx(2 * 1.5 + 0.5)
    assert est.psi == pytest.approx((9 * 0.5 + 19 * 1.5) / 10)


def test_bound_strategy_dominates_grid(systems, law, cfg):
    grid_cfg = ProtocolConfig(tau=0.1, N=10, n=2, M=3, E0=10.0, xstar0=(0.0, 0.0),
                              worst_strategy="grid_dp", grid_points=4)
    for p in range(3):
        S_tilde = protocol.expected_transition(p, systems, law, cfg)
        bound = protocol.worst_transition(p, systems, cfg, S_tilde)
        grid = protocol.worst_transition(p, systems, grid_cfg, S_tilde)
        assert bound.S_check is None
        assert grid.S_check.shape == (2, 4)
        assert grid.S_check_norm <= bound.S_check_norm + 1e-12
        assert bound.S_diff_norm == pytest.approx(mathkit.inf_norm(S_tilde) + bound.S_check_norm)


def test_grid_without_switching_reproduces_expected(systems, law):
    cfg = ProtocolConfig(tau=0.1, N=10, n=2, M=3, E0=1.0, xstar0=(0.0, 0.0),
                         worst_strategy="grid_dp", grid_points=3, max_switches=0)
    S_tilde = protocol.expected_transition(0, [systems[0]] * 3, law, cfg)
    worst = protocol.worst_transition(0, [systems[0]] * 3, cfg, S_tilde)
    assert np.allclose(worst.S_check, S_tilde, atol=1e-12)
    assert worst.S_diff_norm == pytest.approx(0.0, abs=1e-12)


def grid_cfg(M=3, **kwargs):
    return ProtocolConfig(tau=0.1, N=10, n=2, M=M, E0=10.0, xstar0=(0.0, 0.0), worst_strategy="grid_dp", **kwargs)


def test_grid_estimate_grows_with_resolution(systems, law):
    for p in range(3):
        S_tilde = protocol.expected_transition(p, systems, law, grid_cfg())
        previous = 0.0
        for G in range(2, 6):
            norm = protocol.worst_transition(p, systems, grid_cfg(grid_points=G), S_tilde).S_check_norm
            assert norm >= previous
            previous = norm
        previous = 0.0
        for switches in range(0, 4):
            cfg = grid_cfg(grid_points=4, max_switches=switches)
            norm = protocol.worst_transition(p, systems, cfg, S_tilde).S_check_norm
            assert norm >= previous
            previous = norm


@pytest.mark.parametrize("p", [0, 1, 2])
def test_grid_single_mode_is_exact_propagator(systems, p):
    single = [systems[p]]
    cfg = grid_cfg(M=1, grid_points=5)
    S_tilde = protocol.expected_transition(0, single, switching.FixedLaw(), cfg)
    worst = protocol.worst_transition(0, single, cfg, S_tilde)
    expected = mathkit.mat_exp(protocol.block_generator(systems[p], systems[p]), 0.1)[:2]
    assert worst.S_check_norm == pytest.approx(mathkit.inf_norm(expected), rel=1e-9)
    assert worst.S_diff_norm == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("strategy", ["bound", "grid_dp"])
def test_switch_update_covers_no_switch_update(systems, law, strategy):
    cfg = ProtocolConfig(tau=0.1, N=10, n=2, M=3, E0=10.0, xstar0=(0.0, 0.0), worst_strategy=strategy)
    tables = protocol.build_tables(systems, law, cfg)
    rng = np.random.default_rng(5)
    for p in range(3):
        for _ in range(20):
            state = protocol.QuantizerState(0, rng.uniform(-10.0, 10.0, 2), float(rng.uniform(1e-3, 10.0)), p)
            c = state.xstar + rng.uniform(-state.E, state.E, 2)
            quiet = protocol.update_no_switch(state, c, tables)
            switched = protocol.update_with_switch(state, c, tables.estimates[p])
            assert quiet.E <= switched.E


def test_build_tables(tables, systems):
    assert len(tables.estimates) == 3
    assert np.allclose(tables.Lambdas, protocol.open_loop_norms(systems, 0.1))
    for est in tables.estimates:
        assert est.chi > 0 and est.psi > 0


# --- Update laws ---

def test_update_no_switch(tables, systems):
    state = protocol.QuantizerState(4, np.array([1.0, 2.0]), 2.0, 0)
    c = np.array([1.1, 1.9])
    nxt = protocol.update_no_switch(state, c, tables)
    assert nxt.k == 5
    assert nxt.E == pytest.approx(tables.Lambdas[0] / 10 * 2.0)
    assert np.allclose(nxt.xstar, systems[0].closed_loop_propagator(0.1) @ c)


def test_update_with_switch(tables):
    est = tables.estimates[2]
    state = protocol.QuantizerState(0, np.array([1.0, -3.0]), 0.5, 2)
    c = np.array([0.9, -2.8])
    nxt = protocol.update_with_switch(state, c, est)
    assert np.allclose(nxt.xstar, est.S_tilde @ np.concatenate([c, c]))
    assert nxt.E == pytest.approx(est.chi * 3.0 + est.psi * 0.5)


def test_radius_never_underflows(tables):
    state = protocol.QuantizerState(0, np.zeros(2), 1e-300, 0)
    nxt = protocol.update_no_switch(state, np.zeros(2), tables)
    assert nxt.E >= protocol.RADIUS_FLOOR


def test_overflow_doubles_radius(tables, caplog):
    state = protocol.QuantizerState(2, np.array([1.0, 0.0]), 3.0, 1)
    with caplog.at_level(logging.WARNING):
        nxt = protocol.update_overflow(state, tables)
    assert nxt.E == 6.0
    assert np.allclose(nxt.xstar, tables.closed_loop_props[1] @ state.xstar)
    assert "overflow" in caplog.text


# --- Endpoints ---

def test_encoder_and_decoder_stay_in_lockstep(tables):
    rng = np.random.default_rng(0)
    enc = protocol.Encoder(tables, mode=0)
    dec = protocol.Decoder(tables, mode=0)
    for _ in range(50):
        mode = int(rng.integers(0, 3))
        x = enc.state.xstar + rng.uniform(-1.2, 1.2, size=2) * enc.state.E
        sample = enc.encode(x, mode)
        assert len(sample.bits) == 9
        center = dec.receive(sample.bits)
        assert np.array_equal(center, sample.center)
        switched = bool(rng.integers(0, 2))
        a = enc.advance(switched)
        b = dec.advance(switched)
        assert a.k == b.k and a.mode == b.mode
        assert a.E == b.E
        assert np.array_equal(a.xstar, b.xstar)


def test_advance_requires_a_sample(tables):
    with pytest.raises(protocol.ProtocolError):
        protocol.Decoder(tables).advance(False)


def test_overflow_sample_has_no_offset(tables):
    enc = protocol.Encoder(tables)
    sample = enc.encode(np.array([100.0, 0.0]), 0)
    assert sample.symbol.box_index == 0
    assert sample.offset is None
    assert np.array_equal(sample.center, enc.state.xstar)
    assert enc.advance(False).E == 20.0
