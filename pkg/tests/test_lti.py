import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ncsrate.lti import (ClosedLoopMaps, IllPosedLoopError, PartitionedPlant, RationalTF, StateSpace,
                         closed_loop, freq_grid, h2_norm_sq, ss_to_tf, tf_to_ss)
from ncsrate.synthesis import CoderDesign, SolverOptions, solve_weighted

from conftest import first_order_plant


def test_first_order_companion_form():
    sys = tf_to_ss(RationalTF([1.0], [1.0, -0.5]))
    assert np.allclose(sys.A, [[0.5]]) and np.allclose(sys.B, [[1.0]])
    assert np.allclose(sys.C, [[1.0]]) and np.allclose(sys.D, [[0.0]])


def test_static_gain_has_no_states():
    sys = tf_to_ss(RationalTF.constant(3.0))
    assert sys.n_states == 0
    assert np.allclose(sys.D, [[3.0]])


def test_example_plant_round_trip():
    tf = RationalTF([0.165], np.poly([2.0, 0.5789]))
    sys = tf_to_ss(tf)
    assert sys.n_states == 2
    back = ss_to_tf(sys)
    assert np.allclose(back.num, tf.num, atol=1e-9) and np.allclose(back.den, tf.den, atol=1e-9)


def test_improper_rejected():
    with pytest.raises(ValueError, match="improper"):
        tf_to_ss(RationalTF([1.0, 0.0, 0.0], [1.0, 0.5]))


def _random_tf(seed, order):
    r = np.random.default_rng(seed)
    poles = r.uniform(0.1, 0.95, order) * np.exp(1j * r.uniform(0, np.pi, order))
    den = np.real(np.poly(np.r_[poles[: order // 2], np.conj(poles[: order // 2]), np.abs(poles[order // 2:])]))
    den = den[: order + 1]
    num = r.standard_normal(r.integers(1, order + 2))
    return RationalTF(num, np.poly(np.roots(den)).real)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8))
def test_random_round_trip(seed, order):
    tf = _random_tf(seed, order)
    back = ss_to_tf(tf_to_ss(tf, reduce=False), reduce=False)
    z = np.exp(1j * np.linspace(0.1, 3.0, 17)) * 1.3
    assert np.allclose(back(z), tf(z), rtol=1e-7, atol=1e-9)


def test_h2_first_order():
    assert h2_norm_sq(tf_to_ss(RationalTF([1.0], [1.0, -0.5]))) == pytest.approx(4.0 / 3.0, rel=1e-12)


def test_h2_identity():
    assert h2_norm_sq(tf_to_ss(RationalTF.constant(1.0))) == pytest.approx(1.0)


def test_h2_unstable_raises():
    with pytest.raises(ValueError, match="H2 norm undefined"):
        h2_norm_sq(tf_to_ss(RationalTF([1.0], [1.0, -2.0])))


def test_h2_matches_frequency_grid(rng):
    for k in range(100):
        n = int(rng.integers(1, 6))
        A = rng.standard_normal((n, n))
        A *= rng.uniform(0.1, 0.9) / max(np.abs(np.linalg.eigvals(A)))
        sys = StateSpace(A, rng.standard_normal((n, 2)), rng.standard_normal((1, n)), rng.standard_normal((1, 2)))
        _, resp = freq_grid(sys, 4096)
        grid = float(np.mean(np.sum(np.abs(resp) ** 2, axis=(1, 2))))
        assert h2_norm_sq(sys) == pytest.approx(grid, rel=1e-8)


def test_freq_grid_examples():
    w, r = freq_grid(RationalTF.constant(1.0), 256)
    assert np.allclose(r, 1.0)
    w, r = freq_grid(RationalTF.delay(1), 256)
    assert np.allclose(np.abs(r), 1.0) and np.allclose(r, np.exp(-1j * w))
    _, r = freq_grid(RationalTF([1.0], [1.0, -0.5]), 256)
    assert r[0] == pytest.approx(2.0)


def test_freq_grid_requires_power_of_two():
    with pytest.raises(ValueError):
        freq_grid(RationalTF.constant(1.0), 300)


def test_open_loop_maps():
    plant = first_order_plant(0.5)
    one, zero = RationalTF.constant(1.0), RationalTF.constant(0.0)
    maps = ClosedLoopMaps(plant, one, zero, zero)
    assert maps.S.almost_equal(one) and maps.K.almost_equal(zero)
    assert maps.transfer("e", "d")[0][0].almost_equal(plant.tf("P11"))
    assert maps.transfer("e", "q")[0][0].almost_equal(plant.tf("P12"))


def test_example_closed_loop_entries_stable(example_plant):
    p = solve_weighted(example_plant, 1.0, SolverOptions(youla_order=8, restarts=1))
    maps = closed_loop(example_plant, p.design)
    assert maps.stable
    assert np.all(np.abs(np.linalg.eigvals(maps.ss.A)) < 1.0)
    for out in ("e", "y", "w", "u"):
        for inp in ("q", "d", "n1", "n2"):
            for row in maps.transfer(out, inp):
                for tf in row:
                    assert tf.is_stable()


def test_stability_flag_matches_entry_poles(example_plant):
    # destabilize with a large static gain and check that some entry carries an unstable pole
    one = RationalTF.constant(1.0)
    for gain in (-0.5, 5.0, 30.0):
        maps = ClosedLoopMaps(example_plant, one, RationalTF.constant(0.0), RationalTF.constant(gain))
        entries_stable = all(tf.is_stable() for out in ("e", "y", "w", "u") for inp in ("q", "d", "n1", "n2")
                             for row in maps.transfer(out, inp) for tf in row)
        assert maps.stable == entries_stable


def test_sensitivity_is_monic_at_infinity(example_plant):
    p = solve_weighted(example_plant, 3.0, SolverOptions(youla_order=8, restarts=1))
    maps = closed_loop(example_plant, p.design)
    assert maps.S.feedthrough() == pytest.approx(1.0, abs=1e-12)


def test_delay_free_loop_rejected(example_plant):
    one = RationalTF.constant(1.0)
    with pytest.raises(IllPosedLoopError):
        ClosedLoopMaps(example_plant, one, RationalTF([1.0, 0.0]), RationalTF.constant(0.0))


def test_plant_rejects_feedthrough_in_p22():
    g = RationalTF([1.0], [1.0, -0.5])
    with pytest.raises(ValueError):
        PartitionedPlant.from_blocks(g, g, g, RationalTF([1.0, 0.0], [1.0, -0.5]))


def test_plant_serialization_and_fingerprint(example_plant):
    again = PartitionedPlant.from_dict(example_plant.to_dict())
    assert again.fingerprint() == example_plant.fingerprint()
    assert first_order_plant(0.5).fingerprint() != example_plant.fingerprint()


def test_design_serialization(example_plant):
    d = solve_weighted(example_plant, 1.0, SolverOptions(youla_order=8, restarts=1)).design
    back = CoderDesign.from_dict(d.to_dict())
    assert back.F.almost_equal(d.F) and back.L_y.almost_equal(d.L_y) and back.sigma_q_sq == d.sigma_q_sq
