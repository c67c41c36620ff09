import math

import numpy as np
import pytest
from scipy.optimize import minimize

from ncsrate.lti import ClosedLoopMaps, PartitionedPlant, RationalTF, closed_loop
from ncsrate.synthesis import (RATE_GAP_NATS, ConvergenceError, DegenerateProblemError, SolverOptions, _fir,
                               _model_for, compute_Dinf, compute_Gamma_inf, design_for_D, directed_info_rate,
                               gamma_of_D, J_of_Gamma, min_distortion_at_snr, nats_to_bits, rate_bounds,
                               solve_weighted, trace_frontier)

from conftest import first_order_plant

FAST = SolverOptions(youla_order=16, restarts=1)

# gamma at three interior distortions of the example plant, frozen after the
# first validated run (primal oracle and multiplier sweep agree to 1e-12)
FROZEN_GAMMA = {0.3: 12.119872725090675, 0.6: 5.165927234435454, 1.5: 3.6644338778752124}


def _fir_dinf_oracle(a, tol=1e-4):
    """Best error variance over FIR internal-model controllers for y = (u + d)/(z - a).

    With u = Q (y - P u) the error map is g + g Q g, affine in the FIR taps of Q,
    so each order is a linear least-squares problem.
    """
    T = 400
    g = np.r_[0.0, a ** np.arange(T - 1)]
    gg = np.convolve(g, g)[:T]
    prev, order = np.inf, 1
    while True:
        basis = np.column_stack([np.r_[np.zeros(k), gg[:T - k]] for k in range(order)])
        taps, *_ = np.linalg.lstsq(basis, -g, rcond=None)
        val = float(np.sum((g + basis @ taps) ** 2))
        if prev - val < tol:
            return val
        prev, order = val, order * 2


def test_dinf_example_plant(example_plant):
    # reference value 0.2091; the coefficients as printed give 0.20829 (see notes)
    assert compute_Dinf(example_plant) == pytest.approx(0.20829099384, abs=1e-9)


def test_dinf_matches_fir_oracle():
    oracle = _fir_dinf_oracle(0.5)
    assert compute_Dinf(first_order_plant(0.5)) == pytest.approx(oracle, abs=1e-4)
    assert oracle == pytest.approx(1.0, abs=1e-4)


def test_dinf_without_control_path():
    g = RationalTF([1.0], [1.0, -0.5])
    zero = RationalTF.constant(0.0)
    plant = PartitionedPlant.from_blocks(g, zero, g, RationalTF([1.0], [1.0, -0.3]))
    assert compute_Dinf(plant) == pytest.approx(4.0 / 3.0, rel=1e-10)
    with pytest.raises(DegenerateProblemError):
        solve_weighted(plant, 1.0, FAST)


def test_unstabilizable_plant_named():
    A = np.diag([2.0, 0.5])
    B = np.array([[0.0, 0.0], [1.0, 1.0]])
    C = np.array([[1.0, 1.0], [1.0, 1.0]])
    D = np.zeros((2, 2))
    with pytest.raises(ValueError, match="uncontrollable from u"):
        compute_Dinf(PartitionedPlant.from_state_space(A, B, C, D, 1, 1))


def test_gamma_inf_stable_plant_is_zero():
    assert compute_Gamma_inf(first_order_plant(0.5)) == 0.0


def test_gamma_inf_example_closed_form(example_plant):
    # product of squared unstable pole magnitudes minus one
    assert compute_Gamma_inf(example_plant) == pytest.approx(3.0, rel=1e-9)


def test_gamma_inf_random_restarts(example_plant):
    opts = SolverOptions(youla_order=8)
    model = _model_for(example_plant, opts)
    rng = np.random.default_rng(7)

    def value(theta):
        a, w = theta[:model.n_q], np.r_[1.0, theta[model.n_q:]]
        return float(np.sum(_fir(w, model.g_map(a)) ** 2)) - 1.0

    best = [minimize(value, rng.standard_normal(model.n_q + model.n_w), method="BFGS").fun for _ in range(20)]
    assert min(best) == pytest.approx(compute_Gamma_inf(example_plant, opts), rel=1e-3)


def test_gamma_inf_grows_with_unstable_spectrum():
    g1 = RationalTF([0.165], np.poly([2.0, 0.5789]))
    g2 = RationalTF([0.165], np.poly([2.0, 1.5, 0.5789]))
    one = PartitionedPlant.from_blocks(g1, g1, g1, g1)
    two = PartitionedPlant.from_blocks(g2, g2, g2, g2)
    assert compute_Gamma_inf(two) == pytest.approx(8.0, rel=1e-6)
    assert compute_Gamma_inf(two) > compute_Gamma_inf(one)


def test_negative_lambda_rejected(example_plant):
    with pytest.raises(ValueError):
        solve_weighted(example_plant, -1.0, FAST)


def test_iteration_cap_reports_residual(example_plant):
    with pytest.raises(ConvergenceError) as err:
        solve_weighted(example_plant, 100.0, SolverOptions(youla_order=16, restarts=1, max_iter=2))
    assert err.value.point is not None and "relative cost change" in str(err.value)


def test_zero_lambda_recovers_dinf():
    plant = first_order_plant(0.5)
    vals = [solve_weighted(plant, 0.0, SolverOptions(youla_order=n, restarts=1)).D for n in (2, 8, 32)]
    assert vals[-1] == pytest.approx(compute_Dinf(plant), rel=1e-6)
    assert all(np.diff(vals) <= 1e-12)


def test_large_lambda_opens_the_loop():
    plant = first_order_plant(0.5)
    # a short Youla filter leaves a residual |WU|^2 floor that large weights amplify
    p = solve_weighted(plant, 1e6, SolverOptions(restarts=1))
    assert p.gamma < 1e-6
    assert p.D == pytest.approx(4.0 / 3.0, rel=1e-5)


def test_lambda_sweep_is_monotone(example_plant):
    pts = [solve_weighted(example_plant, lam, FAST) for lam in np.logspace(-2, 2, 9)]
    assert np.all(np.diff([p.cost for p in pts]) > 0)
    assert np.all(np.diff([p.D for p in pts]) > 0)
    assert np.all(np.diff([p.gamma for p in pts]) < 0)


def test_restarts_agree(example_plant):
    a = solve_weighted(example_plant, 1.0, SolverOptions(restarts=1))
    b = solve_weighted(example_plant, 1.0, SolverOptions(restarts=5, seed=3))
    assert a.cost == pytest.approx(b.cost, rel=1e-8)


def test_stable_frontier_ends_in_open_loop():
    plant = first_order_plant(0.5)
    f = trace_frontier(plant, np.logspace(-2, 3, 8), FAST)
    assert f.points[-1].gamma == 0.0
    assert f.points[-1].D == pytest.approx(4.0 / 3.0, rel=1e-9)
    assert gamma_of_D(f, 2.0) == 0.0


def test_example_frontier_shape(example_frontier):
    f = example_frontier
    assert f.metadata["all_converged"]
    assert np.all(np.diff(f.D) > 0) and np.all(np.diff(f.gamma) < 0)
    # SNR blows up toward the distortion floor
    assert f.gamma[0] > 50.0 and f.D[0] < 1.05 * compute_Dinf_cached()


def compute_Dinf_cached(_cache={}):
    if not _cache:
        from ncsrate.cli import example_plant_doc, plant_from_doc
        _cache["v"] = compute_Dinf(plant_from_doc(example_plant_doc()))
    return _cache["v"]


def test_frozen_gamma_values(example_frontier):
    for D, g in FROZEN_GAMMA.items():
        assert gamma_of_D(example_frontier, D) == pytest.approx(g, rel=1e-6)


def test_interpolation_inverse_and_range(example_frontier):
    for D in (0.25, 0.7, 5.0):
        assert J_of_Gamma(example_frontier, gamma_of_D(example_frontier, D)) == pytest.approx(D, rel=1e-12)
    with pytest.raises(ValueError, match="widen"):
        gamma_of_D(example_frontier, 0.21)
    with pytest.raises(ValueError, match="widen"):
        J_of_Gamma(example_frontier, 1e4)


def test_primal_route_matches_sweep(example_plant, example_frontier):
    for p in example_frontier.points[5:30:8]:
        D, gamma = min_distortion_at_snr(example_plant, p.gamma)
        assert D == pytest.approx(p.D, rel=1e-6)
        assert gamma <= p.gamma + 1e-9


def test_rate_bounds():
    lo, hi = rate_bounds(0.0)
    assert lo == 0.0
    assert hi == pytest.approx(0.5 * math.log(2 * math.pi * math.e / 12) + math.log(2))
    assert nats_to_bits(hi) == pytest.approx(1.2546, abs=1e-4)
    assert nats_to_bits(rate_bounds(3.0)[0]) == pytest.approx(1.0)
    assert hi - lo == RATE_GAP_NATS
    with pytest.raises(ValueError):
        rate_bounds(-0.1)


def test_design_meets_target(example_plant, example_frontier):
    for D in (0.25, 0.8, 2.0):
        p = design_for_D(example_plant, D, SolverOptions(), example_frontier)
        maps = closed_loop(example_plant, p.design)
        assert maps.stable
        # the distortion constraint is active at the optimum
        assert maps.sigma_e_sq(p.design.sigma_q_sq) == pytest.approx(D, rel=1e-9)
        assert maps.snr(p.design.sigma_q_sq) == pytest.approx(p.gamma, rel=1e-7)


def test_design_below_floor_rejected(example_plant):
    with pytest.raises(ValueError):
        design_for_D(example_plant, 0.2, FAST)


def test_directed_info_static_loop():
    # d does not reach y, so u = q exactly
    one, zero = RationalTF.constant(1.0), RationalTF.constant(0.0)
    g = RationalTF([1.0], [1.0, -0.5])
    quiet = PartitionedPlant.from_blocks(g, g, RationalTF.constant(0.0), g)
    maps = ClosedLoopMaps(quiet, one, zero, zero)
    assert directed_info_rate(maps, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_directed_info_jensen():
    # u = q + 0.5 q(k-1): zero inside the unit circle integrates to zero
    g = RationalTF([1.0], [1.0, -0.5])
    quiet = PartitionedPlant.from_blocks(g, g, RationalTF.constant(0.0), g)
    F = RationalTF([1.0, 0.5], [1.0, 0.0])
    zero = RationalTF.constant(0.0)
    maps = ClosedLoopMaps(quiet, F, zero, zero)
    assert directed_info_rate(maps, 2.0) == pytest.approx(0.0, abs=1e-10)


def test_directed_info_requires_monic_output_filter():
    zero = RationalTF.constant(0.0)
    maps = ClosedLoopMaps(first_order_plant(0.5), RationalTF.constant(2.0), zero, zero)
    with pytest.raises(ValueError, match="monic"):
        directed_info_rate(maps, 1.0)


def test_directed_info_attains_lower_bound(example_plant, example_frontier):
    for D in (0.3, 1.5):
        p = design_for_D(example_plant, D, SolverOptions(), example_frontier)
        maps = closed_loop(example_plant, p.design)
        assert directed_info_rate(maps, p.design.sigma_q_sq) == pytest.approx(p.lower_rate_nats, abs=1e-6)


def test_unit_output_filter_design_respects_bound(example_plant, example_frontier):
    for D in (0.3, 0.6, 1.5):
        p = design_for_D(example_plant, D, SolverOptions(whitening_order=0))
        assert p.design.F.almost_equal(RationalTF.constant(1.0))
        maps = closed_loop(example_plant, p.design)
        bound = 0.5 * math.log1p(gamma_of_D(example_frontier, D))
        assert directed_info_rate(maps, p.design.sigma_q_sq) >= bound - 1e-3
