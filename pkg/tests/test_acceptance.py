"""Acceptance criteria on the built-in example plant, each reported as one
PASS/FAIL line (collected at the end of the pytest run)."""

import itertools
import math
import time

import numpy as np
import pytest
from scipy.optimize import minimize

from ncsrate.cli import (EXAMPLE_DINF, LOW_RATE_FACTOR, cmd_simulate, cmd_synth, example_config, simulate_point,
                         train_point)
from ncsrate.ecdq import BitReader, BitWriter, dither_block, ecdq_decode_step, ecdq_encode_step
from ncsrate.lti import RationalTF, closed_loop, h2_norm_sq, tf_to_ss
from ncsrate.synthesis import (J_of_Gamma, SolverOptions, _model_for, compute_Dinf, design_for_D, gamma_of_D,
                               min_distortion_at_snr, solve_weighted)

from conftest import first_order_plant, record

GAP_BITS = 0.5 * math.log2(2 * math.pi * math.e / 12) + 1


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    cfg = example_config(str(tmp_path_factory.mktemp("example")))
    quiet = lambda s: None
    t0 = time.perf_counter()
    summary, _, frontier, points = cmd_synth(cfg, out=quiet)
    t_synth = time.perf_counter() - t0
    t0 = time.perf_counter()
    rows, _ = cmd_simulate(cfg, out=quiet)
    t_sim = time.perf_counter() - t0
    return {"config": cfg, "summary": summary, "frontier": frontier, "points": points, "rows": rows,
            "t_synth": t_synth, "t_sim": t_sim}


def test_criterion_01_distortion_floor(example_plant):
    t0 = time.perf_counter()
    D_inf = compute_Dinf(example_plant)
    dt = time.perf_counter() - t0
    record(1, "D_inf reproduction", abs(D_inf - EXAMPLE_DINF) <= 5e-4 and dt < 1.0,
           "computed %.6f vs %.4f +- 0.0005 in %.3f s" % (D_inf, EXAMPLE_DINF, dt))


def test_criterion_02_bound_gap(bundle):
    pts = bundle["frontier"].points + bundle["points"]
    worst = max(abs(p.upper_bits - p.lower_bits - GAP_BITS) for p in pts)
    record(2, "bound-gap identity", worst < 1e-12 and abs(GAP_BITS - 1.254) < 1e-3,
           "%d points, gap %.6f bits, max deviation %.2g" % (len(pts), GAP_BITS, worst))


def test_criterion_03_duality(bundle, example_plant):
    frontier = bundle["frontier"]
    interior = frontier.points[1:-1]
    via_interp = max(abs(p.D - J_of_Gamma(frontier, gamma_of_D(frontier, p.D))) / p.D for p in interior)
    t0 = time.perf_counter()
    via_primal = max(abs(p.D - min_distortion_at_snr(example_plant, p.gamma)[0]) / p.D for p in interior)
    t_primal = time.perf_counter() - t0
    ok = via_interp < 1e-3 and via_primal < 1e-3 and bundle["t_synth"] < 300
    record(3, "duality", ok, "%d interior samples: interpolation %.2g, constrained primal %.2g; frontier + "
           "designs %.0f s, primal route %.0f s" % (len(interior), via_interp, via_primal, bundle["t_synth"],
                                                    t_primal))


def test_criterion_04_rate_sandwich(bundle):
    rows = bundle["rows"]
    inside = [r["lower_bits"] - 2 * r["rate_bits_se"] <= r["rate_bits"] <= r["upper_bits"] + 2 * r["rate_bits_se"]
              for r in rows]
    record(4, "rate sandwich", sum(inside) >= 10 and len(rows) == 12 and bundle["t_sim"] < 600,
           "%d of %d grid points inside, Monte Carlo %.0f s" % (sum(inside), len(rows), bundle["t_sim"]))


def test_criterion_05_measured_gaps(bundle):
    mid = bundle["rows"][len(bundle["rows"]) // 2]
    rgap = mid["rate_bits"] - mid["lower_bits"]
    egap = mid["entropy_bits"] - mid["lower_bits"]
    record(5, "measured gaps", abs(rgap - 0.45) <= 0.15 and abs(egap - 0.25) <= 0.10,
           "D = %.4f: rate gap %.3f (0.45 +- 0.15), entropy gap %.3f (0.25 +- 0.10)" % (mid["D"], rgap, egap))


def test_criterion_06_distortion(bundle):
    ratios = [r["sigma_e_sq"] / r["D"] for r in bundle["rows"]]
    record(6, "performance constraint", max(ratios) <= 1.03, "max sigma_e^2 / D = %.4f" % max(ratios))


def test_criterion_07_coding_noise(bundle):
    cfg = bundle["config"]
    k = len(bundle["points"]) // 2
    long_cfg = type(cfg)(**{**cfg.__dict__, "realizations": 1, "samples": 100_000})
    rep = simulate_point(long_cfg, bundle["points"][k].design, 1000 + k)[0]
    v = rep.runs[0].verdicts
    ok = v["ks"].passed and v["autocorrelation"].passed and v["crosscorrelation"].passed
    record(7, "coding-noise law", ok, "KS p = %.3f, max |autocorr| %.4f, max |crosscorr| %.4f, bound %.4f" % (
        v["ks"].detail["pvalue"], v["autocorrelation"].statistic, v["crosscorrelation"].statistic,
        v["autocorrelation"].threshold))


def _round_trip_mismatches(book, cfg, rng, n=10_000):
    v = rng.normal(0.0, 3 * cfg.delta, n)
    v[rng.random(n) < 0.01] *= 50          # exercise the escape path
    d = dither_block(int(rng.integers(2 ** 32)), cfg.delta, n)
    writer = BitWriter()
    sent = [ecdq_encode_step(a, b, book, cfg, writer)[1] for a, b in zip(v, d)]
    reader = BitReader(writer.getvalue(), writer.n_bits)
    got = [ecdq_decode_step(reader, b, book, cfg) for b in d]
    return sum(x != y for x, y in zip(sent, got)) + reader.remaining


def test_criterion_08_prefix_kraft_round_trip(bundle):
    cfg = bundle["config"]
    rng = np.random.default_rng(8)
    books = mismatches = 0
    prefix_ok = kraft_ok = True
    max_kraft = 0.0
    for k, p in enumerate(bundle["points"]):
        run, book, uncond = train_point(cfg, p.design, k)
        for bk, ecfg in ((book, run.ecdq), (uncond, type(run.ecdq)(**{**run.ecdq.__dict__, "num_dither_bins": 1}))):
            for b in range(bk.num_bins):
                words = list(bk.tables[b].values()) + [bk.escapes[b]]
                prefix_ok &= all(not y.startswith(x) for x, y in itertools.permutations(words, 2))
                max_kraft = max(max_kraft, bk.kraft_sum(b))
            kraft_ok &= max_kraft <= 1.0
            mismatches += _round_trip_mismatches(bk, ecfg, rng)
            books += 1
    record(8, "prefix/Kraft/round-trip", prefix_ok and kraft_ok and mismatches == 0,
           "%d codebooks, prefix-free %s, max Kraft sum %.6f, %d decode mismatches" % (
               books, prefix_ok, max_kraft, mismatches))


def _random_search_oracle(plant, lam, opts, samples=1500, polish=3, seed=0):
    """Dense random search plus local polish over the Youla, shaping, whitening
    and noise-variance parameters, scored through realized closed-loop maps."""
    model = _model_for(plant, opts)

    def cost(theta):
        q, a, W, s2 = model.unpack(theta)
        try:
            maps = closed_loop(plant, model.design(q, a, W, s2))
        except (ValueError, ZeroDivisionError):
            return 1e6
        if not maps.stable:
            return 1e6
        return maps.sigma_e_sq(s2) + lam * maps.snr(s2)

    rng = np.random.default_rng(seed)
    dim = 2 * model.n_q + 1 + model.n_w
    draws = [np.r_[rng.normal(0.0, 0.5, dim), rng.uniform(-6.0, 2.0)] for _ in range(samples)]
    draws.sort(key=cost)
    return min(minimize(cost, th, method="BFGS", options={"gtol": 1e-9, "maxiter": 3000}).fun
               for th in draws[:polish])


def test_criterion_09_oracle_equivalence():
    plant = first_order_plant(0.5)
    details, ok = [], True
    for n_q in (4, 8):
        opts = SolverOptions(youla_order=n_q, whitening_order=2)
        solved = solve_weighted(plant, 1.0, opts).cost
        oracle = _random_search_oracle(plant, 1.0, opts)
        rel = abs(solved - oracle) / oracle
        ok &= rel < 1e-3
        details.append("N_Q=%d rel %.1e" % (n_q, rel))
    worst_h2 = 0.0
    for a in np.linspace(-0.95, 0.95, 39):
        val = h2_norm_sq(tf_to_ss(RationalTF([1.0], [1.0, -a])))
        worst_h2 = max(worst_h2, abs(val - 1.0 / (1.0 - a * a)))
    ok &= worst_h2 < 1e-9
    record(9, "oracle equivalence", ok, "%s; H2 family max error %.1e" % (", ".join(details), worst_h2))


def test_criterion_10_low_rate(bundle, example_plant):
    cfg = bundle["config"]
    D_inf = bundle["summary"]["D_inf"]
    point = design_for_D(example_plant, LOW_RATE_FACTOR * D_inf, cfg.solver, bundle["frontier"])
    rep = simulate_point(cfg, point.design, 2000)[0]
    ok = rep.sigma_e_sq <= 1.05 * D_inf and rep.rate_bits < 3.0
    record(10, "near-optimal performance at low rate", ok,
           "design D = %.5f: sigma_e^2 %.5f (limit %.5f), rate %.3f bits (limit 3; lower bound alone %.3f)" % (
               point.D, rep.sigma_e_sq, 1.05 * D_inf, rep.rate_bits, point.lower_bits))


def test_rate_curves_ordered(bundle):
    for r in bundle["rows"]:
        tol = 2 * max(r["rate_bits_se"], r["entropy_bits_se"], r["rate_uncond_bits_se"])
        assert r["lower_bits"] <= r["entropy_bits"] + tol
        assert r["entropy_bits"] <= r["rate_bits"] + tol
        assert r["rate_bits"] <= r["rate_uncond_bits"] + tol
