"""Command-line front end: synth, simulate and reproduce-example.

Outputs are CSV tables plus JSON documents; identical configuration and
master seed give byte-identical files.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .lti import PartitionedPlant, RationalTF, closed_loop
from .synthesis import (CoderDesign, SolverOptions, compute_Dinf, compute_Gamma_inf, default_lambda_grid,
                        design_for_D, min_distortion_at_snr, trace_frontier)
from .simulator import make_run, monte_carlo, train_for_run, training_seeds

log = logging.getLogger("ncsrate")

FRONTIER_COLUMNS = ["D", "gamma", "lower_bits", "upper_bits", "sigma_q_sq", "converged"]
SWEEP_COLUMNS = ["lambda"] + FRONTIER_COLUMNS
MEASURED_COLUMNS = ["D", "gamma", "lower_bits", "upper_bits", "rate_bits", "rate_bits_se", "rate_uncond_bits",
                    "rate_uncond_bits_se", "entropy_bits", "entropy_bits_se", "sigma_e_sq", "sigma_e_sq_se",
                    "escape_fraction", "ks_pass", "autocorr_pass", "crosscorr_pass", "stationarity_pass"]

EXAMPLE_GAIN = 0.165
EXAMPLE_POLES = (2.0, 0.5789)
EXAMPLE_DINF = 0.2091
EXAMPLE_RATE_GAP = 0.45
EXAMPLE_ENTROPY_GAP = 0.25


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ configuration

@dataclass
class ExperimentConfig:
    plant_doc: dict
    D_grid: list
    solver: SolverOptions = field(default_factory=SolverOptions)
    lambda_grid: list = None
    ecdq: dict = field(default_factory=lambda: {"num_dither_bins": 11, "training_samples": 100_000,
                                                "max_symbol_magnitude": 32})
    realizations: int = 20
    samples: int = 10_000
    warmup: int = 1_000
    initial_state_std: float = 1.0
    workers: int = 1
    output_dir: str = "out"
    master_seed: int = 0
    _plant: PartitionedPlant = field(default=None, repr=False)

    @property
    def plant(self):
        if self._plant is None:
            self._plant = plant_from_doc(self.plant_doc)
        return self._plant

    @property
    def lambdas(self):
        return default_lambda_grid() if self.lambda_grid is None else np.asarray(self.lambda_grid, dtype=float)

    def validate_grid(self, D_inf):
        if not self.D_grid:
            raise UsageError("the D grid is empty; give [grid] D = [...] or points/D_min/D_max")
        g = np.asarray(self.D_grid, dtype=float)
        if np.any(np.diff(g) <= 0):
            raise UsageError("the D grid must be strictly increasing")
        bad = [float(x) for x in g if not x > D_inf]
        if bad:
            raise UsageError("infeasible D grid entries %s: each must exceed D_inf = %.6f" % (bad, D_inf))


def _tf_blocks(blocks):
    """[[{num, den}, ...], ...] -> rows of RationalTF (a bare table means 1x1)."""
    if isinstance(blocks, dict):
        blocks = [[blocks]]
    return [[RationalTF(e["num"], e.get("den", [1.0])) for e in row] for row in blocks]


def plant_from_doc(doc):
    """Plant from either transfer-function blocks or a partitioned state-space model."""
    if "A" in doc:
        return PartitionedPlant.from_state_space(doc["A"], doc["B"], doc["C"], doc["D"], doc["n_d"], doc["n_e"])
    missing = [k for k in ("P11", "P12", "P21", "P22") if k not in doc]
    if missing:
        raise UsageError("plant section needs P11, P12, P21, P22 (missing %s) or A, B, C, D" % missing)
    return PartitionedPlant.from_blocks(*(_tf_blocks(doc[k]) for k in ("P11", "P12", "P21", "P22")))


def log_grid(D_min, D_max, points):
    """``points`` log-spaced values in (D_min, D_max]."""
    return [float(D_min * (D_max / D_min) ** (k / points)) for k in range(1, points + 1)]


def example_plant_doc():
    g = {"num": [EXAMPLE_GAIN], "den": np.poly(EXAMPLE_POLES).tolist()}
    return {"P11": [[g]], "P12": [[g]], "P21": [[g]], "P22": [[g]]}


def example_config(output_dir="out", master_seed=2011):
    return ExperimentConfig(plant_doc=example_plant_doc(), D_grid=log_grid(0.22, 3.0, 12),
                            output_dir=output_dir, master_seed=master_seed)


def config_from_dict(doc):
    grid = doc.get("grid", {})
    if "D" in grid:
        D_grid = [float(x) for x in grid["D"]]
    elif grid:
        D_grid = log_grid(float(grid["D_min"]), float(grid["D_max"]), int(grid["points"]))
    else:
        D_grid = []
    syn = dict(doc.get("synthesis", {}))
    lam = None
    if "lambda" in syn:
        lam = [float(x) for x in syn.pop("lambda")]
    elif any(k in syn for k in ("lambda_min", "lambda_max", "lambda_points")):
        lam = default_lambda_grid(int(syn.pop("lambda_points", 40)), float(syn.pop("lambda_min", 1e-4)),
                                  float(syn.pop("lambda_max", 1e4))).tolist()
    workers = int(syn.pop("workers", 1))
    solver = SolverOptions(**syn)
    ecdq = {"num_dither_bins": 11, "training_samples": 100_000, "max_symbol_magnitude": 32}
    ecdq.update(doc.get("ecdq", {}))
    mc = doc.get("montecarlo", {})
    if "plant" not in doc:
        raise UsageError("configuration has no [plant] section")
    return ExperimentConfig(plant_doc=doc["plant"], D_grid=D_grid, solver=solver, lambda_grid=lam, ecdq=ecdq,
                            realizations=int(mc.get("realizations", 20)), samples=int(mc.get("samples", 10_000)),
                            warmup=int(mc.get("warmup", 1_000)),
                            initial_state_std=float(mc.get("initial_state_std", 1.0)),
                            workers=int(mc.get("workers", workers)), output_dir=doc.get("output_dir", "out"),
                            master_seed=int(doc.get("master_seed", 0)))


def load_config(path):
    """Read a TOML (or JSON) experiment description."""
    if path.endswith(".json"):
        with open(path) as fh:
            return config_from_dict(json.load(fh))
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


# ------------------------------------------------------------------ file helpers

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for row in rows:
            wr.writerow([_fmt(row[c]) for c in columns])


def read_csv(path):
    """Parse a table written by ``write_csv`` back into typed rows."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v in ("true", "false"):
                    parsed[k] = v == "true"
                else:
                    parsed[k] = float(v)
            out.append(parsed)
    return out


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _check(name, passed, detail):
    status = "PASS" if passed else "FAIL"
    log.info("%s %s: %s", status, name, detail)
    return {"name": name, "passed": bool(passed), "detail": detail}


# ------------------------------------------------------------------ commands

def _frontier_row(p):
    return {"D": p.D, "gamma": p.gamma, "lower_bits": p.lower_bits, "upper_bits": p.upper_bits,
            "sigma_q_sq": p.design.sigma_q_sq, "converged": p.converged, "lambda": p.lam}


def cmd_synth(config, out=print):
    """Frontier sweep plus one design per D grid entry. Returns (summary, checks)."""
    plant = config.plant
    os.makedirs(config.output_dir, exist_ok=True)
    D_inf = compute_Dinf(plant)
    out("D_inf = %.6f" % D_inf)
    config.validate_grid(D_inf)
    G_inf = compute_Gamma_inf(plant, config.solver)
    out("Gamma_inf = %.6f" % G_inf)
    frontier = trace_frontier(plant, config.lambdas, config.solver, workers=config.workers)
    write_csv(os.path.join(config.output_dir, "sweep.csv"), SWEEP_COLUMNS, [_frontier_row(p) for p in frontier.points])
    design_dir = os.path.join(config.output_dir, "designs")
    os.makedirs(design_dir, exist_ok=True)
    points, files, checks = [], [], []
    for k, D in enumerate(config.D_grid):
        p = design_for_D(plant, D, config.solver, frontier)
        maps = closed_loop(plant, p.design)
        analytic = maps.sigma_e_sq(p.design.sigma_q_sq)
        name = "point_%02d.json" % k
        write_json(os.path.join(design_dir, name),
                   {"D": D, "fingerprint": frontier.fingerprint, "design": p.design.to_dict(),
                    "point": p.summary(), "analytic_sigma_e_sq": analytic, "stable": maps.stable})
        files.append(os.path.join("designs", name))
        points.append(p)
        checks.append(_check("design %02d stable and meets D" % k,
                             maps.stable and analytic <= D * (1 + 1e-6) and p.converged,
                             "D=%.6g analytic=%.9g stable=%s" % (D, analytic, maps.stable)))
        out("D = %.6g  gamma = %.6g  lower = %.4f bits  upper = %.4f bits" % (D, p.gamma, p.lower_bits, p.upper_bits))
    write_csv(os.path.join(config.output_dir, "frontier.csv"), FRONTIER_COLUMNS, [_frontier_row(p) for p in points])
    summary = {"fingerprint": frontier.fingerprint, "D_inf": D_inf, "Gamma_inf": G_inf,
               "D_grid": list(config.D_grid), "designs": files, "solver": frontier.metadata,
               "plant": config.plant_doc}
    checks.append(_check("frontier converged", frontier.metadata["all_converged"],
                         "max residual %.3g" % frontier.metadata["max_residual"]))
    write_json(os.path.join(config.output_dir, "synth.json"), summary)
    return summary, checks, frontier, points


def _load_points(synth_dir, summary):
    pts = []
    for rel in summary["designs"]:
        doc = read_json(os.path.join(synth_dir, rel))
        pts.append((doc["D"], CoderDesign.from_dict(doc["design"]), doc["point"]))
    return pts


def train_point(config, design, index, samples=None):
    """Measurement template and trained codebooks for one design."""
    samples = config.samples if samples is None else samples
    tn, td = training_seeds([config.master_seed, index])
    run = make_run(config.plant, design, horizon=config.warmup + samples, warmup=config.warmup, noise_seed=tn,
                   dither_seed=td, initial_state_std=config.initial_state_std, **config.ecdq)
    book, uncond, ecfg = train_for_run(run)
    return replace(run, ecdq=ecfg), book, uncond


def simulate_point(config, design, index, samples=None):
    """Train codebooks and run the Monte Carlo protocol for one design."""
    run, book, uncond = train_point(config, design, index, samples)
    report = monte_carlo(run, book, config.realizations, [config.master_seed, index, 1], unconditioned=uncond,
                         workers=config.workers)
    return report, book, uncond, run


def cmd_simulate(config, synth_dir=None, out=print):
    """Monte Carlo measurement at every synthesized design."""
    synth_dir = synth_dir or config.output_dir
    summary = read_json(os.path.join(synth_dir, "synth.json"))
    fp = config.plant.fingerprint()
    if summary["fingerprint"] != fp:
        raise UsageError("plant fingerprint mismatch: frontier was built for %s, configuration gives %s"
                         % (summary["fingerprint"], fp))
    os.makedirs(config.output_dir, exist_ok=True)
    rows, reports, checks = [], [], []
    for k, (D, design, point) in enumerate(_load_points(synth_dir, summary)):
        rep, _, _, _ = simulate_point(config, design, k)
        row = {"D": D, "gamma": point["gamma"], "lower_bits": point["lower_bits"], "upper_bits": point["upper_bits"],
               "rate_bits": rep.rate_bits, "rate_bits_se": rep.rate_bits_se,
               "rate_uncond_bits": rep.rate_uncond_bits, "rate_uncond_bits_se": rep.rate_uncond_bits_se,
               "entropy_bits": rep.cond_entropy_bits, "entropy_bits_se": rep.cond_entropy_bits_se,
               "sigma_e_sq": rep.sigma_e_sq, "sigma_e_sq_se": rep.sigma_e_sq_se,
               "escape_fraction": rep.escape_fraction, "ks_pass": rep.verdicts["ks"]["passed"],
               "autocorr_pass": rep.verdicts["autocorrelation"]["passed"],
               "crosscorr_pass": rep.verdicts["crosscorrelation"]["passed"],
               "stationarity_pass": rep.verdicts["stationarity"]["passed"]}
        rows.append(row)
        reports.append({"D": D, "report": rep.to_dict()})
        out("D = %.6g  rate = %.4f (+-%.4f)  uncond = %.4f  entropy = %.4f  sigma_e^2 = %.5g"
            % (D, rep.rate_bits, rep.rate_bits_se, rep.rate_uncond_bits, rep.cond_entropy_bits, rep.sigma_e_sq))
        tol = 2 * rep.rate_bits_se
        ordered = (row["lower_bits"] <= row["entropy_bits"] + 2 * rep.cond_entropy_bits_se
                   and row["entropy_bits"] <= row["rate_bits"] + tol
                   and row["rate_bits"] <= row["rate_uncond_bits"] + tol + 2 * rep.rate_uncond_bits_se)
        checks.append(_check("rate ordering at D=%.4g" % D, ordered,
                             "lower %.4f entropy %.4f rate %.4f uncond %.4f" % (
                                 row["lower_bits"], row["entropy_bits"], row["rate_bits"], row["rate_uncond_bits"])))
        checks.append(_check("distortion at D=%.4g" % D, rep.sigma_e_sq <= 1.03 * D,
                             "sigma_e^2 %.5g <= %.5g" % (rep.sigma_e_sq, 1.03 * D)))
    write_csv(os.path.join(config.output_dir, "measured.csv"), MEASURED_COLUMNS, rows)
    write_json(os.path.join(config.output_dir, "simulate.json"),
               {"fingerprint": fp, "master_seed": config.master_seed, "points": reports})
    return rows, checks


def acceptance_checks(config, synth_summary, frontier, points, rows, out=print):
    """Verdicts for the worked example (distortion floor, bound gap, duality,
    rate sandwich, measured gaps, distortion, coding-noise law, low-rate
    operating point)."""
    checks = []
    D_inf = synth_summary["D_inf"]
    checks.append(_check("D_inf reproduction", abs(D_inf - EXAMPLE_DINF) <= 5e-4,
                         "computed %.6f, reference %.4f +- 0.0005" % (D_inf, EXAMPLE_DINF)))
    gap = 0.5 * math.log2(2 * math.pi * math.e / 12) + 1
    worst = max(abs(p.upper_bits - p.lower_bits - gap) for p in frontier.points + points)
    checks.append(_check("bound gap identity", worst < 1e-12, "max deviation %.3g bits" % worst))
    # the sweep minimizes a Lagrangian; the primal route minimizes D under an SNR cap
    interior = frontier.points[1:-1]
    dual = max(abs(p.D - min_distortion_at_snr(config.plant, p.gamma, config.solver)[0]) / p.D for p in interior)
    checks.append(_check("frontier duality", dual < 1e-3,
                         "max relative |D - J(gamma(D))| over %d interior samples: %.3g" % (len(interior), dual)))
    inside = sum(r["lower_bits"] - 2 * r["rate_bits_se"] <= r["rate_bits"] <= r["upper_bits"] + 2 * r["rate_bits_se"]
                 for r in rows)
    checks.append(_check("rate sandwich", inside >= min(10, len(rows)) if len(rows) >= 12 else inside == len(rows),
                         "%d of %d points inside [lower, upper] +- 2 SE" % (inside, len(rows))))
    mid = rows[len(rows) // 2]
    rgap = mid["rate_bits"] - mid["lower_bits"]
    egap = mid["entropy_bits"] - mid["lower_bits"]
    checks.append(_check("measured rate gap", abs(rgap - EXAMPLE_RATE_GAP) <= 0.15,
                         "D=%.4g: %.3f bits (target 0.45 +- 0.15)" % (mid["D"], rgap)))
    checks.append(_check("measured entropy gap", abs(egap - EXAMPLE_ENTROPY_GAP) <= 0.10,
                         "D=%.4g: %.3f bits (target 0.25 +- 0.10)" % (mid["D"], egap)))
    bad = [r["D"] for r in rows if r["sigma_e_sq"] > 1.03 * r["D"]]
    checks.append(_check("distortion constraint", not bad, "violations at %s" % bad if bad else "all points"))
    # coding-noise law on one long run at the mid-grid design
    k = len(rows) // 2
    design = points[k].design
    long_cfg = replace(config, realizations=1, samples=100_000)
    rep, _, _, _ = simulate_point(long_cfg, design, 1000 + k)
    v = rep.runs[0].verdicts
    checks.append(_check("coding-noise law", v["ks"].passed and v["autocorrelation"].passed
                         and v["crosscorrelation"].passed,
                         "KS p=%.3g, max autocorr %.4f, max crosscorr %.4f (bound %.4f)" % (
                             v["ks"].detail["pvalue"], v["autocorrelation"].statistic,
                             v["crosscorrelation"].statistic, v["autocorrelation"].threshold)))
    # low-rate operating point near the distortion floor
    D_low = LOW_RATE_FACTOR * D_inf
    p = design_for_D(config.plant, D_low, config.solver, frontier)
    rep, _, _, _ = simulate_point(config, p.design, 2000)
    ok = rep.sigma_e_sq <= 1.05 * D_inf and rep.rate_bits < 3.0
    checks.append(_check("near-optimal performance below 3 bits", ok,
                         "D target %.5f: sigma_e^2 %.5f (limit %.5f), rate %.3f bits (lower bound %.3f)" % (
                             D_low, rep.sigma_e_sq, 1.05 * D_inf, rep.rate_bits, p.lower_bits)))
    for c in checks:
        out("%s  %s: %s" % ("PASS" if c["passed"] else "FAIL", c["name"], c["detail"]))
    return checks


LOW_RATE_FACTOR = 1.04


def cmd_reproduce_example(output_dir="out", master_seed=2011, out=print, workers=1):
    config = example_config(output_dir, master_seed)
    config.workers = workers
    summary, checks, frontier, points = cmd_synth(config, out)
    rows, sim_checks = cmd_simulate(config, out=out)
    checks += sim_checks
    acc = acceptance_checks(config, summary, frontier, points, rows, out)
    write_json(os.path.join(output_dir, "summary.json"), {"acceptance": acc, "consistency": checks})
    with open(os.path.join(output_dir, "summary.txt"), "w") as fh:
        for c in acc + checks:
            fh.write("%s  %s: %s\n" % ("PASS" if c["passed"] else "FAIL", c["name"], c["detail"]))
    return acc + checks


# ------------------------------------------------------------------ entry point

def _parser():
    ap = argparse.ArgumentParser(prog="ncsrate", description="Rate bounds and coder synthesis for LTI plants "
                                 "controlled over a noiseless digital channel.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("synth", "simulate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML or JSON experiment description")
        sp.add_argument("--out", help="output directory (overrides the configuration)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the configuration)")
        sp.add_argument("--workers", type=int, help="worker processes")
        if name == "simulate":
            sp.add_argument("--frontier", help="directory holding synth.json (default: output directory)")
    sp = sub.add_parser("reproduce-example")
    sp.add_argument("--out", default="out")
    sp.add_argument("--seed", type=int, default=2011)
    sp.add_argument("--workers", type=int, default=1)
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    try:
        if args.command == "reproduce-example":
            checks = cmd_reproduce_example(args.out, args.seed, workers=args.workers)
        else:
            config = load_config(args.config)
            if args.out:
                config.output_dir = args.out
            if args.seed is not None:
                config.master_seed = args.seed
            if args.workers:
                config.workers = args.workers
            if args.command == "synth":
                checks = cmd_synth(config)[1]
            else:
                checks = cmd_simulate(config, args.frontier)[1]
    except UsageError as err:
        print("error: %s" % err, file=sys.stderr)
        return 2
    failed = [c["name"] for c in checks if not c["passed"]]
    if failed:
        print("%d check(s) failed: %s" % (len(failed), ", ".join(failed)), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
