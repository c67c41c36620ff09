import os

import numpy as np
import pytest

from ncsrate.cli import (FRONTIER_COLUMNS, MEASURED_COLUMNS, UsageError, cmd_simulate, cmd_synth,
                         config_from_dict, example_config, load_config, log_grid, main, read_csv, write_csv)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

G = {"num": [0.165], "den": [1.0, -2.5789, 1.1578]}


def small_doc(out, D=(0.5, 1.2), seed=4):
    return {"master_seed": seed, "output_dir": str(out),
            "plant": {"P11": G, "P12": G, "P21": G, "P22": G},
            "grid": {"D": list(D)},
            "synthesis": {"youla_order": 12, "restarts": 1, "lambda_min": 1e-2, "lambda_max": 1e2,
                          "lambda_points": 7},
            "ecdq": {"training_samples": 20000},
            "montecarlo": {"realizations": 3, "samples": 3000, "warmup": 500}}


def test_example_toml_matches_builtin():
    cfg = load_config(os.path.join(ROOT, "configs", "example.toml"))
    builtin = example_config()
    assert cfg.plant.fingerprint() == builtin.plant.fingerprint()
    assert np.allclose(cfg.D_grid, builtin.D_grid)
    assert len(cfg.D_grid) == 12 and 0.22 < cfg.D_grid[0] and cfg.D_grid[-1] == pytest.approx(3.0)
    assert len(cfg.lambdas) == 40


def test_state_space_plant_section(tmp_path):
    doc = small_doc(tmp_path)
    doc["plant"] = {"A": [[2.5789, -1.1578], [1.0, 0.0]], "B": [[1.0, 1.0], [0.0, 0.0]],
                    "C": [[0.0, 0.165], [0.0, 0.165]], "D": [[0.0, 0.0], [0.0, 0.0]], "n_d": 1, "n_e": 1}
    ss = config_from_dict(doc).plant
    tf = config_from_dict(small_doc(tmp_path)).plant
    assert ss.tf("P11").almost_equal(tf.tf("P11"))


def test_log_grid():
    g = log_grid(0.22, 3.0, 12)
    assert g[-1] == pytest.approx(3.0) and all(np.diff(g) > 0) and g[0] > 0.22


def test_synth_prints_floor_first(tmp_path):
    lines = []
    summary = cmd_synth(config_from_dict(small_doc(tmp_path)), out=lines.append)[0]
    assert lines[0].startswith("D_inf = 0.2082")
    assert lines[1].startswith("Gamma_inf = 3.0")
    rows = read_csv(os.path.join(tmp_path, "frontier.csv"))
    assert [r["D"] for r in rows] == [0.5, 1.2]
    assert all(r["upper_bits"] - r["lower_bits"] == pytest.approx(1.2546, abs=1e-4) for r in rows)
    assert len(summary["designs"]) == 2


def test_infeasible_entry_named(tmp_path):
    with pytest.raises(UsageError, match=r"0\.1.*D_inf"):
        cmd_synth(config_from_dict(small_doc(tmp_path, D=(0.1, 0.5))), out=lambda s: None)


def test_empty_grid_is_usage_error(tmp_path):
    with pytest.raises(UsageError, match="empty"):
        cmd_synth(config_from_dict(small_doc(tmp_path, D=())), out=lambda s: None)
    assert main(["synth", "--config", _write_json(tmp_path, small_doc(tmp_path, D=()))]) == 2


def _write_json(tmp_path, doc):
    import json
    path = os.path.join(tmp_path, "cfg.json")
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def test_single_point_simulation_and_rerun(tmp_path):
    out = tmp_path / "a"
    cfg = config_from_dict(small_doc(out, D=(0.8,)))
    cmd_synth(cfg, out=lambda s: None)
    rows, checks = cmd_simulate(cfg, out=lambda s: None)
    assert len(rows) == 1
    table = read_csv(os.path.join(out, "measured.csv"))
    assert list(table[0]) == MEASURED_COLUMNS
    first = open(os.path.join(out, "measured.csv"), "rb").read()
    frontier = open(os.path.join(out, "frontier.csv"), "rb").read()
    cfg2 = config_from_dict(small_doc(out, D=(0.8,)))
    cmd_synth(cfg2, out=lambda s: None)
    cmd_simulate(cfg2, out=lambda s: None)
    assert open(os.path.join(out, "measured.csv"), "rb").read() == first
    assert open(os.path.join(out, "frontier.csv"), "rb").read() == frontier
    # rate ordering: lower <= entropy <= conditioned <= unconditioned
    r = table[0]
    assert r["lower_bits"] <= r["entropy_bits"] <= r["rate_bits"] <= r["rate_uncond_bits"]


def test_fingerprint_mismatch(tmp_path):
    cfg = config_from_dict(small_doc(tmp_path, D=(0.8,)))
    cmd_synth(cfg, out=lambda s: None)
    other = small_doc(tmp_path, D=(0.8,))
    g = {"num": [0.2], "den": G["den"]}
    other["plant"] = {"P11": g, "P12": g, "P21": g, "P22": g}
    with pytest.raises(UsageError, match="fingerprint"):
        cmd_simulate(config_from_dict(other), out=lambda s: None)


def test_csv_round_trip(tmp_path):
    rows = [{"D": 0.1 + k / 3, "gamma": np.pi * k, "lower_bits": 1 / 7, "upper_bits": 2.0, "sigma_q_sq": 1e-300,
             "converged": k % 2 == 0} for k in range(4)]
    path = os.path.join(tmp_path, "t.csv")
    write_csv(path, FRONTIER_COLUMNS, rows)
    assert read_csv(path) == rows


def test_main_runs_synth_and_simulate(tmp_path):
    path = _write_json(tmp_path, small_doc(tmp_path / "run", D=(0.8,)))
    assert main(["synth", "--config", path]) == 0
    assert main(["simulate", "--config", path]) == 0
    assert os.path.exists(tmp_path / "run" / "simulate.json")
