import json

import pytest

from app.controllers.experiment_controller import ExperimentController
from app.controllers.verify_suite import VerifySuite
from app.core import geometry, reporting
from app.core.config import parse_config
from main import build_parser

SMALL = {
    "schema_version": 1,
    "grid": {"n_base": 32, "n_fiber": 32},
    "geodesic": {"n_times": 9, "epsilons": [1e-2, 1e-3]},
    "stability": {"degree_range": [-1, 1], "fiber_degree_range": [1, 2], "k_max": 4},
}


def _controller(tmp_path, payload, **kwargs):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(payload) if isinstance(payload, dict) else payload, encoding="utf-8")
    return ExperimentController(str(path), output_dir=str(tmp_path / "out"),
                                config_dir=str(tmp_path / "config"), **kwargs)


def test_parser_flags():
    args = build_parser().parse_args(["verify", "--seed", "7", "--out", "o", "--quiet"])
    assert (args.command, args.seed, args.out, args.quiet) == ("verify", 7, "o", True)
    assert args.config == "config/experiment.json"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["plot"])


def test_flow_writes_log_and_summary(tmp_path):
    assert _controller(tmp_path, SMALL).run("flow") == 0
    rows = reporting.read_csv(str(tmp_path / "out" / "flow.csv"))
    assert list(rows[0]) == ["iter", "L_value", "residual", "dt"]
    assert float(rows[-1]["residual"]) <= 1e-5
    summary = json.loads((tmp_path / "out" / "summary.json").read_text(encoding="utf-8"))
    assert summary["converged"]
    assert summary["final_residual"]["module"] == "solvers"


def test_geodesic_csv(tmp_path):
    assert _controller(tmp_path, SMALL).run("geodesic") == 0
    rows = reporting.read_csv(str(tmp_path / "out" / "geodesic.csv"))
    assert list(rows[0]) == ["t", "L_value", "residual", "epsilon"]
    assert len(rows) == 18


def test_stability_json(tmp_path):
    assert _controller(tmp_path, SMALL).run("stability") == 0
    payload = json.loads((tmp_path / "out" / "stability.json").read_text(encoding="utf-8"))
    assert payload["lambda_X"] == "1"
    unbalanced = next(e for e in payload["split_bundles"] if e["degrees"] == [-1, 1])
    assert unbalanced["fibration"]["verdict"] == "unstable"
    assert unbalanced["fibration"]["witness"] == "P(O(1))"


def test_df_csv(tmp_path):
    assert _controller(tmp_path, SMALL).run("df") == 0
    text = (tmp_path / "out" / "df.csv").read_text(encoding="utf-8")
    assert "\r" not in text
    rows = reporting.read_csv(str(tmp_path / "out" / "df.csv"))
    assert list(rows[0]) == ["testbed", "a", "b", "a0", "a1", "b0", "b1", "DF", "verdict"]
    assert all(r["DF"] == "0" for r in rows if r["testbed"] == "A")


def test_malformed_config_exits_2(tmp_path):
    assert _controller(tmp_path, {"grid": {"n_base": -1}}).run("flow") == 2
    assert _controller(tmp_path, "{ not json").run("flow") == 2


def test_unknown_subcommand_exits_2(tmp_path):
    assert _controller(tmp_path, SMALL).run("plot") == 2


def test_stalled_flow_exits_3(tmp_path):
    payload = dict(SMALL, flow={"dt0": 10.0, "dt_min": 1.0, "dt_max": 10.0, "scheme": "explicit"})
    assert _controller(tmp_path, payload).run("flow") == 3


def test_verify_is_deterministic(tmp_path):
    payload = dict(SMALL, verify={"decomposition_samples": 2, "schur_samples": 20, "lambda_potentials": 2,
                                  "variation_paths": 2, "flow_starts": 1, "minimum_candidates": 2,
                                  "lower_bound_potentials": 2},
                   bridge={"n_fiber": 160, "fiber_extent": 60.0})
    first = _controller(tmp_path, payload, seed=3)
    assert first.run("verify") == 0
    before = (tmp_path / "out" / "summary.json").read_bytes()
    assert _controller(tmp_path, payload, seed=3).run("verify") == 0
    assert (tmp_path / "out" / "summary.json").read_bytes() == before
    summary = json.loads(before)
    assert summary["passed"] and summary["seed"] == 3
    assert set(summary["checks"]["schur_closed_form"]) == {"value", "tolerance", "module", "passed"}


def test_dumps_formats_floats_with_17_digits():
    text = reporting.dumps({"b": 0.1, "a": float("nan")})
    assert text == '{\n  "a": null,\n  "b": 0.10000000000000001\n}\n'


def test_bad_testbed_preset_exits_2(tmp_path):
    config_dir = tmp_path / "config"
    config_dir.mkdir()
    (config_dir / "testbeds.json").write_text(json.dumps({"odd": {"id": "Z"}}), encoding="utf-8")
    assert _controller(tmp_path, dict(SMALL, testbed={"preset": "odd"})).run("flow") == 2


def test_unsupported_symmetry_exits_2(tmp_path):
    payload = dict(SMALL, grid={"n_base": 32, "n_fiber": 32, "symmetry": "circle-invariant"})
    assert _controller(tmp_path, payload).run("flow") == 2


def test_bridge_checks_pair_each_metric_with_its_own_model():
    config = parse_config(SMALL)
    suite = VerifySuite(config, geometry.product_testbed(1, 1, 32, 32))
    results = {r.name: r for r in suite.bridge()}
    assert all(r.passed for r in results.values())
    assert results["bridge_unequal_he"].value >= 0.1
