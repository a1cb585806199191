import logging
import os
import time
from typing import Callable, Dict, Optional

import numpy as np

from app.controllers.verify_suite import VerifySuite
from app.core import direct_image, functionals, geometry, reporting, solvers, stability
from app.core.config import ExperimentConfig, load_config
from app.core.errors import ConfigError, FlowStalled, LabError
from app.core.finsler import FinslerMetric
from app.core.geometry import compute_jets
from app.core.testbed_manager import TestbedManager

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_STALLED = 3


class ExperimentController:
    """
    Runs one subcommand against a loaded experiment config and writes its artifacts.
    """

    def __init__(self, config_path: str, output_dir: Optional[str] = None,
                 seed: Optional[int] = None, config_dir: str = "config"):
        self._config_path = config_path
        self._output_dir = output_dir
        self._seed = seed
        self._config_dir = config_dir
        self.config: Optional[ExperimentConfig] = None
        self._testbed_manager: Optional[TestbedManager] = None
        self._commands: Dict[str, Callable[[], bool]] = {
            "flow": self.run_flow,
            "geodesic": self.run_geodesic,
            "stability": self.run_stability,
            "df": self.run_df,
            "bridge": self.run_bridge,
            "verify": self.run_verify,
        }

    @property
    def commands(self):
        return list(self._commands)

    def run(self, command: str) -> int:
        """Dispatch a subcommand and map failures onto exit codes."""
        if command not in self._commands:
            logger.error("[Controller] Unknown subcommand '%s'", command)
            return EXIT_CONFIG
        try:
            self._load_configs()
            started = time.perf_counter()
            passed = self._commands[command]()
            logger.info("[Controller] %s finished in %.2fs", command, time.perf_counter() - started)
            return EXIT_OK if passed else EXIT_FAILURE
        except ConfigError as exc:
            logger.error("[Controller] Configuration error: %s", exc)
            return EXIT_CONFIG
        except FlowStalled as exc:
            logger.error("[Controller] Flow stalled: %s %s", exc, exc.diagnostics)
            return EXIT_STALLED
        except (LabError, ValueError) as exc:
            logger.error("[Controller] %s: %s", type(exc).__name__, exc)
            return EXIT_FAILURE

    def _load_configs(self):
        self.config = load_config(self._config_path, seed=self._seed, output_dir=self._output_dir)
        self._testbed_manager = TestbedManager(self._config_dir)

    def _path(self, name: str) -> str:
        return os.path.join(self.config.output_dir, name)

    def _rng(self) -> np.random.Generator:
        return np.random.default_rng(self.config.seed)

    def _flow_params(self) -> solvers.FlowParams:
        cfg = self.config.flow
        return solvers.FlowParams(cfg.dt0, cfg.tol_ge, cfg.max_iter, cfg.dt_min, cfg.dt_max,
                                  scheme=cfg.scheme)

    def _model(self):
        return self._testbed_manager.model_for(self.config)

    # --- subcommands ---

    def run_flow(self) -> bool:
        model = self._model()
        if model.reduced:
            start = compute_jets(model, geometry.random_bump(model, self._rng(),
                                                             self.config.flow.perturbation))
        else:
            start = compute_jets(model, np.zeros(model.grid.shape))
        result = solvers.gradient_flow(start, model, self._flow_params())
        reporting.write_csv(self._path("flow.csv"), ["iter", "L_value", "residual", "dt"],
                            ([s.iteration, s.value, s.residual, s.dt] for s in result.log))
        report = functionals.functional_report(result.final, model, result.lam)
        reporting.write_json(self._path("summary.json"), {
            "command": "flow",
            "testbed": model.name,
            "seed": self.config.seed,
            "scheme": result.scheme,
            "converged": result.converged,
            "iterations": result.iterations,
            "rejected_steps": result.rejected,
            "lambda": result.lam,
            "final_residual": reporting.measured(result.residual, self.config.flow.tol_ge, "solvers"),
            "energy_identity_gap": reporting.measured(result.energy_identity_gap(), None, "solvers"),
            "functionals": report.to_dict(),
        })
        return result.converged

    def run_geodesic(self) -> bool:
        model = self._model()
        cfg = self.config.geodesic
        zero = compute_jets(model, np.zeros(model.grid.shape))
        target = compute_jets(model, geometry.random_bump(model, self._rng(), cfg.perturbation))
        rows, summaries, paths = [], [], []
        for eps in cfg.epsilons:
            path = solvers.epsilon_geodesic(zero, target, eps, model, cfg.n_times)
            report = solvers.convexity_report(path, model)
            paths.append(path)
            for row, residual in zip(report.rows(), path.residuals):
                rows.append([row["t"], row["L_value"], float(residual), eps])
            summaries.append({
                "epsilon": eps,
                "converged": path.converged,
                "max_residual": reporting.measured(path.max_residual, 1e-8, "solvers"),
                "min_second_difference": report.min_second_difference,
                "lower_bound": report.lower_bound,
                "newton_iterations": path.newton_iterations,
                "continuation_steps": path.continuation_steps,
            })
        reporting.write_csv(self._path("geodesic.csv"), ["t", "L_value", "residual", "epsilon"], rows)
        # successive epsilons should give paths that settle toward the weak geodesic
        gaps = [a.sup_distance(b) for a, b in zip(paths, paths[1:])]
        reporting.write_json(self._path("summary.json"), {
            "command": "geodesic",
            "testbed": model.name,
            "seed": self.config.seed,
            "paths": summaries,
            "successive_sup_distances": gaps,
        })
        return all(p.converged for p in paths)

    def run_stability(self) -> bool:
        model = self._model()
        cfg = self.config.stability
        payload = {"testbed": model.name, "lambda_X": None, "verdict": None}
        data = stability.intersection_data(model)
        payload["lambda_X"] = stability.lambda_sub(data, "X")
        if data.catalogue:
            payload["verdict"] = stability.semistability_verdict(data).to_dict()
        table = []
        low, high = cfg.degree_range
        for a in range(low, high + 1):
            for b in range(a, high + 1):
                degrees = [a, b]
                verdict = stability.semistability_verdict(stability.projective_data(degrees))
                bridges = {f"O({d})": stability.slope_bridge([d]).holds for d in degrees}
                table.append({
                    "degrees": degrees,
                    "fibration": verdict.to_dict(),
                    "bundle": stability.bundle_semistability(degrees),
                    "polystable": stability.polystable_check_split(degrees).polystable,
                    "slope_bridge": bridges,
                })
        payload["split_bundles"] = table
        reporting.write_json(self._path("stability.json"), payload)
        return all(all(entry["slope_bridge"].values()) for entry in table)

    def run_df(self) -> bool:
        cfg = self.config.stability
        low, high = cfg.degree_range
        b_low, b_high = cfg.fiber_degree_range
        rows = []
        for a in range(low, high + 1):
            for b in range(max(b_low, 1), b_high + 1):
                rows.append(self._df_row("A", a, b, stability.product_data(a, b)))
        for a in range(low, high + 1):
            for b in range(a, high + 1):
                rows.append(self._df_row("C", a, b, stability.projective_data([a, b])))
        reporting.write_csv(self._path("df.csv"),
                            ["testbed", "a", "b", "a0", "a1", "b0", "b1", "DF", "verdict"], rows)
        return True

    @staticmethod
    def _df_row(testbed: str, a: int, b: int, data) -> list:
        coeffs = stability.grr_expansion(data)
        obstruction = stability.df_obstruction(data)
        return [testbed, a, b, coeffs.a0, coeffs.a1, coeffs.b0, coeffs.b1, coeffs.df,
                obstruction.verdict]

    def run_bridge(self) -> bool:
        cfg = self.config.bridge
        grid = self.config.grid
        dual_grid = dict(n_base=grid.n_base, n_fiber=cfg.n_fiber, fiber_extent=cfg.fiber_extent)
        reports = []
        for d1, d2 in cfg.degrees:
            model = geometry.projective_testbed(d1, d2, grid.n_base, grid.n_fiber,
                                                grid.base_extent, grid.fiber_extent)
            for eps in cfg.epsilons:
                metric = FinslerMetric((d1, d2), epsilon=eps)
                report = direct_image.finsler_einstein_bridge(metric, model, cfg.tolerance, **dual_grid)
                reports.append({"epsilon": eps, **report.to_dict()})
        reporting.write_json(self._path("bridge.json"), {
            "tolerance": cfg.tolerance,
            "reports": reports,
        })
        return all(r["consistent"] for r in reports)

    def run_verify(self) -> bool:
        suite = VerifySuite(self.config, self._model())
        results = suite.run()
        failed = [r.name for r in results if not r.passed]
        reporting.write_json(self._path("summary.json"), {
            "command": "verify",
            "seed": self.config.seed,
            "checks": {r.name: r.to_dict() for r in results},
            "failed": failed,
            "passed": not failed,
        })
        if failed:
            logger.warning("[Controller] %d of %d checks failed: %s",
                           len(failed), len(results), ", ".join(failed))
        else:
            logger.info("[Controller] All %d checks passed", len(results))
        return not failed
