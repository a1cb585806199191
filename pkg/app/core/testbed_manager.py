"""
TestbedManager - Manages named testbed presets and builds discretized models from them.

A preset is a combination of:
- Triple: testbed id (A, B, C) and degrees
- Kahler scale of the base
- Metadata: preset name, description
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from app.core import geometry
from app.core.config import ExperimentConfig, GridConfig, TestbedConfig, _field_path
from app.core.errors import ConfigError
from app.core.geometry import FibrationModel

logger = logging.getLogger(__name__)

# symmetry modes each testbed can be discretized in
_SYMMETRIES = {
    "A": ("auto", geometry.BI_INVARIANT),
    "B": ("auto", geometry.CIRCLE_INVARIANT, geometry.FULL),
    "C": ("auto", geometry.BI_INVARIANT),
}


def _validated(triple: Dict[str, Any], prefix: str) -> TestbedConfig:
    try:
        return TestbedConfig.model_validate(triple)
    except ValidationError as exc:
        first = exc.errors()[0]
        path = _field_path(first)
        raise ConfigError(first.get("msg", "invalid value"),
                          field=f"{prefix}.{path}" if path else prefix) from exc


class TestbedManager:
    """Manages testbed presets stored in config/testbeds.json."""

    __test__ = False

    def __init__(self, config_dir: str = "config"):
        self.config_dir = config_dir
        self.testbeds_config_path = os.path.join(config_dir, "testbeds.json")
        self.testbeds: Dict[str, Dict[str, Any]] = {}
        self._load_testbeds()

    def _load_testbeds(self):
        """Load preset definitions, creating the defaults when the file is missing."""
        if not os.path.exists(self.testbeds_config_path):
            self._create_default_testbeds()
            return
        try:
            with open(self.testbeds_config_path, "r", encoding="utf-8") as f:
                self.testbeds = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed testbed presets: {exc.msg}", line=exc.lineno) from exc
        logger.info("[TestbedManager] Loaded %d testbeds from %s",
                    len(self.testbeds), self.testbeds_config_path)

    def _create_default_testbeds(self):
        self.testbeds = {
            "product-11": {
                "name": "P1 x P1, O(1,1)",
                "description": "Fubini-Study product; geodesic-Einstein with lambda = 1",
                "id": "A", "a": 1, "b": 1,
            },
            "product-12": {
                "name": "P1 x P1, O(1,2)",
                "description": "Fiber degree 2; direct image of rank 1",
                "id": "A", "a": 1, "b": 2,
            },
            "torus": {
                "name": "Torus x P1, O(0,1)",
                "description": "Flat base; lambda = 0 and c(phi) = 0 limits",
                "id": "B", "a": 0, "b": 1,
            },
            "projective-0-1": {
                "name": "P(O + O(-1))",
                "description": "Hirzebruch surface with O_P(E)(1)",
                "id": "C", "a": 0, "b": -1,
            },
            "projective-1-1": {
                "name": "P(O(1) + O(-1))",
                "description": "Unstable split bundle, witness P(O(1))",
                "id": "C", "a": 1, "b": -1,
            },
        }
        self._save_testbeds()

    def _save_testbeds(self):
        try:
            os.makedirs(self.config_dir, exist_ok=True)
            with open(self.testbeds_config_path, "w", encoding="utf-8") as f:
                json.dump(self.testbeds, f, indent=2, ensure_ascii=False)
                f.write("\n")
            logger.info("[TestbedManager] Saved testbeds to %s", self.testbeds_config_path)
        except OSError as exc:
            logger.warning("[TestbedManager] Could not save testbeds: %s", exc)

    def get_testbeds(self) -> Dict[str, Dict[str, Any]]:
        return self.testbeds.copy()

    def get_testbed(self, testbed_id: str) -> Optional[Dict[str, Any]]:
        return self.testbeds.get(testbed_id)

    def get_testbed_ids(self) -> List[str]:
        return list(self.testbeds.keys())

    def create_testbed(self, testbed_id: str, name: str, description: str, **triple) -> bool:
        """Add a preset after validating its triple."""
        if testbed_id in self.testbeds:
            logger.warning("[TestbedManager] Testbed '%s' already exists", testbed_id)
            return False
        _validated(triple, "testbed")
        self.testbeds[testbed_id] = {"name": name, "description": description, **triple}
        self._save_testbeds()
        logger.info("[TestbedManager] Created testbed: %s", name)
        return True

    def delete_testbed(self, testbed_id: str) -> bool:
        if testbed_id not in self.testbeds:
            logger.warning("[TestbedManager] Testbed '%s' not found", testbed_id)
            return False
        del self.testbeds[testbed_id]
        self._save_testbeds()
        logger.info("[TestbedManager] Deleted testbed: %s", testbed_id)
        return True

    def resolve(self, testbed: TestbedConfig) -> TestbedConfig:
        """Expand a preset reference into explicit degrees."""
        if testbed.preset is None:
            return testbed
        preset = self.get_testbed(testbed.preset)
        if preset is None:
            raise ConfigError(f"unknown testbed preset '{testbed.preset}'", field="testbed.preset")
        fields = {k: v for k, v in preset.items() if k in ("id", "a", "b", "omega_scale")}
        return _validated({**testbed.model_dump(exclude={"preset"}), **fields},
                          f"testbeds.{testbed.preset}")

    def build_model(self, testbed: TestbedConfig, grid: GridConfig) -> FibrationModel:
        """Discretize the configured triple."""
        testbed = self.resolve(testbed)
        allowed = _SYMMETRIES[testbed.id]
        if grid.symmetry not in allowed:
            raise ConfigError(f"symmetry mode '{grid.symmetry}' is not available on testbed {testbed.id}",
                              field="grid.symmetry")
        if testbed.id == "A":
            model = geometry.product_testbed(testbed.a, testbed.b, grid.n_base, grid.n_fiber,
                                             grid.base_extent, grid.fiber_extent, testbed.omega_scale)
        elif testbed.id == "B":
            if grid.symmetry == geometry.FULL:
                model = geometry.full_torus_model(min(grid.n_base, 32), min(grid.n_fiber, 64))
            else:
                model = geometry.torus_testbed(grid.n_base, grid.n_fiber, grid.fiber_extent,
                                               testbed.omega_scale)
        else:
            model = geometry.projective_testbed(testbed.a, testbed.b, grid.n_base, grid.n_fiber,
                                                grid.base_extent, grid.fiber_extent,
                                                testbed.omega_scale)
        logger.info("[TestbedManager] Built %s on grid %s", model.name, model.grid.shape)
        return model

    def model_for(self, config: ExperimentConfig) -> FibrationModel:
        return self.build_model(config.testbed, config.grid)
