"""
CSV and JSON artifact writers.

Floats are written with 17 significant digits, JSON keys are sorted and no
timestamps are emitted, so equal inputs give byte-identical files.
"""

import csv
import json
import logging
import math
import os
import re
from fractions import Fraction
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_FLOAT_TAG = "\u0000f17:"
_FLOAT_PATTERN = re.compile('"' + re.escape(json.dumps(_FLOAT_TAG)[1:-1]) + r'([^"]*)"')


def format_float(value: float) -> str:
    return format(float(value), ".17g")


def measured(value: Any, tolerance: Optional[float], module: str) -> Dict[str, Any]:
    """A reported number with the tolerance it was checked against and its producing module."""
    return {"value": value, "tolerance": tolerance, "module": module}


def _prepare(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _prepare(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_prepare(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_prepare(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(float(obj)):
            return None
        return _FLOAT_TAG + format_float(obj)
    return obj


def dumps(payload: Any) -> str:
    text = json.dumps(_prepare(payload), indent=2, sort_keys=True, ensure_ascii=False)
    return _FLOAT_PATTERN.sub(lambda m: m.group(1), text) + "\n"


def write_json(path: str, payload: Any) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(payload))
    logger.info("[Report] Wrote %s", path)
    return path


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(value) if math.isfinite(float(value)) else ""
    if isinstance(value, Fraction):
        return str(value)
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.info("[Report] Wrote %s", path)
    return path


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
