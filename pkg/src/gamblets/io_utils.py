"""JSON output with fixed float formatting."""

import json
import math
from pathlib import Path

import numpy as np


def _encode(obj, indent, level):
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(str(k)) + ": " + _encode(v, indent, level + 1) for k, v in obj.items()]
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        if all(not isinstance(x, (dict, list, tuple, np.ndarray)) for x in seq):
            return "[" + ", ".join(_encode(x, indent, level + 1) for x in seq) + "]"
        return "[" + pad + ("," + pad).join(_encode(x, indent, level + 1) for x in seq) + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        return format(x, ".17g")
    if obj is None:
        return "null"
    if isinstance(obj, Path):
        return json.dumps(str(obj))
    return json.dumps(obj)


def dumps_json(obj, indent=1):
    """Serialize ``obj`` with every float written to 17 significant digits; non-finite floats become null."""
    return _encode(obj, indent, 0) + "\n"


def dump_json(path, obj, indent=1):
    Path(path).write_text(dumps_json(obj, indent))
