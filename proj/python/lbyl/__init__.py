"""Data-free restoration of pruned convolutional networks.

Plans and reports cross the boundary as JSON text; the helpers here decode
them into plain Python objects.
"""

import json

from . import _lbyl
from ._lbyl import LbylError, Model, accuracy, generate, probe_data, solve_coefficients

__all__ = [
    "LbylError",
    "Model",
    "accuracy",
    "compare",
    "evaluate",
    "generate",
    "global_prune",
    "plan",
    "probe_data",
    "restore",
    "solve_coefficients",
    "sweep",
]


def _text(plan):
    return plan if isinstance(plan, str) else json.dumps(plan)


def plan(model, criterion="l2", ratio=0.3, scheme="layerwise"):
    """Pruning plan as a dict: {"criterion", "ratio", "layers": {"idx": [filters]}}."""
    return json.loads(_lbyl.plan(model, criterion, ratio, scheme))


def evaluate(model, plan, method="lbyl", lambda1=1e-5, lambda2=1e-3, inputs=None, labels=None):
    """Restore under `plan` and return (restored model, report dict)."""
    restored, report = _lbyl.evaluate(model, _text(plan), method, lambda1, lambda2, inputs, labels)
    return restored, json.loads(report)


def compare(model, plan, inputs, methods=("lbyl", "nm", "none")):
    return json.loads(_lbyl.compare(model, _text(plan), list(methods), inputs))


def global_prune(model, inputs, criterion="l2", threshold=0.3, step=0.1, max_ratio=0.9):
    """Returns (pruned model, plan dict, report dict)."""
    pruned, plan_text, report = _lbyl.global_prune(model, criterion, threshold, step, max_ratio, inputs)
    return pruned, json.loads(plan_text), json.loads(report)


def sweep(model, plan, grid, inputs):
    """`grid` is "l1:l2,l1:l2,..." or a list of (lambda1, lambda2) pairs."""
    if not isinstance(grid, str):
        grid = ",".join(f"{a!r}:{b!r}" for a, b in grid)
    return json.loads(_lbyl.sweep(model, _text(plan), grid, inputs))


def restore(model, plan, method="lbyl", lambda1=1e-5, lambda2=1e-3, nm_lambda=0.85, nm_threshold=0.1):
    """Restored model under `plan` (dict or JSON text)."""
    return _lbyl.restore(model, _text(plan), method, lambda1, lambda2, nm_lambda, nm_threshold)
