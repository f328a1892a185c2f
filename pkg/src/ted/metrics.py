"""Accuracy and MAE for predicted labels and explanations.

Continuous values are scored both as-is and after discretising to
{-1, 0, 1}, where a neutral/positive mix-up costs 1 and an opposite-extreme
error costs 2. For vector-valued explanations the headline MAE is the mean
absolute error per attribute; the per-instance attribute sum is reported
alongside (``*_sum`` fields).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .dataset import CATEGORICAL, Discretizer, SpaceDescriptor, discretize, payload_matrix


def classification_accuracy(pred, true) -> float:
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions, {true.shape[0]} targets")
    if pred.size == 0:
        raise ValueError("no predictions to score")
    return float(np.mean(pred == true))


def _aligned(pred, true):
    P = payload_matrix(pred)
    T = payload_matrix(true)
    if P.shape != T.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {T.shape}")
    if P.shape[0] == 0:
        raise ValueError("no predictions to score")
    return P, T


def mae_continuous(pred, true, per_attribute: bool = True) -> float:
    """Mean over instances of the l1 distance, divided by the attribute count when ``per_attribute``."""
    P, T = _aligned(pred, true)
    per_instance = np.abs(P - T).sum(axis=1)
    if per_attribute:
        per_instance = per_instance / P.shape[1]
    return float(per_instance.mean())


def mae_discretized(pred, true, d_pred: Discretizer, d_true: Discretizer | None = None, per_attribute: bool = True) -> float:
    """MAE after mapping both sides to {-1, 0, 1}."""
    P, T = _aligned(pred, true)
    d_true = d_pred if d_true is None else d_true
    return mae_continuous(discretize(P, d_pred), discretize(T, d_true), per_attribute)


@dataclass
class MetricsReport:
    n: int
    y_accuracy: float | None = None
    y_mae_discretized: float | None = None
    y_mae_continuous: float | None = None
    e_accuracy: float | None = None
    e_mae_discretized: float | None = None
    e_mae_continuous: float | None = None
    e_mae_discretized_sum: float | None = None
    e_mae_continuous_sum: float | None = None
    joint_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# (field, column heading) in display order
COLUMNS = (
    ("y_accuracy", "Y acc"),
    ("y_mae_discretized", "Y MAE disc"),
    ("y_mae_continuous", "Y MAE cont"),
    ("e_accuracy", "E acc"),
    ("e_mae_discretized", "E MAE disc"),
    ("e_mae_continuous", "E MAE cont"),
    ("e_mae_discretized_sum", "E MAE disc (sum)"),
    ("e_mae_continuous_sum", "E MAE cont (sum)"),
    ("joint_accuracy", "Y&E acc"),
)


def _score_space(prefix, pred, true, space: SpaceDescriptor, disc: Discretizer | None, out: dict):
    if space.kind == CATEGORICAL:
        out[f"{prefix}_accuracy"] = classification_accuracy(pred, true)
        return
    out[f"{prefix}_mae_continuous"] = mae_continuous(pred, true)
    if prefix == "e" and space.n_columns > 1:
        out["e_mae_continuous_sum"] = mae_continuous(pred, true, per_attribute=False)
    if disc is None:
        return
    out[f"{prefix}_mae_discretized"] = mae_discretized(pred, true, disc)
    if prefix == "y":
        # 0-1 error on the discretised label; not reported for explanations
        out["y_accuracy"] = classification_accuracy(discretize(pred, disc), discretize(true, disc))
    elif space.n_columns > 1:
        out["e_mae_discretized_sum"] = mae_discretized(pred, true, disc, per_attribute=False)


def evaluate_run(predictions: dict, ground_truth: dict, spaces: dict, discretizers: dict | None = None) -> MetricsReport:
    """Score whichever of ``"y"``, ``"e"`` and ``"joint"`` are present in ``predictions``.

    ``ground_truth`` and ``spaces`` are keyed the same way (``spaces`` needs
    ``"y"``/``"e"``); ``discretizers`` maps ``"y"``/``"e"`` to the thresholds
    used for the discretised scores of continuous spaces.
    """
    discretizers = discretizers or {}
    unknown = set(predictions) - {"y", "e", "joint"}
    if unknown:
        raise ValueError(f"unknown prediction keys {sorted(unknown)}")
    if not predictions:
        raise ValueError("no predictions given")
    n = None
    out = {}
    for key in ("y", "e"):
        if key not in predictions:
            continue
        if key not in ground_truth or key not in spaces:
            raise ValueError(f"missing ground truth or space for {key!r}")
        pred = np.asarray(predictions[key])
        if len(pred) == 0:
            raise ValueError("empty prediction set")
        if n is not None and len(pred) != n:
            raise ValueError("prediction sets differ in length")
        n = len(pred)
        _score_space(key, pred, ground_truth[key], spaces[key], discretizers.get(key), out)
    if "joint" in predictions:
        out["joint_accuracy"] = classification_accuracy(predictions["joint"], ground_truth["joint"])
        n = n if n is not None else len(predictions["joint"])
    return MetricsReport(n=int(n), **out)


def _fmt(v):
    if v is None:
        return "NA"
    return f"{v:.4f}" if math.isfinite(v) else str(v)


def format_table(rows, sweep_name: str = "lambda or k") -> str:
    """Plain-text table; ``rows`` is an iterable of ``(method, sweep_value, MetricsReport)``."""
    rows = list(rows)
    used = [(f, h) for f, h in COLUMNS if any(getattr(r[2], f) is not None for r in rows)]
    header = ["Method", sweep_name] + [h for _, h in used]
    body = [[str(m), str(s)] + [_fmt(getattr(rep, f)) for f, _ in used] for m, s, rep in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

    def render(line):
        return "  ".join(cell.ljust(w) if i < 2 else cell.rjust(w) for i, (cell, w) in enumerate(zip(line, widths)))

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([render(header), sep] + [render(line) for line in body])
