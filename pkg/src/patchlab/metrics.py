"""
Accuracy metrics over (class, subgroup) cells and multi-trial summaries.

A cell table is a dict {(y, z): accuracy or None}; None marks a cell with
no examples, which is skipped by every reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError


def predicted_labels(model, x):
    """Argmax class per row; ties go to the lowest index (np.argmax semantics)."""
    return np.argmax(ad.value_of(model(np.asarray(x, dtype=np.float64))), axis=1)


def cell_table(pred, y, z, cells=None):
    """Per-(y, z) accuracy of predicted labels, with cell sizes."""
    pred, y, z = np.asarray(pred), np.asarray(y), np.asarray(z)
    if cells is None:
        cells = sorted(set(zip(y.tolist(), z.tolist())))
    table, sizes = {}, {}
    for cy, cz in cells:
        m = (y == cy) & (z == cz)
        sizes[(cy, cz)] = int(m.sum())
        table[(cy, cz)] = float(np.mean(pred[m] == cy)) if m.any() else None
    return table, sizes


def subgroup_accuracies(model, examples, cells=None):
    table, _ = cell_table(predicted_labels(model, examples.x), examples.y, examples.z, cells)
    return table


def _present(table):
    vals = [v for v in table.values() if v is not None]
    if not vals:
        raise ContractError("no present cells")
    return vals


def robust_accuracy(table):
    """Worst cell accuracy."""
    return min(_present(table))


def subgroup_gap(table, y):
    """Best minus worst subgroup accuracy within class y."""
    vals = _present({k: v for k, v in table.items() if k[0] == y})
    return max(vals) - min(vals)


def aggregate_accuracy(table, sizes):
    """Size-weighted mean over present cells."""
    keys = [k for k, v in table.items() if v is not None]
    if not keys:
        raise ContractError("no present cells")
    w = np.array([sizes[k] for k in keys], dtype=np.float64)
    if np.any(w <= 0):
        raise ContractError("present cells need positive sizes")
    return float(np.dot(w, [table[k] for k in keys]) / w.sum())


@dataclass
class EvalReport:
    cells: dict
    sizes: dict
    aggregate: float
    robust: float
    gaps: dict

    @classmethod
    def from_predictions(cls, pred, y, z, cells=None):
        table, sizes = cell_table(pred, y, z, cells)
        classes = sorted({c for c, _ in table})
        return cls(table, sizes, aggregate_accuracy(table, sizes), robust_accuracy(table),
                   {c: subgroup_gap(table, c) for c in classes})

    @classmethod
    def evaluate(cls, model, examples, cells=None):
        return cls.from_predictions(predicted_labels(model, examples.x), examples.y, examples.z, cells)

    @property
    def max_gap(self):
        return max(self.gaps.values())

    def as_dict(self):
        return {"agg_acc": self.aggregate, "robust_acc": self.robust,
                **{f"acc_{y}_{z}": v for (y, z), v in sorted(self.cells.items())},
                **{f"gap_{y}": v for y, v in sorted(self.gaps.items())}}


@dataclass
class TrialSummary:
    """Mean and unbiased standard deviation of each metric across trials."""

    n: int
    mean: dict
    std: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows):
        rows = list(rows)
        if not rows:
            raise ContractError("no trials to summarise")
        keys = [k for k in rows[0] if all(r.get(k) is not None for r in rows)]
        mean, std = {}, {}
        for k in keys:
            vals = np.array([r[k] for r in rows], dtype=np.float64)
            mean[k] = float(vals.mean())
            std[k] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return cls(len(rows), mean, std)

    def format(self, key, percent=True):
        scale = 100.0 if percent else 1.0
        return f"{self.mean[key] * scale:.2f} ({self.std[key] * scale:.2f})"


def percent(value):
    return f"{100.0 * value:.2f}"
