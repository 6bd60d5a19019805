"""
Training objectives: ERM / GDRO / SGDRO risks, the stochastic group-weight
solver, subgroup consistency regularizers and their alternatives.

Functions take prediction rows (class probabilities). They accept either
plain arrays, returning floats/arrays, or autodiff tensors, returning
tensors, so the same code serves evaluation and training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ParameterError, ShapeError


def _is_tensor(*xs):
    return any(isinstance(x, ad.Tensor) for x in xs)


def _result(t, as_tensor):
    if as_tensor:
        return t
    return float(t.data) if t.data.ndim == 0 else t.data


def _kl_rows(p, q):
    """KL along the last axis, 0 log 0 = 0."""
    return (ad.xlogy(p, p) - ad.xlogy(p, q)).sum(axis=-1)


# --------------------------------------------------------------- risk terms

def cross_entropy(predictions, labels):
    """Per-example -log p[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    p = ad.as_tensor(predictions)
    if p.ndim != 2 or p.shape[0] != labels.size:
        raise ShapeError(f"predictions {p.shape} do not match {labels.size} labels")
    logp = ad.log_of(predictions) if isinstance(predictions, ad.Tensor) else ad.log(p)
    return -logp[np.arange(labels.size), labels]


def erm_loss(predictions, labels):
    """Mean cross-entropy."""
    return _result(cross_entropy(predictions, labels).mean(), _is_tensor(predictions))


def group_mean_losses(per_example, y, z, cells):
    """Mean of ``per_example`` within each (y, z) cell; None for absent cells."""
    y, z = np.asarray(y), np.asarray(z)
    out = []
    for cy, cz in cells:
        idx = np.flatnonzero((y == cy) & (z == cz))
        out.append(per_example[idx].mean() if idx.size else None)
    return out


def gdro_loss(group_losses):
    """Worst group loss."""
    present = [g for g in group_losses if g is not None]
    if not present:
        raise ContractError("GDRO loss needs at least one nonempty group")
    if _is_tensor(*present):
        return ad.maximum_of(present)
    return float(max(float(ad.value_of(g)) for g in present))


def sgdro_loss(cell_losses):
    """Mean over classes of the worst subgroup loss within the class.

    ``cell_losses`` maps (y, z) -> loss (None for empty cells).
    """
    by_class = {}
    for (y, _), loss in cell_losses.items():
        by_class.setdefault(y, [])
        if loss is not None:
            by_class[y].append(loss)
    for y, losses in by_class.items():
        if not losses:
            raise ContractError(f"class {y} has no nonempty subgroup")
    worst = [gdro_loss(v) for _, v in sorted(by_class.items())]
    if _is_tensor(*worst):
        return ad.stack([w.reshape(()) for w in worst]).mean()
    return float(np.mean(worst))


# ------------------------------------------------------ stochastic group DRO

@dataclass(frozen=True)
class GroupWeights:
    """Simplex point over groups plus the exponentiated-gradient step size."""

    weights: np.ndarray
    eta: float = 0.01

    @classmethod
    def uniform(cls, n, eta=0.01):
        return cls(np.full(n, 1.0 / n), eta)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ContractError("group weights must lie on the simplex")
        if self.eta < 0:
            raise ParameterError("eta must be non-negative")
        object.__setattr__(self, "weights", w)


def gdro_stochastic_update(state, losses, group_sizes, adjustment=0.0):
    """One exponentiated-gradient step on the group weights.

    Each present group's loss is adjusted to l + C / sqrt(n_g), its weight is
    multiplied by exp(eta * adjusted loss) and the weights are renormalised.
    Absent groups (loss None) keep their unnormalised weight and drop out of
    the returned objective sum_g w_g * adjusted_g.
    """
    sizes = np.asarray(group_sizes, dtype=np.float64)
    if len(losses) != state.weights.size or sizes.size != state.weights.size:
        raise ShapeError("one loss and one size per group")
    if adjustment and np.any(sizes <= 0):
        raise ParameterError("group sizes must be positive when an adjustment is used")
    bonus = adjustment / np.sqrt(sizes) if adjustment else np.zeros_like(sizes)
    values = np.array([0.0 if l is None else float(ad.value_of(l)) for l in losses])
    if not np.all(np.isfinite(values)):
        raise ParameterError("group losses must be finite")
    present = np.array([l is not None for l in losses])
    step = np.where(present, state.eta * (values + bonus), 0.0)
    # shift for overflow safety; cancels on normalisation
    logw = np.log(state.weights, where=state.weights > 0,
                  out=np.full_like(state.weights, -np.inf)) + step
    w = np.exp(logw - logw[np.isfinite(logw)].max())
    w = w / w.sum()
    new_state = GroupWeights(w, state.eta)

    terms = [(losses[g] + bonus[g]) * float(w[g]) for g in range(w.size) if present[g]]
    if _is_tensor(*terms):
        total = ad.stack([t.reshape(()) for t in terms]).sum()
    else:
        total = float(sum(terms))
    return new_state, total


@dataclass(frozen=True)
class SubgroupWeights:
    """One GroupWeights per class over that class's subgroups (class-conditional DRO)."""

    per_class: dict

    @classmethod
    def uniform(cls, cells, eta=0.01):
        by_class = {}
        for y, z in cells:
            by_class.setdefault(y, []).append(z)
        return cls({y: (tuple(zs), GroupWeights.uniform(len(zs), eta))
                    for y, zs in sorted(by_class.items())})


def sgdro_stochastic_update(state, cell_losses, cell_sizes, adjustment=0.0):
    """Per-class exponentiated-gradient step; returns (state, mean of class objectives)."""
    new, totals = {}, []
    for y, (zs, gw) in state.per_class.items():
        losses = [cell_losses.get((y, z)) for z in zs]
        sizes = [cell_sizes.get((y, z), 0) for z in zs]
        gw2, total = gdro_stochastic_update(gw, losses, sizes, adjustment)
        new[y] = (zs, gw2)
        totals.append(total)
    if _is_tensor(*totals):
        return SubgroupWeights(new), ad.stack([t.reshape(()) for t in totals]).mean()
    return SubgroupWeights(new), float(np.mean(totals))


# --------------------------------------------------------------- consistency

def self_consistency(augmented):
    """Mean KL of each augmented prediction to their mean.

    ``augmented`` has shape (..., k, C); returns shape (...).
    """
    a = ad.as_tensor(augmented)
    if a.ndim < 2 or a.shape[-2] < 2:
        raise ShapeError("self-consistency needs k >= 2 augmented predictions")
    m = a.mean(axis=-2, keepdims=True)
    return _result(_kl_rows(a, m).mean(axis=-1), _is_tensor(augmented))


def translation_consistency(original, mean_augmented):
    """KL(f(x) || m~), along the last axis."""
    return _result(_kl_rows(ad.as_tensor(original), ad.as_tensor(mean_augmented)),
                   _is_tensor(original, mean_augmented))


@dataclass
class AugmentedBatch:
    """Predictions on originals (n, C) and on their augmented coupled sets (n, k, C)."""

    original: object
    augmented: object

    def __post_init__(self):
        o, a = ad.as_tensor(self.original), ad.as_tensor(self.augmented)
        if o.ndim != 2 or a.ndim != 3 or a.shape[0] != o.shape[0] or a.shape[2] != o.shape[1]:
            raise ShapeError(f"incompatible shapes {o.shape} and {a.shape}")
        if o.shape[0] == 0:
            raise ContractError("empty batch")

    @property
    def mean_augmented(self):
        return ad.as_tensor(self.augmented).mean(axis=1)


def consistency_terms(batch):
    """Per-example (L_s, L_t) as tensors."""
    a = ad.as_tensor(batch.augmented)
    ls = self_consistency(a)
    lt = translation_consistency(ad.as_tensor(batch.original), a.mean(axis=1))
    return ls, lt


def total_consistency(batch):
    """Half the batch mean of self- plus translation-consistency."""
    ls, lt = consistency_terms(batch)
    return _result(((ls + lt) * 0.5).mean(), _is_tensor(batch.original, batch.augmented))


@dataclass(frozen=True)
class ConsistencyConfig:
    target: float
    anneal_rate: float = 0.0
    current: float = None

    def __post_init__(self):
        if self.target < 0 or self.anneal_rate < 0:
            raise ParameterError("consistency strength and anneal rate must be non-negative")
        if self.current is None:
            object.__setattr__(self, "current", 0.0 if self.anneal_rate else float(self.target))
        if not 0 <= self.current <= self.target:
            raise ParameterError("current strength must lie in [0, target]")


def anneal_lambda(config, step):
    """Linear ramp min(target, step * rate); a zero rate means no ramp (full target)."""
    if config.anneal_rate == 0:
        return replace(config, current=float(config.target))
    return replace(config, current=float(min(config.target, step * config.anneal_rate)))


def camel_objective(sgdro_term, consistency_term, config):
    return sgdro_term + config.current * consistency_term


def uda_consistency(original, augmented):
    """sum_z KL(f(x) || f(x~_z)); ``augmented`` is (..., k, C)."""
    o, a = ad.as_tensor(original), ad.as_tensor(augmented)
    o = o.reshape(o.shape[:-1] + (1,) + o.shape[-1:])
    return _result(_kl_rows(o, a).sum(axis=-1), _is_tensor(original, augmented))


def augmix_consistency(original, augmented):
    """JS divergence of the original together with its k augmentations."""
    o, a = ad.as_tensor(original), ad.as_tensor(augmented)
    o = o.reshape(o.shape[:-1] + (1,) + o.shape[-1:])
    allp = ad.concat([o, a], axis=-2)
    m = allp.mean(axis=-2, keepdims=True)
    return _result(_kl_rows(allp, m).mean(axis=-1), _is_tensor(original, augmented))
