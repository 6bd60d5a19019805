"""
Mutual information between predictions and subgroups.

Exact quantities come from enumerating a finite joint distribution; the
variational estimate trains a small per-class domain head and reports
H(Z|Y) minus its cross-entropy, which lower-bounds I(features; Z | Y).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .divergences import (LOG2, entropy, jsd, jsd_from_pair_distance,
                          pair_discriminator_distance)
from .errors import ContractError, TrainingError, UnsupportedCaseError

JOINT_TOL = 1e-12


def predict(model, x):
    """Class-probability rows as a plain array (model may return a Tensor)."""
    return np.asarray(ad.value_of(model(np.asarray(x, dtype=np.float64))), dtype=np.float64)


# ------------------------------------------------------------- finite joints

@dataclass
class FiniteJoint:
    """Probability table with one axis per named variable."""

    table: np.ndarray
    variables: tuple

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        self.variables = tuple(self.variables)
        if self.table.ndim != len(self.variables) or len(set(self.variables)) != len(self.variables):
            raise ContractError("one distinct variable name per table axis")
        if np.any(self.table < 0) or abs(self.table.sum() - 1.0) > JOINT_TOL:
            raise ContractError("joint entries must be non-negative and sum to one")

    @property
    def arity(self):
        return dict(zip(self.variables, self.table.shape))

    def axes(self, names):
        try:
            return tuple(self.variables.index(n) for n in names)
        except ValueError:
            unknown = [n for n in names if n not in self.variables]
            raise ContractError(f"unknown variable(s) {unknown}") from None

    def marginal(self, names):
        """Table over ``names`` (in the joint's axis order), other axes summed out."""
        keep = self.axes(names)
        drop = tuple(i for i in range(self.table.ndim) if i not in keep)
        return self.table.sum(axis=drop, keepdims=True)

    def entropy(self, names):
        return entropy(self.marginal(names).ravel())


def _names(v):
    return (v,) if isinstance(v, str) else tuple(v)


def exact_conditional_mi(joint, a, b, given=()):
    """I(A; B | C) = sum p(a,b,c) log[p(a,b,c) p(c) / (p(a,c) p(b,c))].

    ``a``, ``b`` and ``given`` are variable names or tuples of names.
    """
    a, b, c = _names(a), _names(b), _names(given)
    joint.axes(a + b + c)
    if set(a) & set(b) or set(a + b) & set(c):
        raise ContractError("variable groups must be disjoint")
    pabc = joint.marginal(a + b + c)
    pac, pbc, pc = joint.marginal(a + c), joint.marginal(b + c), joint.marginal(c)
    num = pabc * pc
    den = pac * pbc
    mask = pabc > 0
    num, den = np.broadcast_to(num, pabc.shape)[mask], np.broadcast_to(den, pabc.shape)[mask]
    return max(float(np.sum(pabc[mask] * np.log(num / den))), 0.0)


def world_joint(model, world):
    """Joint over ("cid", "y", "z", "yhat") induced by a world and a model.

    The prediction Yhat is drawn from the model's output distribution, so
    p(cid, y, z, yhat) = p(x) f(x)[yhat].
    """
    ex, probs = world.enumerate()
    preds = predict(model, ex.x)
    C, k = world.num_classes, world.k
    table = np.zeros((C * world.num_latents, C, k, preds.shape[1]))
    np.add.at(table, (ex.coupled_id, ex.y, ex.z), probs[:, None] * preds)
    return FiniteJoint(table / table.sum(), ("cid", "y", "z", "yhat"))


def _coupled_predictions(model, world):
    """(cid, y, p(cid), p(z|cid), predictions (k, C)) for every coupled set."""
    lat = np.arange(world.num_latents)
    for y in range(world.num_classes):
        zs = world.subgroups(y)
        xs = np.stack([world.render(y, z, lat) for z in zs], axis=1)  # (L, k, d)
        preds = predict(model, xs.reshape(-1, world.input_dim)).reshape(world.num_latents, len(zs), -1)
        pz = np.array([world.subgroup_weights[y, z] for z in zs])
        for l in lat:
            p_set = world.class_weights[y] * world.latent_weights[y, l]
            yield world.coupled_id(y, l), y, p_set, pz / pz.sum(), preds[l]


def coupled_mi_as_jsd(model, world):
    """(exact I(Yhat; Z | [X]) from the joint table, E_[x] JSD of coupled predictions)."""
    mi = exact_conditional_mi(world_joint(model, world), "yhat", "z", "cid")
    total = norm = 0.0
    for _, _, p_set, pz, preds in _coupled_predictions(model, world):
        total += p_set * jsd(preds, pz)
        norm += p_set
    return mi, float(total / norm)


def chain_rule_gap(model, world):
    """I(Yhat; Z | [X]) - I(Yhat; Z | Y), non-negative when Z is independent of [X] given Y."""
    joint = world_joint(model, world)
    return (exact_conditional_mi(joint, "yhat", "z", "cid")
            - exact_conditional_mi(joint, "yhat", "z", "y"))


# ---------------------------------------------------------------- bound audit

@dataclass
class BoundReport:
    lhs: float
    rhs: float
    slack: float
    terms: dict
    seeds: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
                           "terms": self.terms, "seeds": self.seeds}, sort_keys=True)


def point_vs_atoms(point, atoms):
    """Two distributions on the union of supports: a point mass and a finite mixture."""
    support = [np.asarray(point, dtype=np.float64)]
    q = [0.0]
    for prob, vec in atoms:
        vec = np.asarray(vec, dtype=np.float64)
        for i, s in enumerate(support):
            if np.array_equal(s, vec):
                q[i] += prob
                break
        else:
            support.append(vec)
            q.append(prob)
    p = np.zeros(len(q))
    p[0] = 1.0
    return p, np.asarray(q), support


def translation_divergence(point, atoms):
    """L_CG: JSD between the true input and the translated distribution.

    Realised through the pair-discriminator distance and mapped back to a JSD.
    """
    p, q, _ = point_vs_atoms(point, atoms)
    return jsd_from_pair_distance(pair_discriminator_distance(p, q))


def _mixture_prediction(model, atoms):
    probs = np.array([w for w, _ in atoms])
    preds = predict(model, np.stack([v for _, v in atoms]))
    return probs @ preds


def verify_theorem1(model, world, translators, seeds=None):
    """Audit I(Yhat; Z | [X]) <= E_x (sqrt L_s(x) + sum_z' sqrt L_CG^z'(x))^2.

    ``translators`` maps (y, z, z') -> Translator; a missing own-subgroup
    entry means identity. Translators may be stochastic (``atoms``); the
    prediction on a translated input is then the mixture of predictions.
    """
    if world.k != 2:
        raise UnsupportedCaseError(f"the bound audit covers k = 2 subgroups per class, got k = {world.k}")
    lhs = exact_conditional_mi(world_joint(model, world), "yhat", "z", "cid")

    ex, probs = world.enumerate()
    rhs = ls_mean = 0.0
    cg_mean = {z: 0.0 for z in range(world.k)}
    for i in range(len(ex)):
        y, z, cid = int(ex.y[i]), int(ex.z[i]), int(ex.coupled_id[i])
        latent = cid - y * world.num_latents
        aug_preds, cg = [], []
        for zp in range(world.k):
            tr = translators.get((y, z, zp))
            atoms = [(1.0, ex.x[i])] if tr is None and zp == z else tr.atoms(ex.x[i])
            aug_preds.append(_mixture_prediction(model, atoms))
            cg.append(translation_divergence(world.render(y, zp, latent), atoms))
        ls = jsd(aug_preds)
        rhs += probs[i] * (math.sqrt(ls) + sum(math.sqrt(max(c, 0.0)) for c in cg)) ** 2
        ls_mean += probs[i] * ls
        for zp, c in enumerate(cg):
            cg_mean[zp] += probs[i] * c
    terms = {"L_s": ls_mean, "L_CG": {str(z): v for z, v in cg_mean.items()}}
    return BoundReport(lhs, rhs, rhs - lhs, terms, dict(seeds or {}))


def data_processing_gap(model, world, translators):
    """min over support of JSD(inputs) - JSD(predictions) for (true partner, translation).

    Non-negative by the data-processing inequality.
    """
    ex, _ = world.enumerate()
    worst = math.inf
    for i in range(len(ex)):
        y, z = int(ex.y[i]), int(ex.z[i])
        latent = int(ex.coupled_id[i]) - y * world.num_latents
        for zp in range(world.k):
            tr = translators.get((y, z, zp))
            if tr is None:
                continue
            atoms = tr.atoms(ex.x[i])
            true_x = world.render(y, zp, latent)
            pred_gap = jsd([predict(model, true_x[None])[0], _mixture_prediction(model, atoms)])
            worst = min(worst, translation_divergence(true_x, atoms) - pred_gap)
    return worst


# ---------------------------------------------------------- variational MI

@dataclass
class HeadConfig:
    hidden: int = 0
    lr: float = 0.5
    momentum: float = 0.9
    epochs: int = 2000
    batch_size: int = 0
    patience: int = 20
    min_delta: float = 1e-7
    seed: int = 0


def conditional_label_entropy(y, z, weights=None):
    """H(Z | Y) of the (weighted) empirical label distribution."""
    y, z = np.asarray(y), np.asarray(z)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    h = 0.0
    for c in np.unique(y):
        m = y == c
        pz = np.bincount(z[m], weights=w[m]) / w[m].sum()
        h += w[m].sum() * entropy(pz)
    return h


def _weighted_ce(head, feats, z, w):
    logp = ad.log_softmax(head.logits(feats))
    picked = logp[np.arange(len(z)), z]
    return -(picked * w).sum()


class DomainHead:
    """One subgroup classifier per class, applied to that class's rows.

    The output layer starts at zero weights, so until trained every head
    predicts its bias (the subgroup prior when ``priors`` is given).
    """

    def __init__(self, dim, classes, num_subgroups, cfg, rng=None, priors=None):
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        sizes = [dim, cfg.hidden, num_subgroups] if cfg.hidden else [dim, num_subgroups]
        self.heads = {}
        for c in classes:
            head = ad.Mlp(sizes, rng, output="softmax", name=f"domain{c}")
            w, b, _ = head.layers[-1]
            w.data[:] = 0.0
            if priors is not None and int(c) in priors:
                b.data[:] = np.log(np.clip(priors[int(c)], 1e-12, None))
            self.heads[int(c)] = head

    def parameters(self):
        return [p for h in self.heads.values() for p in h.parameters()]

    def loss(self, feats, y, z, w):
        """Weighted CE summed over classes; ``w`` sums to one over the batch."""
        total = None
        for c, head in self.heads.items():
            idx = np.flatnonzero(y == c)
            if not idx.size:
                continue
            term = _weighted_ce(head, ad.take(ad.as_tensor(feats), idx), z[idx], w[idx])
            total = term if total is None else total + term
        return total

    def state(self):
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state):
        for p, v in zip(self.parameters(), state):
            p.data = v.copy()


def _norm_weights(n, weights):
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    return w / w.sum()


def variational_mi_estimate(features, y, z, config=None, weights=None, held_out=None):
    """H(Z|Y) - CE of a trained per-class domain head, in nats.

    ``weights`` turns the rows into a finite distribution (exact training).
    ``held_out = (features, y, z[, weights])`` is used for early stopping and
    for the reported cross-entropy; otherwise the training rows are.
    """
    cfg = config or HeadConfig()
    feats = np.asarray(features, dtype=np.float64)
    feats = feats.reshape(len(feats), -1)
    y, z = np.asarray(y, dtype=np.int64), np.asarray(z, dtype=np.int64)
    w = _norm_weights(len(y), weights)
    if held_out is None:
        ev = (feats, y, z, w)
    else:
        hf = np.asarray(held_out[0], dtype=np.float64)
        ev = (hf.reshape(len(hf), -1), np.asarray(held_out[1], dtype=np.int64),
              np.asarray(held_out[2], dtype=np.int64),
              _norm_weights(len(held_out[1]), held_out[3] if len(held_out) > 3 else None))
    num_z = int(max(z.max(), ev[2].max())) + 1
    # an invertible rescaling leaves the information content unchanged
    mu = np.average(feats, axis=0, weights=w)
    sd = np.sqrt(np.average((feats - mu) ** 2, axis=0, weights=w))
    sd = np.where(sd > 0, sd, 1.0)
    feats = (feats - mu) / sd
    ev = ((ev[0] - mu) / sd,) + ev[1:]
    priors = {int(c): np.bincount(z[y == c], weights=w[y == c], minlength=num_z) / w[y == c].sum()
              for c in np.unique(y)}
    head = DomainHead(feats.shape[1], np.unique(np.concatenate([y, ev[1]])), num_z, cfg,
                      priors=priors)
    params = head.parameters()
    rng = np.random.default_rng(cfg.seed)

    def eval_ce():
        loss = head.loss(ev[0], ev[1], ev[2], ev[3])
        return float(loss.data)

    best, best_state, stale = eval_ce(), head.state(), 0
    for epoch in range(cfg.epochs):
        if cfg.batch_size and cfg.batch_size < len(y):
            order = rng.permutation(len(y))
            batches = [order[i:i + cfg.batch_size] for i in range(0, len(y), cfg.batch_size)]
        else:
            batches = [np.arange(len(y))]
        for idx in batches:
            loss = head.loss(feats[idx], y[idx], z[idx], w[idx] / w[idx].sum())
            if not np.isfinite(loss.data):
                raise TrainingError(f"domain head diverged at epoch {epoch}")
            ad.zero_grad(params)
            ad.backprop(loss)
            ad.sgd_step(params, cfg.lr, momentum=cfg.momentum)
        ce = eval_ce()
        if ce < best - cfg.min_delta:
            best, best_state, stale = ce, head.state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    head.load_state(best_state)
    return float(conditional_label_entropy(ev[1], ev[2], ev[3]) - best)


def one_hot(values, size=None):
    values = np.asarray(values, dtype=np.int64)
    out = np.zeros((values.size, size or int(values.max()) + 1))
    out[np.arange(values.size), values] = 1.0
    return out


def prediction_mi_estimate(model, examples, config=None, split_seed=0):
    """Variational estimate of I(Yhat; Z | Y) from a model's log-probabilities.

    The head is fitted on a random half of ``examples`` and scored on the other.
    """
    logp = np.log(np.clip(predict(model, examples.x), 1e-300, None))
    order = np.random.default_rng(split_seed).permutation(len(examples))
    a, b = order[: len(order) // 2], order[len(order) // 2:]
    return variational_mi_estimate(logp[a], examples.y[a], examples.z[a], config,
                                   held_out=(logp[b], examples.y[b], examples.z[b]))


def cdat_train(model, split, coefficient, epochs=None, config=None, **kw):
    """Train with ERM plus a gradient-reversed class-conditional domain head.

    Returns (model, per-epoch variational MI estimates on the validation split).
    """
    from .training import TrainConfig, train_model

    cfg = config or TrainConfig(method="CDAT")
    if epochs is not None:
        cfg = cfg.replace(epochs=epochs)
    cfg = cfg.replace(method="CDAT", domain_coef=float(coefficient), **kw)
    result = train_model(model, split, cfg, track_mi=True)
    return result.model, result.mi_trace
