"""
Training loops for every method.

All methods share the same MLP classifier and SGD optimizer; they differ in
the per-batch objective:

    ERM        mean cross-entropy
    GDRO       online group weights over all (y, z) cells
    SGDRO      online group weights over the subgroups of each class
    CAMEL      SGDRO + lambda * consistency on translated coupled sets
    pairing    same as CAMEL, real same-class examples from other subgroups
    heuristic  same as CAMEL, generic noise/affine jitter instead of translators
    CDAT       ERM + gradient-reversed per-class subgroup head on hidden features
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .data import subgroup_batches
from .errors import ConfigError, TrainingError
from .metrics import EvalReport, predicted_labels
from .translate import augment_batch

METHODS = ("ERM", "GDRO", "SGDRO", "CAMEL", "CDAT", "pairing", "heuristic")
CONSISTENCY_METHODS = ("CAMEL", "pairing", "heuristic")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ERM"
    hidden: tuple = (32,)
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 100
    seed: int = 0
    eta: float = 0.01
    adjustment: float = 0.0
    lam: float = 0.0
    anneal_rate: float = 0.0
    consistency: str = "camel"
    domain_coef: float = 0.0
    noise_sigma: float = 0.5
    jitter: float = 0.1
    mi_every: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.consistency not in ("camel", "uda", "augmix"):
            raise ConfigError(f"unknown consistency loss {self.consistency!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch size and learning rate must be positive")

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class TrainResult:
    model: ad.Mlp
    history: list
    best_epoch: int
    validation: EvalReport
    test: EvalReport
    mi_trace: list = field(default_factory=list)
    wall_ms: float = 0.0


def make_model(input_dim, num_classes, hidden=(32,), seed=0):
    return ad.Mlp([input_dim, *hidden, num_classes], np.random.default_rng([seed, 1]),
                  name="classifier")


def _plain_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _cell_losses(per_example, y, z, cells):
    losses = obj.group_mean_losses(per_example, y, z, cells)
    sizes = [int(np.sum((y == cy) & (z == cz))) for cy, cz in cells]
    return losses, sizes


class _Augmenter:
    """Produces the (n, k, d) augmented inputs for a consistency method."""

    def __init__(self, cfg, train, k, translators, rng):
        self.cfg, self.train, self.k, self.rng = cfg, train, k, rng
        self.translators = translators
        if cfg.method == "CAMEL" and not translators:
            raise ConfigError("CAMEL needs translators (analytic or trained)")
        self.pools = {c: train.cell_indices(c) for c in train.cells()}

    def __call__(self, batch):
        method = self.cfg.method
        if method == "CAMEL":
            return augment_batch(batch, self.translators, self.k)
        n, d = batch.x.shape
        out = np.repeat(batch.x[:, None, :], self.k, axis=1)
        for i in range(n):
            y, z = int(batch.y[i]), int(batch.z[i])
            for zp in range(self.k):
                if zp == z:
                    continue
                if method == "pairing":
                    pool = self.pools.get((y, zp))
                    if pool is not None and pool.size:
                        out[i, zp] = self.train.x[pool[self.rng.integers(pool.size)]]
                else:
                    scale = 1.0 + self.rng.uniform(-self.cfg.jitter, self.cfg.jitter, d)
                    shift = self.rng.uniform(-self.cfg.jitter, self.cfg.jitter, d)
                    out[i, zp] = (batch.x[i] * scale + shift
                                  + self.rng.normal(0.0, self.cfg.noise_sigma, d))
        return out


def _consistency(cfg, preds, aug):
    if cfg.consistency == "uda":
        return obj.uda_consistency(preds, aug).mean()
    if cfg.consistency == "augmix":
        return obj.augmix_consistency(preds, aug).mean()
    return obj.total_consistency(obj.AugmentedBatch(preds, aug))


def train_model(model, split, cfg, translators=None, track_mi=False, mi_config=None,
                on_epoch=None):
    """Train ``model`` in place on ``split.train``; select by validation robust accuracy."""
    from .invariance import DomainHead, HeadConfig, prediction_mi_estimate

    start = time.perf_counter()
    train = split.train
    cells = sorted(set(train.cells()) | set(split.validation.cells()) | set(split.test.cells()))
    k = max(z for _, z in cells) + 1
    params = model.parameters()
    batch_rng = np.random.default_rng([cfg.seed, 2])
    aug_rng = np.random.default_rng([cfg.seed, 3])

    group_state = None
    if cfg.method == "GDRO":
        group_state = obj.GroupWeights.uniform(len(cells), cfg.eta)
    elif cfg.method in ("SGDRO",) + CONSISTENCY_METHODS:
        group_state = obj.SubgroupWeights.uniform(cells, cfg.eta)
    augmenter = None
    if cfg.method in CONSISTENCY_METHODS:
        augmenter = _Augmenter(cfg, train, k, translators, aug_rng)
    lam = obj.ConsistencyConfig(cfg.lam, cfg.anneal_rate)
    domain = head_params = None
    if cfg.method == "CDAT":
        feat_dim = model.sizes[-2]
        domain = DomainHead(feat_dim, range(model.num_outputs), k, HeadConfig(),
                            rng=np.random.default_rng([cfg.seed, 4]))
        head_params = domain.parameters()

    history, mi_trace = [], []
    best = (-1.0, -1, None)
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.method in ("ERM", "CDAT"):
            batches = _plain_batches(len(train), cfg.batch_size, batch_rng)
        else:
            batches = subgroup_batches(train, cfg.batch_size, seed=int(batch_rng.integers(2**63)))
        for idx in batches:
            batch = train[idx]
            lam = obj.anneal_lambda(lam, step)
            x = ad.Tensor(batch.x)
            if cfg.method == "CDAT":
                feats = model.features(x)
                preds = ad.softmax(model.head(feats))
            else:
                preds = model(x)
            ce = obj.cross_entropy(preds, batch.y)

            if cfg.method in ("ERM", "CDAT"):
                loss = ce.mean()
                if cfg.method == "CDAT":
                    reversed_feats = ad.scale_grad(feats, -cfg.domain_coef)
                    w = np.full(len(idx), 1.0 / len(idx))
                    loss = loss + domain.loss(reversed_feats, batch.y, batch.z, w)
            elif cfg.method == "GDRO":
                losses, sizes = _cell_losses(ce, batch.y, batch.z, cells)
                group_state, loss = obj.gdro_stochastic_update(group_state, losses, sizes,
                                                               cfg.adjustment)
            else:
                cell_l, cell_n = _cell_losses(ce, batch.y, batch.z, cells)
                group_state, loss = obj.sgdro_stochastic_update(
                    group_state, dict(zip(cells, cell_l)), dict(zip(cells, cell_n)), cfg.adjustment)
                if augmenter is not None:
                    aug_x = augmenter(batch)
                    n, kk, d = aug_x.shape
                    aug_preds = model(ad.Tensor(aug_x.reshape(n * kk, d))).reshape(n, kk, -1)
                    loss = obj.camel_objective(loss, _consistency(cfg, preds, aug_preds), lam)

            if not np.isfinite(loss.data):
                raise TrainingError(f"{cfg.method} training diverged at epoch {epoch}, step {step}")
            ad.zero_grad(params)
            if head_params:
                ad.zero_grad(head_params)
            ad.backprop(loss)
            try:
                ad.sgd_step(params, cfg.lr, cfg.momentum, cfg.weight_decay)
                if head_params:
                    ad.sgd_step(head_params, cfg.lr, cfg.momentum)
            except TrainingError as exc:
                raise TrainingError(f"{cfg.method} training diverged at epoch {epoch}: {exc}") from None
            step += 1

        val = EvalReport.evaluate(model, split.validation, cells)
        test = EvalReport.evaluate(model, split.test, cells)
        row = {"epoch": epoch, "validation": val, "test": test, "lambda_current": lam.current}
        if track_mi and (epoch % cfg.mi_every == 0 or epoch == cfg.epochs - 1):
            row["mi_estimate"] = prediction_mi_estimate(model, split.validation, mi_config,
                                                        split_seed=cfg.seed)
            mi_trace.append(row["mi_estimate"])
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if val.robust > best[0]:
            best = (val.robust, epoch, model.state())

    model.load_state(best[2])
    return TrainResult(model, history, best[1], history[best[1]]["validation"],
                       history[best[1]]["test"], mi_trace,
                       wall_ms=(time.perf_counter() - start) * 1000.0)


def accuracy(model, examples):
    return float(np.mean(predicted_labels(model, examples.x) == examples.y))
