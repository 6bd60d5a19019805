"""
Stage 1: maps between the subgroups of a class.

Two sources of translators: exact affine maps read off a CoupledWorld's
renderers, and a small adversarial translator pair (two generators, two
discriminators, cycle and identity penalties) trained on unpaired samples.
Translators are keyed ``(y, z, z')`` in a plain dict ("bank").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Examples
from .errors import ConfigError, FormatError, TrainingError

PAYLOAD_FORMAT = "patchlab.translators"
PAYLOAD_VERSION = 1


class Translator:
    """Map from subgroup ``source`` to subgroup ``target`` of the same class."""

    kind = "abstract"

    def __init__(self, source, target):
        self.source = int(source)
        self.target = int(target)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = self.apply(ad.Tensor(x[None] if single else x)).data
        return out[0] if single else out

    def apply(self, x):
        """Differentiable application to a batch tensor."""
        raise NotImplementedError

    def parameters(self):
        return []

    def atoms(self, x):
        """Output distribution for one input as [(probability, vector)]."""
        return [(1.0, self(x))]


class AffineTranslator(Translator):
    """x -> x @ matrix.T + offset."""

    kind = "affine"

    def __init__(self, source, target, matrix, offset):
        super().__init__(source, target)
        self.matrix = ad.Parameter(np.asarray(matrix, dtype=np.float64), name="matrix")
        self.offset = ad.Parameter(np.asarray(offset, dtype=np.float64), name="offset")

    def apply(self, x):
        return ad.as_tensor(x) @ _transpose(self.matrix) + self.offset

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.matrix.data.T + self.offset.data

    def parameters(self):
        return [self.matrix, self.offset]

    def tensors(self):
        return {"matrix": self.matrix.data, "offset": self.offset.data}


def _transpose(p):
    return ad._node(p.data.T, (p,), lambda g: (g.T,))


class MlpTranslator(Translator):
    """x -> x + net(x) with a linear-output MLP (residual parameterisation)."""

    kind = "mlp"

    def __init__(self, source, target, net):
        super().__init__(source, target)
        self.net = net

    def apply(self, x):
        x = ad.as_tensor(x)
        return x + self.net(x)

    def parameters(self):
        return self.net.parameters()

    def tensors(self):
        out = {}
        for i, (w, b, _) in enumerate(self.net.layers):
            out[f"w{i}"] = w.data
            out[f"b{i}"] = b.data
        return out


class MixtureTranslator(Translator):
    """Stochastic translator: component i is used with probability ``weights[i]``.

    Calling it returns the output of the most probable component.
    """

    kind = "mixture"

    def __init__(self, source, target, components, weights):
        super().__init__(source, target)
        self.components = list(components)
        self.weights = np.asarray(weights, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ConfigError("mixture weights must form a distribution")

    def apply(self, x):
        return self.components[int(np.argmax(self.weights))].apply(x)

    def __call__(self, x):
        return self.components[int(np.argmax(self.weights))](x)

    def atoms(self, x):
        return [(float(w), c(x)) for w, c in zip(self.weights, self.components) if w > 0]


def identity_translator(z, dim):
    return AffineTranslator(z, z, np.eye(dim), np.zeros(dim))


# ---------------------------------------------------------------- analytic

def analytic_translators(world):
    """Exact maps g_{z'} o g_z^{-1} for every ordered subgroup pair of every class."""
    bank = {}
    for y in range(world.num_classes):
        for z in world.subgroups(y):
            for zp in world.subgroups(y):
                if z == zp:
                    bank[(y, z, zp)] = identity_translator(z, world.input_dim)
                    continue
                # x' = (x - b_z) P_z P_z'^T + b_z'; all entries are signed
                # permutations and grid values, so this is exact
                m = world.matrices[y, zp] @ world.matrices[y, z].T
                off = world.offsets[y, zp] - world.offsets[y, z] @ m.T
                bank[(y, z, zp)] = AffineTranslator(z, zp, m, off)
    return bank


# -------------------------------------------------------------- augmenting

def augment_coupled(example, translators, subgroups):
    """One translated input per subgroup in ``subgroups`` (the own subgroup maps to x).

    ``translators`` maps (z, z') -> Translator for the example's class.
    """
    out = []
    for zp in subgroups:
        if zp == example.z:
            out.append(np.array(example.x, dtype=np.float64))
            continue
        try:
            tr = translators[(example.z, zp)]
        except KeyError:
            raise ConfigError(f"missing translator for subgroup pair ({example.z}, {zp})") from None
        out.append(tr(example.x))
    return np.stack(out)


def augment_batch(examples, bank, k):
    """(n, k, d) augmented coupled sets for a batch, using bank[(y, z, z')]."""
    n, d = examples.x.shape
    out = np.empty((n, k, d))
    for cell in examples.cells():
        idx = examples.cell_indices(cell)
        y, z = cell
        for zp in range(k):
            if zp == z:
                out[idx, zp] = examples.x[idx]
                continue
            tr = bank.get((y, z, zp))
            if tr is None:
                raise ConfigError(f"missing translator for class {y}, subgroup pair ({z}, {zp})")
            out[idx, zp] = tr(examples.x[idx])
    return out


# ------------------------------------------------------- adversarial training

@dataclass
class TranslatorConfig:
    cycle_coef: float = 10.0
    identity_coef: float = 1.0
    lr: float = 0.005
    momentum: float = 0.5
    steps: int = 2000
    batch_size: int = 256
    disc_hidden: int = 32
    disc_features: str = "raw"
    disc_lr: float = 0.05
    generator: str = "affine"
    gen_hidden: int = 16
    average_last: int = 0
    final_lr_scale: float = 1.0
    seed: int = 0


@dataclass
class TranslatorPair:
    """G: source -> target and F: target -> source, with their discriminators."""

    source: int
    target: int
    G: Translator
    F: Translator
    D_source: object = None
    D_target: object = None
    cycle_coef: float = 10.0
    identity_coef: float = 1.0
    trace: list = field(default_factory=list)

    def translators(self, y):
        return {(y, self.source, self.target): self.G, (y, self.target, self.source): self.F}


def mean_abs(a, b):
    return ad.tabs(ad.as_tensor(a) - b).mean()


def cyclegan_loss(pair, batch, subgroup=None):
    """Weighted cycle plus identity penalty on a batch drawn from ``subgroup``.

    For the source domain A: L(a, F(G(a))) and L(a, F(a)); symmetric for the
    target domain. L is the mean absolute difference.
    """
    subgroup = pair.source if subgroup is None else subgroup
    if subgroup == pair.source:
        there, back = pair.G, pair.F
    elif subgroup == pair.target:
        there, back = pair.F, pair.G
    else:
        raise ConfigError(f"subgroup {subgroup} is not part of this translator pair")
    a = ad.Tensor(np.asarray(batch, dtype=np.float64).reshape(len(batch), -1))
    cycle = mean_abs(a, back.apply(there.apply(a)))
    ident = mean_abs(a, back.apply(a))
    return float((cycle * pair.cycle_coef + ident * pair.identity_coef).data)


def _make_generator(kind, source, target, dim, rng, hidden):
    if kind == "affine":
        matrix = np.eye(dim) + rng.uniform(-0.5, 0.5, (dim, dim))
        return AffineTranslator(source, target, matrix, rng.uniform(-1, 1, dim))
    if kind == "mlp":
        return MlpTranslator(source, target, ad.Mlp([dim, hidden, dim], rng, output="linear",
                                                    name=f"gen{source}{target}"))
    raise ConfigError(f"unknown generator kind {kind!r}")


class Discriminator:
    """Sigmoid MLP on the input, or on [x, x*x] when ``features == "quadratic"``.

    With quadratic features and no hidden layer this is logistic regression
    whose log-odds family contains every Gaussian density ratio.
    """

    def __init__(self, dim, hidden, rng, features="raw", name="D"):
        if features not in ("raw", "quadratic"):
            raise ConfigError(f"unknown discriminator features {features!r}")
        self.features = features
        width = dim * (2 if features == "quadratic" else 1)
        sizes = [width, hidden, 1] if hidden else [width, 1]
        self.net = ad.Mlp(sizes, rng, output="sigmoid", name=name)

    def parameters(self):
        return self.net.parameters()

    def logits(self, x):
        x = ad.as_tensor(x)
        if self.features == "quadratic":
            x = ad.concat([x, x * x], axis=1)
        return self.net.logits(x)

    def __call__(self, x):
        return ad.sigmoid(self.logits(x))


def _disc_terms(disc, real, fake):
    return -(ad.log_sigmoid(disc.logits(real)).mean()
             + ad.log_sigmoid(-disc.logits(fake)).mean())


def train_translator_pair(data_source, data_target, config=None, source=0, target=1):
    """Adversarially train G: source -> target and F: target -> source.

    Discriminators take a gradient step on the two-term log loss, then the
    generators step on the non-saturating adversarial loss plus weighted
    cycle and identity penalties (1:1 alternation).
    """
    cfg = config or TranslatorConfig()
    A = np.asarray(data_source, dtype=np.float64)
    B = np.asarray(data_target, dtype=np.float64)
    if not len(A) or not len(B):
        raise ConfigError("both subgroups need training data")
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    dim = A.shape[1]
    if B.shape[1] != dim:
        raise ConfigError("subgroup inputs must share a dimension")
    if dim > 64:
        raise ConfigError("desk-scale translators support inputs of dimension <= 64")

    rng = np.random.default_rng(cfg.seed)
    G = _make_generator(cfg.generator, source, target, dim, rng, cfg.gen_hidden)
    F = _make_generator(cfg.generator, target, source, dim, rng, cfg.gen_hidden)
    DA = Discriminator(dim, cfg.disc_hidden, rng, cfg.disc_features, name="D_source")
    DB = Discriminator(dim, cfg.disc_hidden, rng, cfg.disc_features, name="D_target")
    gen_params = G.parameters() + F.parameters()
    disc_params = DA.parameters() + DB.parameters()
    pair = TranslatorPair(source, target, G, F, DA, DB, cfg.cycle_coef, cfg.identity_coef)

    with np.errstate(over="ignore", invalid="ignore"):
        # non-finite values are caught per step and reported with the step index
        _train_loop(pair, A, B, cfg, rng, gen_params, disc_params)
    return pair


def _train_loop(pair, A, B, cfg, rng, gen_params, disc_params):
    G, F, DA, DB = pair.G, pair.F, pair.D_source, pair.D_target
    avg = None
    for step in range(cfg.steps):
        a = ad.Tensor(A[rng.integers(len(A), size=cfg.batch_size)])
        b = ad.Tensor(B[rng.integers(len(B), size=cfg.batch_size)])

        fake_b = ad.Tensor(G.apply(a).data)
        fake_a = ad.Tensor(F.apply(b).data)
        d_loss = _disc_terms(DA, a, fake_a) + _disc_terms(DB, b, fake_b)
        ad.zero_grad(disc_params)
        ad.backprop(d_loss)
        _step(disc_params, cfg, step, d_loss, cfg.disc_lr)

        gb, fa = G.apply(a), F.apply(b)
        adv = -(ad.log_sigmoid(DB.logits(gb)).mean() + ad.log_sigmoid(DA.logits(fa)).mean())
        cycle = mean_abs(a, F.apply(gb)) + mean_abs(b, G.apply(fa))
        ident = mean_abs(a, F.apply(a)) + mean_abs(b, G.apply(b))
        g_loss = adv + cycle * cfg.cycle_coef + ident * cfg.identity_coef
        ad.zero_grad(gen_params)
        ad.backprop(g_loss)
        decay = 1.0 + (cfg.final_lr_scale - 1.0) * step / max(cfg.steps - 1, 1)
        _step(gen_params, cfg, step, g_loss, cfg.lr * decay)

        pair.trace.append({"step": step, "d_loss": float(d_loss.data), "adv": float(adv.data),
                           "cycle": float(cycle.data), "identity": float(ident.data)})
        if cfg.average_last and step >= cfg.steps - cfg.average_last:
            snap = [p.data.copy() for p in gen_params]
            avg = snap if avg is None else [s + v for s, v in zip(avg, snap)]
    if avg is not None:
        for p, s in zip(gen_params, avg):
            p.data = s / cfg.average_last


def _step(params, cfg, step, loss, lr=None):
    if not np.isfinite(loss.data):
        raise TrainingError(f"translator training diverged at step {step}")
    try:
        ad.sgd_step(params, cfg.lr if lr is None else lr, momentum=cfg.momentum)
    except TrainingError as exc:
        raise TrainingError(f"translator training diverged at step {step}: {exc}") from None


def cycle_residual(pair, data, subgroup=None):
    """Mean |x - back(there(x))| on ``data`` drawn from ``subgroup``."""
    subgroup = pair.source if subgroup is None else subgroup
    there, back = (pair.G, pair.F) if subgroup == pair.source else (pair.F, pair.G)
    data = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    return float(np.mean(np.abs(data - back(there(data)))))


# ---------------------------------------------------------- serialization

def _tensor_payload(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "values": arr.ravel().tolist()}


def _tensor_from_payload(obj):
    shape = tuple(obj["shape"])
    values = np.asarray(obj["values"], dtype=np.float64)
    if values.size != int(np.prod(shape)):
        raise FormatError(f"tensor payload has {values.size} values for shape {shape}")
    return values.reshape(shape)


def translators_payload(bank):
    entries = []
    for (y, z, zp), tr in sorted(bank.items()):
        if not hasattr(tr, "tensors"):
            raise ConfigError(f"translator kind {tr.kind!r} cannot be serialized")
        entries.append({"class": y, "source": z, "target": zp, "kind": tr.kind,
                        "tensors": {k: _tensor_payload(v) for k, v in tr.tensors().items()}})
    return {"format": PAYLOAD_FORMAT, "version": PAYLOAD_VERSION, "translators": entries}


def translators_from_payload(payload):
    if payload.get("format") != PAYLOAD_FORMAT:
        raise FormatError("not a translator payload")
    if payload.get("version") != PAYLOAD_VERSION:
        raise FormatError(f"unsupported translator payload version {payload.get('version')}")
    bank = {}
    for e in payload["translators"]:
        t = {k: _tensor_from_payload(v) for k, v in e["tensors"].items()}
        if e["kind"] == "affine":
            tr = AffineTranslator(e["source"], e["target"], t["matrix"], t["offset"])
        elif e["kind"] == "mlp":
            n_layers = len(t) // 2
            sizes = [t["w0"].shape[0]] + [t[f"w{i}"].shape[1] for i in range(n_layers)]
            net = ad.Mlp(sizes, 0, output="linear")
            net.load_state([t[f"{p}{i}"] for i in range(n_layers) for p in ("w", "b")])
            tr = MlpTranslator(e["source"], e["target"], net)
        else:
            raise FormatError(f"unknown translator kind {e['kind']!r}")
        bank[(e["class"], e["source"], e["target"])] = tr
    return bank


def save_translators(bank, path):
    Path(path).write_text(json.dumps(translators_payload(bank)))


def load_translators(path):
    return translators_from_payload(json.loads(Path(path).read_text()))


def examples_by_subgroup(examples: Examples, y):
    """{z: inputs} for class y."""
    return {z: examples.x[examples.cell_indices((y, z))] for (c, z) in examples.cells() if c == y}
