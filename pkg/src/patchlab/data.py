"""
Subgroup-coupled data.

A :class:`CoupledWorld` is a finite generative model: each class y owns a
pool of latent "coupled set" identities, and every latent is rendered once
in every subgroup of y by an affine map ``x = P_{y,z} u + b_{y,z}``. The
renderers are signed permutations plus integer offsets and the latents sit
on a 2**-10 grid, so rendering and inverting are exact in float64.

Datasets are held column-wise in :class:`Examples` (inputs, class ids,
subgroup ids, coupled-set ids; -1 when the coupled set is unknown).
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError

GRID = 2.0 ** -10


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: int
    z: int
    coupled_id: int | None = None


@dataclass
class Examples:
    """Column-wise collection of labelled examples."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    coupled_id: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.int64)
        if self.coupled_id is None:
            self.coupled_id = np.full(len(self.y), -1, dtype=np.int64)
        self.coupled_id = np.asarray(self.coupled_id, dtype=np.int64)
        n = len(self.y)
        if not (len(self.x) == len(self.z) == len(self.coupled_id) == n):
            raise ParameterError("example columns have different lengths")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, index):
        return Examples(self.x[index], self.y[index], self.z[index], self.coupled_id[index])

    def example(self, i):
        cid = int(self.coupled_id[i])
        return LabeledExample(self.x[i], int(self.y[i]), int(self.z[i]), None if cid < 0 else cid)

    def __iter__(self):
        return (self.example(i) for i in range(len(self)))

    @property
    def input_dim(self):
        return self.x.shape[1]

    def cells(self):
        """Sorted list of (y, z) cells that have at least one example."""
        return sorted({(int(a), int(b)) for a, b in zip(self.y, self.z)})

    def cell_counts(self):
        counts = {}
        for cell in zip(self.y.tolist(), self.z.tolist()):
            counts[cell] = counts.get(cell, 0) + 1
        return dict(sorted(counts.items()))

    def cell_indices(self, cell):
        return np.flatnonzero((self.y == cell[0]) & (self.z == cell[1]))

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return Examples(np.concatenate([p.x for p in parts]),
                        np.concatenate([p.y for p in parts]),
                        np.concatenate([p.z for p in parts]),
                        np.concatenate([p.coupled_id for p in parts]))


@dataclass
class DatasetSplit:
    train: Examples
    validation: Examples
    test: Examples
    meta: dict = field(default_factory=dict)

    def counts(self):
        return {name: getattr(self, name).cell_counts()
                for name in ("train", "validation", "test")}

    def manifest(self):
        """JSON-ready description: per-cell counts per split plus generation metadata."""
        counts = {name: {f"{y},{z}": n for (y, z), n in cells.items()}
                  for name, cells in self.counts().items()}
        return {"counts": counts, "meta": _jsonable(self.meta)}

    def write_manifest(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ------------------------------------------------------------------- worlds

@dataclass
class CoupledWorld:
    """Finite subgroup-coupled distribution over (X, Y, Z, [X]).

    latents:          (C, L, d) exact latent vectors per class
    matrices:         (C, k, d, d) signed-permutation renderers
    offsets:          (C, k, d) integer offsets
    class_weights:    (C,)
    subgroup_weights: (C, k), rows sum to one
    latent_weights:   (C, L), rows sum to one
    """

    latents: np.ndarray
    matrices: np.ndarray
    offsets: np.ndarray
    class_weights: np.ndarray
    subgroup_weights: np.ndarray
    latent_weights: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.latents.shape[0]

    @property
    def num_latents(self):
        return self.latents.shape[1]

    @property
    def input_dim(self):
        return self.latents.shape[2]

    @property
    def k(self):
        return self.matrices.shape[1]

    def subgroups(self, y):
        return list(range(self.k))

    def coupled_id(self, y, latent):
        return y * self.num_latents + latent

    def render(self, y, z, latent):
        """Input vector(s) for latent index/indices ``latent`` of class y in subgroup z."""
        u = self.latents[y, latent]
        return u @ self.matrices[y, z].T + self.offsets[y, z]

    def coupled_set(self, y, latent):
        return np.stack([self.render(y, z, latent) for z in self.subgroups(y)])

    def probability(self, y, z, latent):
        return (self.class_weights[y] * self.subgroup_weights[y, z]
                * self.latent_weights[y, latent])

    def enumerate(self):
        """Every (x, y, z, [x]) in the support with its probability."""
        parts, probs = [], []
        lat = np.arange(self.num_latents)
        for y in range(self.num_classes):
            for z in self.subgroups(y):
                parts.append(Examples(self.render(y, z, lat), np.full(lat.size, y),
                                      np.full(lat.size, z), self.coupled_id(y, lat)))
                probs.append(self.probability(y, z, lat))
        return Examples.concat(parts), np.concatenate(probs)

    def locate(self, x):
        """(y, z, latent) for an input in the support, by exact inversion; None otherwise."""
        x = np.asarray(x, dtype=np.float64)
        for y in range(self.num_classes):
            for z in self.subgroups(y):
                u = (x - self.offsets[y, z]) @ self.matrices[y, z]
                hit = np.flatnonzero(np.all(self.latents[y] == u, axis=1))
                if hit.size:
                    return y, z, int(hit[0])
        return None


def _signed_permutation(rng, n):
    m = np.zeros((n, n))
    m[np.arange(n), rng.permutation(n)] = rng.choice([-1.0, 1.0], size=n)
    return m


def generate_coupled_world(num_classes=2, k=2, latents_per_class=4, input_dim=4, seed=0, *,
                           class_separation=2.0, latent_scale=1.0, subgroup_shift=2,
                           class_dims=None, rotate=True):
    """Random coupled world with exact affine renderers.

    Coordinates are laid out as [class block | nuisance block | subgroup block].
    Latents carry class signal (class mean plus Gaussian noise) in the class
    block, pure noise in the nuisance block and zeros in the subgroup block.
    Subgroup z of every class adds ``subgroup_shift * (2z - k + 1)`` on the
    subgroup block; with ``rotate`` it also applies a class/subgroup-specific
    signed permutation to the nuisance block.
    """
    if k < 2:
        raise ParameterError("need at least two subgroups per class")
    if latents_per_class < 2:
        raise ParameterError("need at least two latents per class")
    if input_dim < 1:
        raise ParameterError("input_dim must be positive")
    if int(subgroup_shift) != subgroup_shift:
        raise ParameterError("subgroup_shift must be an integer to keep rendering exact")
    rng = np.random.default_rng(seed)
    d = input_dim
    s = 1 if d >= 2 else 0
    m = class_dims if class_dims is not None else max(1, (d - s + 1) // 2)
    m = min(m, d - s) if d - s >= 1 else 1
    r = d - s - m
    sub_block = slice(d - s, d) if s else slice(0, 1)

    if num_classes == 2:
        direction = np.ones(m) / np.sqrt(m)
        means = np.stack([-direction, direction]) * (class_separation / 2)
    else:
        raw = rng.standard_normal((num_classes, m))
        means = raw / np.linalg.norm(raw, axis=1, keepdims=True) * (class_separation / 2)

    latents = np.zeros((num_classes, latents_per_class, d))
    for y in range(num_classes):
        latents[y, :, :m] = means[y] + latent_scale * rng.standard_normal((latents_per_class, m))
        if r:
            latents[y, :, m:m + r] = latent_scale * rng.standard_normal((latents_per_class, r))
    latents = np.round(latents / GRID) * GRID
    if s:
        latents[:, :, d - s:] = 0.0

    matrices = np.zeros((num_classes, k, d, d))
    offsets = np.zeros((num_classes, k, d))
    for y in range(num_classes):
        for z in range(k):
            mat = np.eye(d)
            if rotate and r and z > 0:
                mat[m:m + r, m:m + r] = _signed_permutation(rng, r)
            matrices[y, z] = mat
            offsets[y, z, sub_block] = subgroup_shift * (2 * z - k + 1)

    world = CoupledWorld(
        latents=latents, matrices=matrices, offsets=offsets,
        class_weights=np.full(num_classes, 1.0 / num_classes),
        subgroup_weights=np.full((num_classes, k), 1.0 / k),
        latent_weights=np.full((num_classes, latents_per_class), 1.0 / latents_per_class),
        meta=dict(seed=seed, class_dims=m, nuisance_dims=r, subgroup_dims=s,
                  class_separation=class_separation, latent_scale=latent_scale,
                  subgroup_shift=subgroup_shift, rotate=rotate),
    )
    _ensure_distinct(world, rng)
    return world


def _ensure_distinct(world, rng, attempts=100):
    # exact coincidences are possible on the 2**-10 grid in tiny dimensions
    for _ in range(attempts):
        ex, _ = world.enumerate()
        if len(np.unique(ex.x, axis=0)) == len(ex):
            return
        y = int(rng.integers(world.num_classes))
        l = int(rng.integers(world.num_latents))
        bump = np.zeros(world.input_dim)
        bump[0] = GRID * int(rng.integers(1, 64))
        world.latents[y, l] += bump
    raise DataError("could not make rendered examples distinct")


# --------------------------------------------------------- correlated sampling

def correlation_cell_counts(n, rho):
    """Per-(class, subgroup) counts for a total of ``n`` examples at correlation rho.

    Majority cells (0,0) and (1,1) get floor((rho+1) n / 4); minority cells get
    n/2 minus that. Exact rational arithmetic.
    """
    rho_q = Fraction(str(rho)) if isinstance(rho, float) else Fraction(rho)
    if not -1 <= rho_q <= 1:
        raise ParameterError(f"correlation must lie in [-1, 1], got {rho}")
    if n % 2:
        raise ParameterError("total size must be even")
    major = int((rho_q + 1) * n // 4)
    minor = n // 2 - major
    if minor < 0:
        raise ParameterError(f"minority count would be negative ({minor})")
    return {(0, 0): major, (0, 1): minor, (1, 0): minor, (1, 1): major}


def _halve(idx):
    """Split a shuffled index array into (train, validation) halves."""
    n_val = len(idx) // 2
    return idx[n_val:], idx[:n_val]


def sample_dataset(world, n, rho, seed=0, n_test=None):
    """Correlated train/validation split plus a subgroup-balanced coupled test set.

    Every example of a class uses a distinct latent, and test latents are
    disjoint from train/validation latents. The test set renders each test
    latent in every subgroup of its class.
    """
    if world.num_classes != 2 or world.k != 2:
        raise ParameterError("correlated sampling is defined for 2 classes x 2 subgroups")
    counts = correlation_cell_counts(n, rho)
    rng = np.random.default_rng(seed)
    per_class = n // 2
    if n_test is None:
        n_test = min(world.num_latents - per_class, max(1, n // 4))
    if n_test < 1 or per_class + n_test > world.num_latents:
        raise ParameterError(
            f"world has {world.num_latents} latents per class; need {per_class + max(n_test, 1)}")

    train, val, test = [], [], []
    for y in range(2):
        order = rng.choice(world.num_latents, size=per_class + n_test, replace=False,
                           p=world.latent_weights[y])
        pool, test_lat = order[:per_class], np.sort(order[per_class:])
        start = 0
        for z in range(2):
            lat = pool[start:start + counts[(y, z)]]
            start += counts[(y, z)]
            tr, va = _halve(lat)
            for dest, part in ((train, tr), (val, va)):
                dest.append(Examples(world.render(y, z, part), np.full(part.size, y),
                                     np.full(part.size, z), world.coupled_id(y, part)))
            test.append(Examples(world.render(y, z, test_lat), np.full(test_lat.size, y),
                                 np.full(test_lat.size, z), world.coupled_id(y, test_lat)))
    meta = dict(source="coupled_world", n=n, rho=rho, seed=seed, n_test=n_test,
                world=world.meta)
    return DatasetSplit(Examples.concat(train), Examples.concat(val), Examples.concat(test), meta)


# -------------------------------------------------------------------- digits

@dataclass
class DigitSource:
    images: np.ndarray   # (n, 28, 28) uint8
    labels: np.ndarray   # (n,) digit labels 0-9
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def _zigzag_mask(size=28):
    pts = np.array([[4, 5], [10, 11], [6, 15], [14, 19], [10, 23], [23, 24]], dtype=float)
    yy, xx = np.mgrid[0:size, 0:size]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
    dist = np.full(len(grid), np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        dist = np.minimum(dist, _segment_distance(grid, a, b))
    return np.clip(1.5 - dist, 0.0, 1.0).reshape(size, size)


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def zigzag_overlay(images):
    """Deterministic zigzag stroke drawn over each 28x28 image."""
    images = np.asarray(images)
    mask = (_zigzag_mask(images.shape[-1]) * 255).astype(np.uint8)
    return np.maximum(images, mask)


# polylines per digit on a unit box, x to the right and y downward
_GLYPHS = {
    0: [[(0.5, 0), (0.85, 0.2), (0.85, 0.8), (0.5, 1), (0.15, 0.8), (0.15, 0.2), (0.5, 0)]],
    1: [[(0.3, 0.2), (0.55, 0), (0.55, 1)]],
    2: [[(0.15, 0.2), (0.5, 0), (0.85, 0.2), (0.85, 0.4), (0.15, 1), (0.9, 1)]],
    3: [[(0.15, 0.1), (0.8, 0.1), (0.45, 0.45), (0.85, 0.7), (0.5, 1), (0.15, 0.9)]],
    4: [[(0.7, 1), (0.7, 0), (0.1, 0.7), (0.9, 0.7)]],
    5: [[(0.85, 0), (0.2, 0), (0.15, 0.45), (0.7, 0.45), (0.85, 0.75), (0.5, 1), (0.15, 0.9)]],
    6: [[(0.75, 0), (0.25, 0.4), (0.15, 0.75), (0.5, 1), (0.85, 0.75), (0.5, 0.5), (0.2, 0.65)]],
    7: [[(0.1, 0), (0.9, 0), (0.4, 1)]],
    8: [[(0.5, 0.5), (0.2, 0.25), (0.5, 0), (0.8, 0.25), (0.5, 0.5), (0.15, 0.75), (0.5, 1),
         (0.85, 0.75), (0.5, 0.5)]],
    9: [[(0.8, 0.35), (0.5, 0.55), (0.15, 0.3), (0.5, 0), (0.8, 0.3), (0.6, 1)]],
}


SHIFTS = [(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3)]


def synthetic_digits(n, seed=0, chunk=512):
    """Procedurally drawn 28x28 digit images (uint8), a network-free stand-in for MNIST.

    A bank of randomly jittered glyph renders is drawn first; each output
    image is a distinct (render, integer translation) pair from that bank.
    Labels are balanced over the ten digits up to rounding.
    """
    rng = np.random.default_rng(seed)
    bank_size = max(10, -(-n // (len(SHIFTS) - 5)))
    bank = _render_glyphs(bank_size, rng, chunk)
    pick = np.arange(n)
    template = pick % bank_size
    shift = pick // bank_size
    padded = np.pad(bank.images, ((0, 0), (2, 2), (2, 2)))
    images = np.empty((n, 28, 28), dtype=np.uint8)
    for s_idx, (dy, dx) in enumerate(SHIFTS):
        sel = np.flatnonzero(shift == s_idx)
        if sel.size:
            images[sel] = padded[template[sel], 2 - dy:30 - dy, 2 - dx:30 - dx]
    order = rng.permutation(n)
    return DigitSource(images[order], bank.labels[template][order],
                       meta={"synthetic": True, "seed": seed})


def _render_glyphs(n, rng, chunk=512):
    labels = rng.permutation(np.arange(n) % 10)
    images = np.zeros((n, 28, 28), dtype=np.uint8)
    yy, xx = np.mgrid[0:28, 0:28]
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float) + 0.5

    theta = rng.uniform(-0.25, 0.25, n)
    scale = rng.uniform(16.0, 21.0, n)
    shear = rng.uniform(-0.2, 0.2, n)
    shift = rng.uniform(-1.5, 1.5, (n, 2))
    width = rng.uniform(0.9, 1.7, n)

    for digit, lines in _GLYPHS.items():
        segs = [(np.array(a, float), np.array(b, float))
                for line in lines for a, b in zip(line[:-1], line[1:])]
        idx = np.flatnonzero(labels == digit)
        for start in range(0, idx.size, chunk):
            sel = idx[start:start + chunk]
            c, s_ = np.cos(theta[sel]), np.sin(theta[sel])
            # glyph unit box -> pixels: centre 0.5 -> 14, rotation, shear, scale
            A = np.empty((sel.size, 2, 2))
            A[:, 0, 0] = c * scale[sel]
            A[:, 0, 1] = (-s_ + shear[sel] * c) * scale[sel]
            A[:, 1, 0] = s_ * scale[sel]
            A[:, 1, 1] = (c + shear[sel] * s_) * scale[sel]
            t = 14.0 + shift[sel]
            dist = np.full((sel.size, pix.shape[0]), np.inf)
            for a, b in segs:
                pa = np.einsum("nij,j->ni", A, a - 0.5) + t
                pb = np.einsum("nij,j->ni", A, b - 0.5) + t
                ab = pb - pa
                ap = pix[None, :, :] - pa[:, None, :]
                tt = np.clip(np.einsum("npj,nj->np", ap, ab) / np.einsum("nj,nj->n", ab, ab)[:, None],
                             0.0, 1.0)
                closest = pa[:, None, :] + tt[..., None] * ab[:, None, :]
                dist = np.minimum(dist, np.linalg.norm(pix[None] - closest, axis=-1))
            ink = np.clip(width[sel, None] + 0.5 - dist, 0.0, 1.0)
            images[sel] = (ink * 255).astype(np.uint8).reshape(-1, 28, 28)
    return DigitSource(images, labels)


def load_mnist(directory, kind="train"):
    """DigitSource from the standard MNIST IDX file pair in ``directory``."""
    prefix = "train" if kind == "train" else "t10k"
    base = Path(directory)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (base / name).exists():
                return base / name
        raise DataError(f"missing {stem} in {base}")

    images = read_idx(find(f"{prefix}-images-idx3-ubyte")).array
    labels = read_idx(find(f"{prefix}-labels-idx1-ubyte")).array
    return DigitSource(images, labels.astype(np.int64), meta={"path": str(base), "kind": kind})


def _pick(rng, source, parity, count, cell, exclude=None):
    pool = np.flatnonzero(source.labels % 2 == parity)
    if exclude is not None:
        pool = np.setdiff1d(pool, exclude)
    if pool.size < count:
        raise DataError(f"cell {cell} needs {count} images but the source has {pool.size}")
    return np.sort(rng.choice(pool, size=count, replace=False))


def mnist_correlation(clean, n, rho, seed=0, corrupted=None, test_clean=None,
                      test_corrupted=None, n_test=None):
    """Digit-parity classes with clean/zigzag subgroups at correlation rho.

    Class 0 is even, class 1 odd; subgroup 0 is clean, 1 is zigzag. When
    ``corrupted`` is None the zigzag images are the deterministic overlay of
    the clean source (flagged in ``meta['synthetic_corruption']``). The test
    set shows every test digit in both subgroups; without ``test_clean`` it
    is drawn from clean images left unused by train/validation.
    """
    counts = correlation_cell_counts(n, rho)
    rng = np.random.default_rng(seed)
    synthetic = corrupted is None
    if synthetic:
        corrupted = DigitSource(zigzag_overlay(clean.images), clean.labels)

    chosen = {}
    for (y, z), count in counts.items():
        src = clean if z == 0 else corrupted
        chosen[(y, z)] = _pick(rng, src, y, count, (("even", "odd")[y], ("clean", "zigzag")[z]))

    train, val = [], []
    for (y, z), idx in chosen.items():
        src = clean if z == 0 else corrupted
        idx = rng.permutation(idx)
        for dest, part in zip((train, val), _halve(idx)):
            dest.append(Examples(src.images[part].reshape(len(part), -1) / 255.0,
                                 np.full(part.size, y), np.full(part.size, z), part))

    if test_clean is None:
        used = np.concatenate(list(chosen.values()))
        free = np.setdiff1d(np.arange(len(clean)), used)
        take = free if n_test is None else free[:n_test]
        test_clean = DigitSource(clean.images[take], clean.labels[take])
        test_ids = take
    else:
        test_ids = np.arange(len(test_clean))
        if n_test is not None:
            test_clean = DigitSource(test_clean.images[:n_test], test_clean.labels[:n_test])
            test_ids = test_ids[:n_test]
            if test_corrupted is not None:
                test_corrupted = DigitSource(test_corrupted.images[:n_test],
                                             test_corrupted.labels[:n_test])
    if test_corrupted is None:
        test_corrupted = DigitSource(zigzag_overlay(test_clean.images), test_clean.labels)
    # test coupled ids live in their own range
    offset = len(clean)
    test = []
    for z, src in enumerate((test_clean, test_corrupted)):
        test.append(Examples(src.images.reshape(len(src), -1) / 255.0, src.labels % 2,
                             np.full(len(src), z), test_ids + offset))
    meta = dict(source="mnist_correlation", n=n, rho=rho, seed=seed,
                synthetic_corruption=synthetic,
                synthetic_digits=bool(clean.meta.get("synthetic", False)))
    return DatasetSplit(Examples.concat(train), Examples.concat(val), Examples.concat(test), meta)


# ---------------------------------------------------------------------- IDX

_IDX_DTYPES = {0x08: np.uint8}


@dataclass
class IdxArray:
    dims: tuple
    raw: bytes

    @property
    def array(self):
        return np.frombuffer(self.raw, dtype=np.uint8).reshape(self.dims)

    def __len__(self):
        return self.dims[0]


def parse_idx(buf):
    """Parse an in-memory IDX container (unsigned-byte payloads only)."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise FormatError("truncated IDX header", offset=len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise FormatError("bad IDX magic: first two bytes must be zero", offset=0)
    if buf[2] not in _IDX_DTYPES:
        raise FormatError(f"unsupported IDX element type 0x{buf[2]:02x}", offset=2)
    ndim = buf[3]
    if ndim == 0:
        raise FormatError("IDX rank must be positive", offset=3)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("truncated IDX dimension table", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise FormatError(f"truncated IDX payload: expected {header + size} bytes, got {len(buf)}",
                          offset=len(buf))
    return IdxArray(tuple(int(d) for d in dims), buf[header:header + size])


def read_idx(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# ------------------------------------------------------------------ batching

def subgroup_batches(examples, batch_size, seed=0):
    """One epoch of index batches, each containing every nonempty (y, z) cell.

    Cells with fewer members than there are batches are cycled (reshuffled
    each pass) so that every batch still sees them; all examples appear at
    least once per epoch.
    """
    cells = examples.cells()
    if batch_size < len(cells):
        raise ParameterError(f"batch size {batch_size} cannot cover {len(cells)} cells")
    rng = np.random.default_rng(seed)
    n = len(examples)
    n_batches = max(1, -(-n // batch_size))
    chunks = [[] for _ in range(n_batches)]
    for cell in cells:
        idx = rng.permutation(examples.cell_indices(cell))
        if idx.size >= n_batches:
            for b, part in enumerate(np.array_split(idx, n_batches)):
                chunks[b].append(part)
        else:
            reps = -(-n_batches // idx.size)
            cycled = np.concatenate([idx] + [rng.permutation(idx) for _ in range(reps - 1)])
            for b in range(n_batches):
                chunks[b].append(cycled[b:b + 1])
    for b in rng.permutation(n_batches):
        yield rng.permutation(np.concatenate(chunks[b]))
