"""
KL and Jensen-Shannon divergences on finite categorical distributions,
plus the discriminator quantities that relate to them.

Natural logarithms throughout. Terms with zero mass contribute zero
(0 log 0 = 0); ``kl`` returns ``math.inf`` when p puts mass where q has none.
"""

import math

import numpy as np

from .errors import ContractError, ShapeError

LOG2 = math.log(2.0)

NORMALIZATION_TOL = 1e-12


def categorical(p, tol=NORMALIZATION_TOL):
    """Validate and return ``p`` as a float64 probability vector."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ShapeError(f"a categorical is a non-empty 1-D vector, got shape {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > tol * max(1, p.size):
        raise ContractError("probabilities must be non-negative and sum to one")
    return p


def _pair(p, q):
    p, q = categorical(p), categorical(q)
    if p.shape != q.shape:
        raise ShapeError(f"support mismatch: {p.size} vs {q.size}")
    return p, q


def _kl(p, q):
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def kl(p, q):
    """KL(p || q) in nats."""
    return _kl(*_pair(p, q))


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def jsd(dists, weights=None):
    """Jensen-Shannon divergence of k >= 2 distributions (mean KL to their mixture).

    ``weights`` generalises the uniform mixture; omitted means 1/k each.
    """
    dists = [categorical(d) for d in dists]
    if len(dists) < 2:
        raise ContractError("jsd needs at least two distributions")
    if len({d.size for d in dists}) != 1:
        raise ShapeError("all distributions must share a support")
    P = np.stack(dists)
    w = np.full(len(dists), 1.0 / len(dists)) if weights is None else categorical(weights)
    if w.size != len(dists):
        raise ShapeError("one weight per distribution")
    m = w @ P
    # non-negative in exact arithmetic; clip rounding below zero
    return max(float(sum(wi * _kl(pi, m) for wi, pi in zip(w, P) if wi > 0)), 0.0)


def jsd_metric_gap(p, q, r):
    """sqrt JS(p,q) + sqrt JS(q,r) - sqrt JS(p,r); non-negative up to rounding."""
    d = lambda a, b: math.sqrt(max(jsd([a, b]), 0.0))
    return d(p, q) + d(q, r) - d(p, r)


def mixture_mutual_information(components):
    """I(X; Z) for X drawn from component Z, Z uniform over the k components.

    Computed from the explicit joint table, not through ``jsd``.
    """
    comps = [categorical(c) for c in components]
    if len(comps) < 2:
        raise ContractError("need at least two mixture components")
    joint = np.stack(comps) / len(comps)
    pz = joint.sum(axis=1, keepdims=True)
    px = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    ratio = joint[mask] / (pz * px)[mask]
    return float(np.sum(joint[mask] * np.log(ratio)))


def optimal_discriminator(p, p_tilde):
    """D*(a) = p(a) / (p(a) + p~(a)); 1/2 where both vanish."""
    p, q = _pair(p, p_tilde)
    s = p + q
    return np.divide(p, s, out=np.full_like(p, 0.5), where=s > 0)


def discriminator_loss(d, p, p_tilde):
    """(1/2) E_p log D + (1/2) E_p~ log(1 - D) for discriminator outputs ``d``."""
    p, q = _pair(p, p_tilde)
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore"):
        a = np.sum(p[p > 0] * np.log(d[p > 0]))
        b = np.sum(q[q > 0] * np.log1p(-d[q > 0]))
    return float(0.5 * a + 0.5 * b)


def optimal_discriminator_loss(p, p_tilde):
    """Loss attained by D*; equals JS(p, p~) - log 2."""
    return discriminator_loss(optimal_discriminator(p, p_tilde), p, p_tilde)


def pair_discriminator_distance(p, p_tilde):
    """max_D E_p log D + E_p~ log(1 - D) + log 2, attained at D*.

    Closed form 2 JS(p, p~) - log 2, so the range is [-log 2, log 2].
    """
    return 2.0 * optimal_discriminator_loss(p, p_tilde) + LOG2


def jsd_from_pair_distance(distance):
    """Invert :func:`pair_discriminator_distance` back to a JS divergence."""
    return 0.5 * (distance + LOG2)
