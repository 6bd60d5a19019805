"""Property suites behind ``patchlab verify``; each returns [(name, passed, detail)]."""

import math

import numpy as np

from . import divergences as dv
from .autodiff import Mlp
from .data import correlation_cell_counts, generate_coupled_world, mnist_correlation, synthetic_digits
from .invariance import (FiniteJoint, HeadConfig, chain_rule_gap, coupled_mi_as_jsd,
                         data_processing_gap, exact_conditional_mi, one_hot,
                         variational_mi_estimate, verify_theorem1)
from .objectives import self_consistency
from .translate import AffineTranslator, MixtureTranslator, analytic_translators


def _check(name, ok, detail):
    return (name, bool(ok), detail)


def random_distribution(rng, n, alpha=1.0):
    return rng.dirichlet(np.full(n, alpha))


def random_mixture(rng):
    k, n = int(rng.integers(2, 6)), int(rng.integers(2, 9))
    return [random_distribution(rng, n, rng.choice([0.3, 1.0, 3.0])) for _ in range(k)]


def divergences_suite(trials=None, seed=0):
    trials = trials or 1000
    rng = np.random.default_rng(seed)
    mi_err = disc_err = 0.0
    tri_gap = math.inf
    kl_min = math.inf
    bound_ok = range_ok = sc_ok = True
    opt_ok = True
    for _ in range(trials):
        comps = random_mixture(rng)
        j = dv.jsd(comps)
        mi_err = max(mi_err, abs(dv.mixture_mutual_information(comps) - j))
        bound_ok &= -1e-15 <= j <= math.log(len(comps)) + 1e-12
        sc_ok &= abs(self_consistency(np.stack(comps)) - j) < 1e-12
        p, q, r = (random_distribution(rng, comps[0].size) for _ in range(3))
        disc_err = max(disc_err, abs(dv.optimal_discriminator_loss(p, q) - (dv.jsd([p, q]) - dv.LOG2)))
        tri_gap = min(tri_gap, dv.jsd_metric_gap(p, q, r))
        kl_min = min(kl_min, dv.kl(p, q))
        d = dv.pair_discriminator_distance(p, q)
        range_ok &= -dv.LOG2 - 1e-12 <= d <= dv.LOG2 + 1e-12
        range_ok &= abs(dv.jsd_from_pair_distance(d) - dv.jsd([p, q])) < 1e-12
        other = rng.uniform(0.001, 0.999, p.size)
        opt_ok &= dv.discriminator_loss(other, p, q) <= dv.optimal_discriminator_loss(p, q) + 1e-12
    return [
        _check("mixture MI equals JSD", mi_err < 1e-10, f"max |MI - JSD| = {mi_err:.3e} over {trials}"),
        _check("optimal discriminator loss is JSD - log 2", disc_err < 1e-10, f"max error {disc_err:.3e}"),
        _check("sqrt-JSD triangle inequality", tri_gap >= -1e-9, f"min gap {tri_gap:.3e}"),
        _check("KL non-negative", kl_min >= -1e-12, f"min KL {kl_min:.3e}"),
        _check("0 <= JSD <= log k", bound_ok, "all mixtures"),
        _check("pair distance in [-log 2, log 2] and inverts to JSD", range_ok, "all pairs"),
        _check("no discriminator beats the optimal one", opt_ok, f"{trials} random discriminators"),
        _check("self-consistency equals JSD", sc_ok, "all mixtures"),
    ]


def generator_suite(trials=None, seed=0):
    clean = synthetic_digits(44000, seed=seed)
    split = mnist_correlation(clean, 40000, 0.98, seed=seed, n_test=1000)
    want = {(0, 0): 9900, (0, 1): 100, (1, 0): 100, (1, 1): 9900}
    counts = split.counts()
    world = generate_coupled_world(seed=seed)
    ex, _ = world.enumerate()
    bank = analytic_translators(world)
    exact = all(np.array_equal(bank[(int(y), int(z), zp)](x),
                               world.render(int(y), zp, int(c) - int(y) * world.num_latents))
                for x, y, z, c in zip(ex.x, ex.y, ex.z, ex.coupled_id) for zp in range(world.k))
    test = split.test.cell_counts()
    return [
        _check("train counts (N=40000, rho=0.98)", counts["train"] == want, str(counts["train"])),
        _check("validation counts (N=40000, rho=0.98)", counts["validation"] == want,
               str(counts["validation"])),
        _check("cell count formula at rho=0", correlation_cell_counts(40000, 0.0)[(0, 1)] == 10000,
               str(correlation_cell_counts(40000, 0.0))),
        _check("test subgroups balanced", test[(0, 0)] == test[(0, 1)] and test[(1, 0)] == test[(1, 1)],
               str(test)),
        _check("analytic translators reproduce coupled sets", exact, f"{len(ex)} examples"),
    ]


def random_model(world, rng):
    width = int(rng.integers(2, 12))
    model = Mlp([world.input_dim, width, world.num_classes], rng)
    for p in model.parameters():
        p.data *= rng.uniform(0.5, 4.0)
    return model


def random_world(rng, k=2):
    return generate_coupled_world(num_classes=int(rng.integers(2, 4)), k=k,
                                  latents_per_class=int(rng.integers(2, 6)),
                                  input_dim=int(rng.integers(3, 7)), seed=int(rng.integers(2**31)),
                                  subgroup_shift=int(rng.integers(1, 4)))


def random_imperfect_translators(world, rng):
    """Stochastic translators mixing the exact map with wrong affine maps."""
    exact = analytic_translators(world)
    bank = {}
    d = world.input_dim
    for (y, z, zp), tr in exact.items():
        if z == zp:
            continue
        comps = [tr,
                 AffineTranslator(z, zp, tr.matrix.data, tr.offset.data + rng.normal(0, 0.5, d)),
                 AffineTranslator(z, zp, rng.normal(size=(d, d)), rng.normal(size=d))]
        w = rng.dirichlet(np.ones(3))
        u = rng.random()
        if u < 0.2:
            w = np.array([0.0, 0.0, 1.0])
        elif u < 0.5:
            eps = 10.0 ** rng.uniform(-6, -1)
            w = np.array([1.0 - eps, eps, 0.0])
        bank[(y, z, zp)] = MixtureTranslator(z, zp, comps, w / w.sum())
    return bank


def bound_suite(trials=None, seed=0):
    trials = trials or 100
    rng = np.random.default_rng(seed)
    min_slack, max_eq, min_dpi = math.inf, 0.0, math.inf
    for _ in range(trials):
        world = random_world(rng)
        model = random_model(world, rng)
        report = verify_theorem1(model, world, random_imperfect_translators(world, rng))
        min_slack = min(min_slack, report.slack)
        eq = verify_theorem1(model, world, analytic_translators(world))
        max_eq = max(max_eq, abs(eq.lhs - eq.rhs))
        min_dpi = min(min_dpi, data_processing_gap(model, world, random_imperfect_translators(world, rng)))
    return [
        _check("bound slack non-negative", min_slack >= -1e-9, f"min slack {min_slack:.3e} over {trials}"),
        _check("equality under analytic translators", max_eq < 1e-10, f"max |lhs - rhs| = {max_eq:.3e}"),
        _check("data-processing inequality", min_dpi >= -1e-9, f"min gap {min_dpi:.3e}"),
    ]


def random_finite_problem(rng):
    """Joint over (y, x, z) with a known I(X; Z | Y); returns (features, y, z, weights, mi)."""
    m, k = int(rng.integers(2, 6)), int(rng.integers(2, 4))
    table = rng.dirichlet(np.full(2 * m * k, rng.choice([0.3, 1.0]))).reshape(2, m, k)
    mi = exact_conditional_mi(FiniteJoint(table, ("y", "x", "z")), "x", "z", "y")
    yy, xx, zz = np.meshgrid(range(2), range(m), range(k), indexing="ij")
    return one_hot(xx.ravel(), m), yy.ravel(), zz.ravel(), table.ravel(), mi


def mi_suite(trials=None, seed=0):
    trials = trials or 100
    rng = np.random.default_rng(seed)
    identity_err, min_gap = 0.0, math.inf
    for _ in range(trials):
        world = random_world(rng, k=int(rng.integers(2, 4)))
        model = random_model(world, rng)
        mi, ej = coupled_mi_as_jsd(model, world)
        identity_err = max(identity_err, abs(mi - ej))
        min_gap = min(min_gap, chain_rule_gap(model, world))
    worst_low = worst_high = 0.0
    for _ in range(20):
        feats, y, z, w, mi = random_finite_problem(rng)
        est = variational_mi_estimate(feats, y, z, HeadConfig(epochs=3000), weights=w)
        worst_low = max(worst_low, mi - est)
        worst_high = max(worst_high, est - mi)
    return [
        _check("conditional MI equals expected coupled-set JSD", identity_err < 1e-10,
               f"max error {identity_err:.3e} over {trials}"),
        _check("chain-rule inequality", min_gap >= -1e-9, f"min gap {min_gap:.3e}"),
        _check("variational estimate within [MI - 0.05, MI + 0.02]",
               worst_low <= 0.05 and worst_high <= 0.02,
               f"max shortfall {worst_low:.4f}, max excess {worst_high:.4f} on 20 problems"),
    ]
