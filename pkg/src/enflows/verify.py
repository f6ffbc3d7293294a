"""Invariant suites run by ``enflows verify`` and the acceptance tests.

Each suite builds its own randomly initialised networks from a seed and
returns a :class:`SuiteResult` with the worst observed error.
"""
from dataclasses import dataclass

import torch

from .cnf import (ENFDynamics, Flow, TraceEstimator, exact_trace, hutchinson_trace, integrate,
                  verify_subspace_determinant)
from .egnn import EGNN
from .geometry import center, random_orthogonal
from .lifting import FeatureLayout, discretize, lift_categorical, lift_ordinal
from .numerics import DTYPE, finite_difference_jacobian, jacobian, make_generator


@dataclass
class SuiteResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}) {self.detail}"


def _check(name, value, tol, detail=""):
    return SuiteResult(name, bool(value <= tol), float(value), tol, detail)


def random_enf(n, nf, generator, hidden=32, n_layers=3):
    """E-NF dynamics with a non-zero coordinate head so every check is non-trivial."""
    return ENFDynamics(n, nf, hidden, n_layers, generator, zero_coord_init=False)


def random_group_element(M, n, generator, reflect=True):
    R = random_orthogonal(n, generator, reflect=reflect)
    t = torch.randn(n, generator=generator, dtype=DTYPE)
    perm = torch.randperm(M, generator=generator)
    return R, t, perm


def equivariance(n_inputs=100, seed=0, M=5, n=3, nf=2, flow_steps=100):
    """Max violation of ``f(g x) = g f(x)`` for EGNN, dynamics and integrated flow."""
    gen = make_generator(seed)
    egnn = EGNN.build(nf, 32, 3, gen, zero_coord_init=False)
    dyn = random_enf(n, nf, gen)
    x = 2 * torch.randn(n_inputs, M, n, generator=gen, dtype=DTYPE)
    h = torch.randn(n_inputs, M, nf, generator=gen, dtype=DTYPE)
    g = [random_group_element(M, n, gen) for _ in range(n_inputs)]
    R = torch.stack([e[0] for e in g])
    t = torch.stack([e[1] for e in g]).unsqueeze(1)
    perm = torch.stack([e[2] for e in g])

    def act(x, h, translate=True):
        xp = torch.einsum("bij,bmj->bmi", R, x)
        if translate:
            xp = xp + t
        idx = perm.unsqueeze(-1)
        return (torch.gather(xp, 1, idx.expand(-1, -1, n)),
                torch.gather(h, 1, idx.expand(-1, -1, h.shape[-1])))

    with torch.no_grad():
        gx, gh = act(x, h)
        a = act(*egnn(x, h))
        b = egnn(gx, gh)
        err_egnn = max((a[0] - b[0]).abs().max().item(), (a[1] - b[1]).abs().max().item())
        dx, dh = dyn(0.0, x, h)
        a = act(dx, dh, translate=False)  # velocities do not translate
        b = dyn(0.0, gx, gh)
        err_dyn = max((a[0] - b[0]).abs().max().item(), (a[1] - b[1]).abs().max().item())
    st = integrate(dyn, x, h, 0.0, 1.0, flow_steps)
    a = act(st.x, st.h)
    st_g = integrate(dyn, gx, gh, 0.0, 1.0, flow_steps)
    err_flow = max((a[0] - st_g.x).abs().max().item(), (a[1] - st_g.h).abs().max().item())
    return [_check("equivariance/egnn", err_egnn, 1e-9),
            _check("equivariance/dynamics", err_dyn, 1e-9),
            _check("equivariance/flow", err_flow, 1e-6, f"{flow_steps} RK4 steps")]


def invertibility(n_inputs=100, seed=0, M=4, n=2, nf=2, steps=100, scale=2.0):
    gen = make_generator(seed)
    flow = Flow(random_enf(n, nf, gen), steps)
    x = center(scale * torch.randn(n_inputs, M, n, generator=gen, dtype=DTYPE))
    h = torch.randn(n_inputs, M, nf, generator=gen, dtype=DTYPE)
    z_x, z_h = flow.transform(x, h)
    x_r, h_r = flow.reverse(z_x, z_h)
    err = max((x_r - x).abs().max().item(), (h_r - h).abs().max().item())
    return [_check("invertibility/round_trip", err, 1e-6, f"{n_inputs} inputs, {steps} steps")]


def trace_finite_difference(instances=10, seed=0, M=4, n=2, nf=1, step=1e-5):
    """Relative error of the autodiff trace against a central-difference Jacobian."""
    gen = make_generator(seed)
    worst = 0.0
    for _ in range(instances):
        dyn = random_enf(n, nf, gen)
        x = 2 * torch.randn(1, M, n, generator=gen, dtype=DTYPE)
        h = torch.randn(1, M, nf, generator=gen, dtype=DTYPE)
        exact = exact_trace(dyn, x, h).item()

        def f(s):
            dx, dh = dyn(0.0, s[:M * n].reshape(1, M, n), s[M * n:].reshape(1, M, nf))
            return torch.cat([dx.reshape(-1), dh.reshape(-1)])

        J = finite_difference_jacobian(f, torch.cat([x.reshape(-1), h.reshape(-1)]), step)
        fd = torch.trace(J).item()
        worst = max(worst, abs(exact - fd) / max(abs(fd), 1e-12))
    return [_check("trace/exact_vs_finite_difference", worst, 1e-5, f"{instances} instances")]


def rademacher_relative_se(dynamics, x, probes):
    """Predicted standard error of the probe mean, relative to the exact trace.

    With Rademacher probes ``Var(eps^T J eps) = 2 * sum_{i != j} S_ij^2`` where
    ``S`` is the symmetric part of the Jacobian.
    """
    M, n = x.shape[-2:]
    h = x[..., :0]
    J = jacobian(lambda s: dynamics(0.0, s.reshape(1, M, n), h)[0].reshape(-1), x.reshape(-1))
    S = (J + J.T) / 2
    var = 2 * (S.pow(2).sum() - S.diagonal().pow(2).sum())
    return (var / probes).sqrt().item() / abs(torch.trace(J).item())


def trace_hutchinson(instances=10, probes=100_000, seed=0, M=4, n=2, scale=2.0,
                     max_relative_se=2.5e-3):
    """Relative error of the Hutchinson mean over ``probes`` Rademacher probes.

    A 1% check is only meaningful where the estimator can resolve 1%, so
    instances whose predicted relative standard error (from the exact
    Jacobian, before any probe is drawn) exceeds ``max_relative_se`` are
    redrawn; the count is reported.
    """
    gen = make_generator(seed)
    est = TraceEstimator("hutchinson", probes)
    worst, used, rejected = 0.0, 0, 0
    while used < instances:
        dyn = random_enf(n, 0, gen)
        x = center(scale * torch.randn(1, M, n, generator=gen, dtype=DTYPE))
        if rademacher_relative_se(dyn, x, probes) > max_relative_se:
            rejected += 1
            continue
        h = x[..., :0]
        exact = exact_trace(dyn, x, h).item()
        approx = hutchinson_trace(dyn, x, h, est, gen).item()
        worst = max(worst, abs(approx - exact) / abs(exact))
        used += 1
    return [_check("trace/hutchinson", worst, 1e-2,
                   f"{instances} instances x {probes} probes, {rejected} ill-conditioned redrawn")]


def subspace_determinant(instances=10, seed=0, M=3, n=2, steps=100):
    gen = make_generator(seed)
    det_err = gain_err = 0.0
    for _ in range(instances):
        dyn = random_enf(n, 0, gen)
        x = center(2 * torch.randn(M, n, generator=gen, dtype=DTYPE))
        r = verify_subspace_determinant(dyn, x, steps=steps)
        det_err = max(det_err, abs(r.ambient_logdet - r.projected_logdet))
        gain_err = max(gain_err, (r.translation_gains - 1).abs().max().item())
    return [_check("subspace/ambient_vs_projected", det_err, 1e-8, f"M={M} n={n}"),
            _check("subspace/translation_gains", gain_err, 1e-6)]


def lifting_round_trip(count=10_000, seed=0, n_ord=2, classes=5, max_level=10):
    """discretize(lift(h)) == h for random ordinal levels and classes."""
    gen = make_generator(seed)
    h_ord = torch.randint(0, max_level, (count, n_ord), generator=gen)
    h_cat = torch.randint(0, classes, (count,), generator=gen)
    mu_o = torch.randn(count, n_ord, generator=gen, dtype=DTYPE)
    sig_o = torch.exp(torch.randn(count, n_ord, generator=gen, dtype=DTYPE))
    mu_c = torch.randn(count, classes, generator=gen, dtype=DTYPE)
    sig_c = torch.exp(torch.randn(count, classes, generator=gen, dtype=DTYPE))
    h_o, _ = lift_ordinal(h_ord, mu_o, sig_o, gen)
    y, _ = lift_categorical(h_cat, classes, mu_c, sig_c, gen)
    d = discretize(torch.cat([h_o, y], dim=-1), FeatureLayout(n_ord, (classes,)))
    ok = (d.h_ord == h_ord).all(-1) & (d.h_cat[..., 0] == h_cat)
    mismatch = 1.0 - ok.to(DTYPE).mean().item()
    return [_check("lifting/round_trip", mismatch, 0.0, f"{count} features")]


SUITES = {
    "equivariance": equivariance,
    "invertibility": invertibility,
    "trace_fd": trace_finite_difference,
    "trace_hutchinson": trace_hutchinson,
    "subspace": subspace_determinant,
    "lifting": lifting_round_trip,
}


def run_all(seed=0, names=None):
    results = []
    for name in names or SUITES:
        results.extend(SUITES[name](seed=seed))
    return results
