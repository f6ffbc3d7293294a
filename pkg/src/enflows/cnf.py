"""Continuous-time flow: dynamics, RK4 integration and Jacobian-trace estimation.

Time runs from data (t=0) to latent (t=1). The log-density change is the
time integral of the dynamics' Jacobian trace, accumulated with the same RK4
weights as the state so gradients are exactly those of the computed value.
"""
from dataclasses import dataclass

import torch
import torch.nn as nn

from .egnn import EGNN, GNFLayer
from .geometry import base_log_density, build_projection, center, sample_base
from .numerics import DTYPE, linear

MAX_EXACT_DIM = 512
MAX_SUBSPACE_DIM = 64
VARIANTS = ("enf", "gnf", "gnf-att", "gnf-att-aug", "zero")


class ENFDynamics(nn.Module):
    """EGNN velocity field: ``dx = centre(x^L - x)``, ``dh = h^L``.

    Positional-only data (``nf == 0``) feeds a constant unit feature into the
    network; its feature output is discarded.
    """
    variant = "enf"

    def __init__(self, n, nf, hidden, n_layers, generator, edge_mode="inferred", C=1.0,
                 zero_coord_init=True):
        super().__init__()
        self.n, self.nf = n, nf
        self.embed = linear(max(nf, 1), hidden, generator)
        self.egnn = EGNN.build(hidden, hidden, n_layers, generator, edge_mode=edge_mode, C=C,
                               zero_coord_init=zero_coord_init, last_features=nf > 0)
        self.head = linear(hidden, nf, generator) if nf > 0 else None

    @classmethod
    def from_egnn(cls, egnn, n, nf):
        """Wrap a bare EGNN whose width equals ``nf`` (no embedding maps)."""
        self = cls.__new__(cls)
        nn.Module.__init__(self)
        self.n, self.nf = n, nf
        self.embed, self.egnn, self.head = None, egnn, None
        return self

    def forward(self, t, x, h):
        h0 = h if self.nf > 0 else torch.ones(*x.shape[:-1], 1, dtype=x.dtype)
        if self.embed is not None:
            h0 = self.embed(h0)
        xL, hL = self.egnn(x, h0)
        dx = center(xL - x)
        if self.nf == 0:
            dh = h[..., :0] if h is not None else x[..., :0]
        else:
            dh = self.head(hL) if self.head is not None else hL
        return dx, dh


class GNFDynamics(nn.Module):
    """Non-equivariant baseline: coordinates are linearly embedded as features."""

    def __init__(self, n, nf, hidden, n_layers, generator, attention=False, zero_out_init=True):
        super().__init__()
        self.n, self.nf, self.attention = n, nf, attention
        self.variant = "gnf-att" if attention else "gnf"
        self.embed = linear(n + nf, hidden, generator)
        self.layers = nn.ModuleList(
            GNFLayer(hidden, hidden, generator, attention=attention) for _ in range(n_layers))
        self.out = linear(hidden, n + nf, generator, zero=zero_out_init)

    def forward(self, t, x, h):
        e = self.embed(torch.cat([x, h], dim=-1))
        for layer in self.layers:
            e = layer(e)
        o = self.out(e)
        return center(o[..., :self.n]), o[..., self.n:]


class ZeroDynamics(nn.Module):
    variant = "zero"

    def __init__(self, n, nf):
        super().__init__()
        self.n, self.nf = n, nf

    def forward(self, t, x, h):
        return torch.zeros_like(x), torch.zeros_like(h)


def build_dynamics(variant, n, nf, hidden, n_layers, generator, edge_mode="inferred", C=1.0,
                   zero_init=True):
    if variant == "enf":
        return ENFDynamics(n, nf, hidden, n_layers, generator, edge_mode=edge_mode, C=C,
                           zero_coord_init=zero_init)
    if variant == "gnf":
        return GNFDynamics(n, nf, hidden, n_layers, generator, zero_out_init=zero_init)
    if variant in ("gnf-att", "gnf-att-aug"):
        return GNFDynamics(n, nf, hidden, n_layers, generator, attention=True,
                           zero_out_init=zero_init)
    if variant == "zero":
        return ZeroDynamics(n, nf)
    raise ValueError(f"unknown dynamics variant {variant!r}; choose from {VARIANTS}")


def enf_differential(dynamics, x, h, t=0.0):
    dx, dh = dynamics(t, x, h)
    if not (torch.isfinite(dx).all() and torch.isfinite(dh).all()):
        raise ValueError(f"dynamics produced a non-finite differential at t={float(t):.6g}")
    return dx, dh


@dataclass
class TraceEstimator:
    mode: str = "exact"  # exact | hutchinson
    probes: int = 1
    distribution: str = "rademacher"  # rademacher | gaussian

    def __post_init__(self):
        if self.mode not in ("exact", "hutchinson"):
            raise ValueError(f"trace mode must be exact or hutchinson, got {self.mode!r}")
        if self.mode == "hutchinson" and self.probes < 1:
            raise ValueError("hutchinson mode needs at least one probe")
        if self.distribution not in ("rademacher", "gaussian"):
            raise ValueError(f"unknown probe distribution {self.distribution!r}")

    def draw(self, shape, generator):
        if self.distribution == "gaussian":
            return torch.randn(shape, generator=generator, dtype=DTYPE)
        return torch.randint(0, 2, shape, generator=generator).to(DTYPE) * 2 - 1


@dataclass
class FlowState:
    x: torch.Tensor
    h: torch.Tensor
    logdet: torch.Tensor


def _flat(dx, dh):
    return torch.cat([dx.flatten(-2), dh.flatten(-2)], dim=-1)


def _track(t):
    return t if t.requires_grad else t.detach().requires_grad_(True)


def _differential_and_trace(dynamics, t, x, h, mode, probe, differentiable):
    """Return ``(dx, dh, trace)``; ``mode`` is None, "exact" or "hutchinson"."""
    if mode is None:
        with torch.set_grad_enabled(differentiable and torch.is_grad_enabled()):
            dx, dh = enf_differential(dynamics, x, h, t)
        return dx, dh, torch.zeros(x.shape[:-2], dtype=x.dtype)
    with torch.enable_grad():
        if not differentiable:
            x, h = x.detach(), h.detach()
        x, h = _track(x), _track(h)
        dx, dh = enf_differential(dynamics, x, h, t)
        f = _flat(dx, dh)
        D = f.shape[-1]
        if mode == "exact" and D > MAX_EXACT_DIM:
            raise ValueError(f"exact trace needs {D} backward passes (limit {MAX_EXACT_DIM}); "
                             "use hutchinson mode for states this large")
        if not f.requires_grad:  # state-independent dynamics
            tr = torch.zeros(f.shape[:-1], dtype=f.dtype)
        elif mode == "exact":
            # all D unit cotangents in one batched backward pass
            eye = torch.eye(D, dtype=f.dtype).reshape(D, *(1,) * (f.dim() - 1), D)
            gx, gh = torch.autograd.grad(f, [x, h], eye.expand(D, *f.shape),
                                         create_graph=differentiable, retain_graph=True,
                                         allow_unused=True, is_grads_batched=True)
            gx = torch.zeros(D, *x.shape, dtype=x.dtype) if gx is None else gx
            gh = torch.zeros(D, *h.shape, dtype=h.dtype) if gh is None else gh
            tr = torch.diagonal(_flat(gx, gh), dim1=0, dim2=-1).sum(-1)
        else:
            gx, gh = torch.autograd.grad((f * probe).sum(), [x, h], create_graph=differentiable,
                                         retain_graph=True, allow_unused=True)
            gx = torch.zeros_like(x) if gx is None else gx
            gh = torch.zeros_like(h) if gh is None else gh
            tr = (_flat(gx, gh) * probe).sum(-1)
    if not differentiable:
        dx, dh, tr = dx.detach(), dh.detach(), tr.detach()
    return dx, dh, tr


def exact_trace(dynamics, x, h, t=0.0, differentiable=False):
    """Trace of the dynamics Jacobian w.r.t. the full state, one sample per batch row."""
    return _differential_and_trace(dynamics, t, x, h, "exact", None, differentiable)[2]


def hutchinson_trace(dynamics, x, h, estimator, generator, t=0.0, chunk=4096):
    """Mean of ``eps^T J eps`` over ``estimator.probes`` probes per sample.

    The differential is evaluated once. ``eps^T J`` is linear in ``eps``, so
    once a chunk holds more probes than state dimensions the Jacobian is built
    from ``D`` backward passes and applied to every probe.
    """
    B = x.shape[:-2]
    D = x.shape[-2] * x.shape[-1] + h.shape[-2] * h.shape[-1]
    rows = x[..., 0, 0].numel()
    total = torch.zeros(B, dtype=x.dtype)

    def vjp(f, xs, hs, cotangent):
        k = cotangent.shape[0]
        gx, gh = torch.autograd.grad(f, [xs, hs], cotangent, retain_graph=True,
                                     allow_unused=True, is_grads_batched=True)
        gx = torch.zeros(k, *x.shape, dtype=x.dtype) if gx is None else gx
        gh = torch.zeros(k, *h.shape, dtype=x.dtype) if gh is None else gh
        return _flat(gx, gh)

    with torch.enable_grad():
        xs, hs = _track(x.detach()), _track(h.detach())
        f = _flat(*enf_differential(dynamics, xs, hs, t))
        if not f.requires_grad:
            return total
        jac = None
        remaining = estimator.probes
        while remaining > 0:
            k = min(chunk, remaining)
            probe = estimator.draw((k * rows, D), generator).reshape(k, *f.shape)
            if k > D:
                if jac is None:
                    eye = torch.eye(D, dtype=f.dtype).reshape(D, *(1,) * len(B), D)
                    jac = vjp(f, xs, hs, eye.expand(D, *f.shape)).movedim(0, -2)
                rows_vjp = torch.einsum("k...i,...ij->k...j", probe, jac)
            else:
                rows_vjp = vjp(f, xs, hs, probe)
            total = total + (rows_vjp * probe).sum(-1).sum(0)
            remaining -= k
    return total.detach() / estimator.probes


def integrate(dynamics, x, h, t0=0.0, t1=1.0, steps=20, trace=None, probe=None,
              differentiable=False):
    """Fixed-step RK4 on the augmented state ``(x, h, logdet)``.

    ``trace`` is None, "exact" or "hutchinson"; in hutchinson mode the same
    ``probe`` (shape ``(B, D)``) is used at every stage of every step.
    Returns the final :class:`FlowState` with ``logdet = int_t0^t1 Tr J dt``.
    """
    if steps < 1:
        raise ValueError("integrate: steps must be >= 1")
    if t0 == t1:
        raise ValueError("integrate: t0 and t1 must differ")
    if trace == "hutchinson" and probe is None:
        raise ValueError("integrate: hutchinson trace needs a probe")
    dt = (t1 - t0) / steps
    logdet = torch.zeros(x.shape[:-2], dtype=x.dtype)
    if not differentiable:
        x, h = x.detach(), h.detach()

    def f(t, x, h):
        return _differential_and_trace(dynamics, t, x, h, trace, probe, differentiable)

    for i in range(steps):
        t = t0 + i * dt
        try:
            k1 = f(t, x, h)
            k2 = f(t + dt / 2, x + dt / 2 * k1[0], h + dt / 2 * k1[1])
            k3 = f(t + dt / 2, x + dt / 2 * k2[0], h + dt / 2 * k2[1])
            k4 = f(t + dt, x + dt * k3[0], h + dt * k3[1])
        except ValueError as e:
            raise ValueError(f"integrate: RK4 step {i + 1}/{steps}: {e}") from None
        x = x + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        h = h + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        logdet = logdet + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if not (torch.isfinite(x).all() and torch.isfinite(h).all()
                and torch.isfinite(logdet).all()):
            raise ValueError(f"integrate: non-finite state after step {i}")
    return FlowState(x, h, logdet)


class Flow(nn.Module):
    """Invertible map (x, h) -> (z_x, z_h) given by integrating ``dynamics`` over [0, 1]."""

    def __init__(self, dynamics, steps=20):
        super().__init__()
        self.dynamics = dynamics
        self.steps = steps

    @property
    def n(self):
        return self.dynamics.n

    @property
    def nf(self):
        return self.dynamics.nf

    def log_likelihood(self, x, h, estimator=None, generator=None, steps=None,
                       differentiable=False):
        """``log p(x, h) = log p_Z(z) + int_0^1 Tr J dt`` for lifted ``h``.

        Returns ``(log_p, z_x, z_h)`` with one value per batch row.
        """
        estimator = estimator or TraceEstimator()
        if h is None:
            h = x[..., :0]
        x = center(x)
        probe = None
        if estimator.mode == "hutchinson":
            D = x.shape[-2] * (x.shape[-1] + h.shape[-1])
            probe = estimator.draw((*x.shape[:-2], D), generator)
        state = integrate(self.dynamics, x, h, 0.0, 1.0, steps or self.steps,
                          trace=estimator.mode, probe=probe, differentiable=differentiable)
        log_p = base_log_density(state.x, state.h) + state.logdet
        return log_p, state.x, state.h

    def forward(self, x, h, estimator=None, generator=None):
        return self.log_likelihood(x, h, estimator, generator, differentiable=True)[0]

    def transform(self, x, h, steps=None):
        state = integrate(self.dynamics, x, h, 0.0, 1.0, steps or self.steps)
        return state.x, state.h

    def reverse(self, z_x, z_h, steps=None):
        state = integrate(self.dynamics, z_x, z_h, 1.0, 0.0, steps or self.steps)
        return state.x, state.h

    def sample(self, M, generator, batch=1, steps=None):
        z_x, z_h = sample_base(M, self.n, self.nf, generator, batch=batch)
        return self.reverse(z_x, z_h, steps)


def sample(flow, M, generator, batch=1, steps=None, layout=None):
    """Draw ``batch`` point sets of ``M`` nodes; discretise features when ``layout`` is given.

    Returns ``(x, h_cont, discrete)`` where ``discrete`` is a
    :class:`~enflows.lifting.DiscreteFeatures` or None.
    """
    from .lifting import discretize

    x, h = flow.sample(M, generator, batch=batch, steps=steps)
    discrete = discretize(h, layout) if layout is not None else None
    return x, h, discrete


@dataclass
class SubspaceDeterminant:
    ambient_logdet: float
    projected_logdet: float
    trace_logdet: float
    translation_gains: torch.Tensor  # |J q_k| for each translation direction
    translation_residual: float  # max |J q_k - q_k|


def verify_subspace_determinant(dynamics, x, h=None, steps=100):
    """Compare ``log|det J_f|`` in ambient coordinates with ``log|det P J_f P^T|``.

    ``x`` is a single ``(M, n)`` configuration. The full-state Jacobian of the
    integrated map is built by differentiating through the RK4 solve.
    """
    M, n = x.shape
    if h is None:
        h = x[:, :0]
    nf = h.shape[-1]
    if (M - 1) * n > MAX_SUBSPACE_DIM:
        raise ValueError(f"verify_subspace_determinant: subspace dim {(M - 1) * n} exceeds "
                         f"{MAX_SUBSPACE_DIM}")
    proj = build_projection(M, n)
    Dx, Dh = M * n, M * nf

    def flow_map(s):
        xs, hs = s[:Dx].reshape(1, M, n), s[Dx:].reshape(1, M, nf)
        st = integrate(dynamics, xs, hs, 0.0, 1.0, steps, differentiable=True)
        return torch.cat([st.x.reshape(-1), st.h.reshape(-1)])

    s0 = torch.cat([x.reshape(-1), h.reshape(-1)]).to(DTYPE).detach().requires_grad_(True)
    out = flow_map(s0)
    rows = []
    for k in range(out.shape[0]):
        (g,) = torch.autograd.grad(out[k], s0, retain_graph=True)
        rows.append(g)
    J = torch.stack(rows).detach()

    P = torch.block_diag(proj.P, torch.eye(Dh, dtype=DTYPE))
    ambient = torch.linalg.slogdet(J)[1].item()
    projected = torch.linalg.slogdet(P @ J @ P.T)[1].item()
    T = torch.cat([proj.translations, torch.zeros(n, Dh, dtype=DTYPE)], dim=1)
    JT = T @ J.T  # rows: J q_k
    gains = JT.norm(dim=1)
    residual = (JT - T).abs().max().item()
    trace_state = integrate(dynamics, x.unsqueeze(0).detach(), h.unsqueeze(0).detach(), 0.0,
                            1.0, steps, trace="exact")
    return SubspaceDeterminant(ambient, projected, trace_state.logdet.item(), gains, residual)
