"""E(n)-equivariant graph convolutions and the non-equivariant GNF baseline.

Every layer works on batched, fully connected graphs: positions ``x`` of shape
``(B, M, n)`` and features ``h`` of shape ``(B, M, nf)``. Edges are gathered
for ``j != i`` only, so every sum excludes self-pairs; a single node is a valid graph whose
messages are all zero.
"""
import torch
import torch.nn as nn

from .numerics import ACTIVATIONS, Mlp

EDGE_MODES = ("fully_connected", "inferred")


def check_finite(name, **tensors):
    for key, t in tensors.items():
        bad = ~torch.isfinite(t)
        if bad.any():
            idx = bad.nonzero()[0].tolist()
            where = f"node {idx[0]}" if t.dim() == 2 else f"batch {idx[0]}, node {idx[1]}"
            raise ValueError(f"{name}: non-finite value in {key} at {where}")


def neighbour_index(M):
    """``(M, M-1)`` table: row ``i`` lists every ``j != i`` in increasing order."""
    full = torch.arange(M).expand(M, M)
    keep = ~torch.eye(M, dtype=torch.bool)
    return full[keep].reshape(M, M - 1)


def edge_preactivation(first, h, d2, jidx):
    """First affine map of ``phi_e`` on ``[h_i, h_j, d2_ij]`` without materialising the concat.

    ``first`` is an ``nn.Linear`` over ``2 nf (+ 1)`` inputs; returns ``(B, M, M-1, out)``.
    """
    nf = h.shape[-1]
    W = first.weight
    a = h @ W[:, :nf].T
    b = h @ W[:, nf:2 * nf].T
    pre = a.unsqueeze(-2) + b[..., jidx, :] + first.bias
    if d2 is not None:
        pre = pre + d2 * W[:, 2 * nf]
    return pre


def safe_norm(d2):
    """Square root with a zero (rather than NaN) derivative at 0."""
    positive = d2 > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, d2, torch.ones_like(d2))),
                       torch.zeros_like(d2))


def _rest(mlp, z):
    """Apply ``mlp`` to a first-layer pre-activation ``z``."""
    acts = mlp.activations
    z = ACTIVATIONS[acts[0]](z)
    for layer, tag in zip(mlp.layers[1:], acts[1:]):
        z = ACTIVATIONS[tag](layer(z))
    return z


class EGCL(nn.Module):
    """One equivariant layer with the softened coordinate update.

    ``x_i' = x_i + sum_j (x_i - x_j) / (|x_i - x_j| + C) * phi_x(m_ij)``.
    """

    def __init__(self, nf, hidden, generator, edge_mode="inferred", C=1.0,
                 zero_coord_init=True, update_coords=True, update_features=True):
        super().__init__()
        if edge_mode not in EDGE_MODES:
            raise ValueError(f"edge_mode must be one of {EDGE_MODES}, got {edge_mode!r}")
        if not C > 0:
            raise ValueError(f"C must be positive, got {C}")
        self.nf, self.hidden, self.edge_mode, self.C = nf, hidden, edge_mode, float(C)
        self.phi_e = Mlp([2 * nf + 1, hidden, hidden], ["silu", "silu"], generator)
        # a final layer whose x (or h) output is discarded skips that update
        self.phi_x = (Mlp([hidden, hidden, 1], ["silu", "tanh"], generator,
                          zero_last=zero_coord_init) if update_coords else None)
        self.phi_h = (Mlp([nf + hidden, hidden, nf], ["silu", "identity"], generator)
                      if update_features else None)
        self.phi_inf = (Mlp([hidden, 1], ["sigmoid"], generator)
                        if edge_mode == "inferred" and update_features else None)

    def forward(self, x, h):
        check_finite("egcl_forward", x=x, h=h)
        if h.shape[-1] != self.nf:
            raise ValueError(f"egcl_forward: feature width {h.shape[-1]} != layer width {self.nf}")
        jidx = neighbour_index(x.shape[-2])
        diff = x.unsqueeze(-2) - x[..., jidx, :]  # [b, i, k] = x_i - x_{jidx[i, k]}
        d2 = diff.pow(2).sum(-1, keepdim=True)
        m = _rest(self.phi_e, edge_preactivation(self.phi_e.layers[0], h, d2, jidx))
        x_new = x
        if self.phi_x is not None:
            coef = self.phi_x(m) / (safe_norm(d2) + self.C)
            x_new = x + (diff * coef).sum(dim=-2)
        if self.phi_h is None:
            return x_new, h
        if self.phi_inf is not None:
            m = m * self.phi_inf(m)
        m_i = m.sum(dim=-2)
        h_new = h + self.phi_h(torch.cat([h, m_i], dim=-1))
        return x_new, h_new


class EGNN(nn.Module):
    """Plain stack of EGCLs; with zero layers it is the identity."""

    def __init__(self, layers):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    @classmethod
    def build(cls, nf, hidden, n_layers, generator, last_coords=True, last_features=True,
              **layer_kwargs):
        last = {"update_coords": last_coords, "update_features": last_features}
        return cls([EGCL(nf, hidden, generator, **layer_kwargs,
                         **(last if k == n_layers - 1 else {})) for k in range(n_layers)])

    def forward(self, x, h):
        for layer in self.layers:
            x, h = layer(x, h)
        return x, h


class GNFLayer(nn.Module):
    """Message passing on features only; coordinates are already in ``h``."""

    def __init__(self, nf, hidden, generator, attention=False):
        super().__init__()
        self.nf, self.attention = nf, attention
        self.phi_e = Mlp([2 * nf, hidden, hidden], ["silu", "silu"], generator)
        self.phi_h = Mlp([nf + hidden, hidden, nf], ["silu", "identity"], generator)
        self.phi_inf = Mlp([hidden, 1], ["sigmoid"], generator) if attention else None

    def forward(self, h):
        check_finite("gnf_layer_forward", h=h)
        jidx = neighbour_index(h.shape[-2])
        m = _rest(self.phi_e, edge_preactivation(self.phi_e.layers[0], h, None, jidx))
        if self.phi_inf is not None:
            m = m * self.phi_inf(m)
        m_i = m.sum(dim=-2)
        return h + self.phi_h(torch.cat([h, m_i], dim=-1))
