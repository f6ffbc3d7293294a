"""Lifting discrete node features to continuous space, and the node-count prior.

Ordinal channels use variational dequantization: ``h_cont = h_ord + sigmoid(u)``
with ``u ~ N(mu, sigma)``. Categorical channels use argmax thresholding: the
chosen class keeps ``T = w_i`` and every other class becomes
``T - softplus(T - w_j)``, so it sits strictly below ``T``.

Continuous feature layout per node: ordinal channels first, then one block of
``K`` values per categorical channel.
"""
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .egnn import EGNN
from .numerics import DTYPE, linear

SIGMA_MIN = 1e-6
SIGMA_MAX = 1e3
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class FeatureLayout:
    n_ord: int = 0
    cat_classes: tuple = ()

    @property
    def width(self):
        return self.n_ord + sum(self.cat_classes)

    def cat_slices(self):
        start = self.n_ord
        for K in self.cat_classes:
            yield slice(start, start + K)
            start += K


@dataclass
class DiscreteFeatures:
    h_ord: torch.Tensor  # (..., M, n_ord) int64
    h_cat: torch.Tensor  # (..., M, n_cat) int64


@dataclass
class LiftedFeatures:
    h_cont: torch.Tensor  # (..., M, layout.width)
    log_q: torch.Tensor  # (...), summed over nodes and channels
    log_q_ord: torch.Tensor
    log_q_cat: torch.Tensor


def _check_sigma(sigma):
    if (sigma < SIGMA_MIN).any():
        raise ValueError(f"lifting: sigma must be >= {SIGMA_MIN} (got min {sigma.min().item():.3e})")


def normal_log_prob(v, mu, sigma):
    return -0.5 * ((v - mu) / sigma) ** 2 - torch.log(sigma) - 0.5 * LOG_2PI


def log_sigmoid_derivative(z):
    return F.logsigmoid(z) + F.logsigmoid(-z)


def lift_ordinal(h_ord, mu, sigma, generator):
    """Return ``(h_cont, log_q)``; ``log_q`` keeps the shape of ``h_ord`` (per channel)."""
    _check_sigma(sigma)
    eps = torch.randn(h_ord.shape, generator=generator, dtype=DTYPE)
    u_logit = mu + sigma * eps
    base = h_ord.to(DTYPE)
    # a saturated sigmoid must not round up into the next integer cell
    h_cont = torch.minimum(base + torch.sigmoid(u_logit), torch.nextafter(base + 1, base))
    log_q = normal_log_prob(u_logit, mu, sigma) - log_sigmoid_derivative(u_logit)
    return h_cont, log_q


def ordinal_log_density(h_cont, h_ord, mu, sigma):
    """Density of :func:`lift_ordinal`'s output at ``h_cont``; -inf outside ``(h, h+1)``."""
    _check_sigma(sigma)
    u = h_cont - h_ord.to(DTYPE)
    inside = (u > 0) & (u < 1)
    uc = u.clamp(1e-300, 1 - 1e-16)
    u_logit = torch.log(uc) - torch.log1p(-uc)
    log_q = normal_log_prob(u_logit, mu, sigma) - log_sigmoid_derivative(u_logit)
    return torch.where(inside, log_q, torch.full_like(log_q, -math.inf))


def lift_categorical(h_cat, K, mu, sigma, generator):
    """Lift class indices ``(...,)`` to ``(..., K)`` vectors whose argmax is the class.

    ``mu`` and ``sigma`` have shape ``(..., K)``. Returns ``(y, log_q)`` with
    ``log_q`` of shape ``(...)``.
    """
    _check_sigma(sigma)
    if ((h_cat < 0) | (h_cat >= K)).any():
        raise ValueError(f"lift_categorical: class index outside [0, {K})")
    w = mu + sigma * torch.randn(mu.shape, generator=generator, dtype=DTYPE)
    onehot = F.one_hot(h_cat.long(), K).to(DTYPE)
    T = (w * onehot).sum(-1, keepdim=True)
    # keep losing classes strictly below T even when softplus underflows
    below = torch.minimum(T - F.softplus(T - w), torch.nextafter(T, T - 1))
    y = onehot * T + (1 - onehot) * below
    # dy_j/dw_j = sigmoid(T - w_j) for j != i; the Jacobian is triangular
    log_det = ((1 - onehot) * F.logsigmoid(T - w)).sum(-1)
    log_q = normal_log_prob(w, mu, sigma).sum(-1) - log_det
    return y, log_q


def _softplus_inverse(v):
    return v + torch.log(-torch.expm1(-v))


def categorical_log_density(y, h_cat, mu, sigma):
    """Density of :func:`lift_categorical`'s output at ``y``; -inf where argmax differs."""
    _check_sigma(sigma)
    K = y.shape[-1]
    onehot = F.one_hot(h_cat.long(), K).to(DTYPE)
    T = (y * onehot).sum(-1, keepdim=True)
    gap = T - y  # softplus(T - w_j) for j != i, must be > 0
    valid = ((gap > 0) | (onehot > 0)).all(-1)
    safe_gap = torch.where(onehot > 0, torch.ones_like(gap), gap.clamp_min(1e-300))
    w = torch.where(onehot > 0, y, T - _softplus_inverse(safe_gap))
    log_det = ((1 - onehot) * F.logsigmoid(T - w)).sum(-1)
    log_q = normal_log_prob(w, mu, sigma).sum(-1) - log_det
    return torch.where(valid, log_q, torch.full_like(log_q, -math.inf))


def discretize(h_cont, layout):
    """Floor ordinal channels, argmax categorical blocks (ties -> lowest index)."""
    if not torch.isfinite(h_cont).all():
        raise ValueError("discretize: non-finite feature values")
    h_ord = torch.floor(h_cont[..., :layout.n_ord]).long()
    cats = [torch.argmax(h_cont[..., s], dim=-1) for s in layout.cat_slices()]
    h_cat = (torch.stack(cats, dim=-1) if cats
             else torch.zeros(*h_cont.shape[:-1], 0, dtype=torch.long))
    return DiscreteFeatures(h_ord, h_cat)


def vi_objective(log_p_flow, log_q_ord, log_q_cat):
    """Single-sample estimate of the variational lower bound on the discrete likelihood."""
    return log_p_flow - log_q_ord - log_q_cat


class Lifter(nn.Module):
    """Shared EGNN predicting per-node lifting noise parameters from discrete features."""

    def __init__(self, layout, hidden, n_layers, generator, edge_mode="fully_connected"):
        super().__init__()
        self.layout = layout
        in_nf = layout.n_ord + sum(layout.cat_classes)
        self.embed = linear(max(in_nf, 1), hidden, generator)
        self.egnn = EGNN.build(hidden, hidden, n_layers, generator, edge_mode=edge_mode,
                               last_coords=False)
        self.ord_head = linear(hidden, 2 * layout.n_ord, generator) if layout.n_ord else None
        n_cat = sum(layout.cat_classes)
        self.cat_head = linear(hidden, 2 * n_cat, generator) if n_cat else None

    def _inputs(self, h_ord, h_cat):
        parts = []
        if self.layout.n_ord:
            parts.append(h_ord.to(DTYPE))
        for c, K in enumerate(self.layout.cat_classes):
            parts.append(F.one_hot(h_cat[..., c].long(), K).to(DTYPE))
        return torch.cat(parts, dim=-1)

    @staticmethod
    def _split(raw):
        mu, log_sigma = raw.chunk(2, dim=-1)
        log_sigma = log_sigma.clamp(math.log(SIGMA_MIN), math.log(SIGMA_MAX))
        return mu, torch.exp(log_sigma)

    def noise_params(self, x, h_ord, h_cat):
        e = self.embed(self._inputs(h_ord, h_cat))
        _, e = self.egnn(x, e)
        ord_p = self._split(self.ord_head(e)) if self.ord_head is not None else None
        cat_p = self._split(self.cat_head(e)) if self.cat_head is not None else None
        return ord_p, cat_p

    def forward(self, x, h_ord, h_cat, generator):
        """Lift a batch: ``x (B, M, n)``, ``h_ord (B, M, n_ord)``, ``h_cat (B, M, n_cat)``."""
        ord_p, cat_p = self.noise_params(x, h_ord, h_cat)
        lead = x.shape[:-2]
        parts = []
        log_q_ord = torch.zeros(lead, dtype=DTYPE)
        log_q_cat = torch.zeros(lead, dtype=DTYPE)
        if ord_p is not None:
            h_cont, lq = lift_ordinal(h_ord, ord_p[0], ord_p[1], generator)
            parts.append(h_cont)
            log_q_ord = lq.sum(dim=(-2, -1))
        if cat_p is not None:
            start = 0
            for c, K in enumerate(self.layout.cat_classes):
                mu, sigma = cat_p[0][..., start:start + K], cat_p[1][..., start:start + K]
                y, lq = lift_categorical(h_cat[..., c], K, mu, sigma, generator)
                parts.append(y)
                log_q_cat = log_q_cat + lq.sum(-1)
                start += K
        h_cont = torch.cat(parts, dim=-1) if parts else x[..., :0]
        return LiftedFeatures(h_cont, log_q_ord + log_q_cat, log_q_ord, log_q_cat)


class NodeCountDistribution:
    """Empirical categorical distribution over the number of nodes."""

    def __init__(self, counts):
        counts = {int(m): int(c) for m, c in counts.items() if c > 0}
        if not counts:
            raise ValueError("NodeCountDistribution: no observations")
        self.counts = dict(sorted(counts.items()))
        self.total = sum(self.counts.values())

    @classmethod
    def fit(cls, node_counts):
        node_counts = list(node_counts)
        if not node_counts:
            raise ValueError("fit_node_counts: empty dataset")
        return cls(Counter(node_counts))

    def prob(self, M):
        if int(M) not in self.counts:
            raise ValueError(f"node count {M} has zero probability under the fitted distribution")
        return self.counts[int(M)] / self.total

    def log_prob(self, M):
        return math.log(self.prob(M))

    def sample(self, generator, size=None):
        sizes = np.array(list(self.counts))
        probs = torch.tensor([c / self.total for c in self.counts.values()], dtype=DTYPE)
        idx = torch.multinomial(probs, 1 if size is None else size, replacement=True,
                                generator=generator)
        out = sizes[idx.numpy()]
        return int(out[0]) if size is None else out.tolist()

    def to_dict(self):
        return {str(k): v for k, v in self.counts.items()}


def fit_node_counts(dataset):
    return NodeCountDistribution.fit(dataset.node_counts())
