"""Centre-of-gravity subspace machinery and random Euclidean transforms.

Positions are ``(..., M, n)`` tensors. The flow, the data and the base density
all live on the ``(M - 1) * n`` dimensional subspace of configurations whose
node mean is zero; everything is still represented in ambient coordinates.
"""
import math
from dataclasses import dataclass

import torch

from .numerics import DTYPE

CENTER_TOL = 1e-8
LOG_2PI = math.log(2 * math.pi)


def center(x):
    return x - x.mean(dim=-2, keepdim=True)


def is_centered(x, tol=CENTER_TOL):
    return bool((x.mean(dim=-2).norm(dim=-1) <= tol).all())


@dataclass
class SubspaceProjection:
    M: int
    n: int
    P: torch.Tensor  # ((M-1)n, Mn), orthonormal rows, annihilates translations
    Q: torch.Tensor  # (Mn, Mn), rows of P followed by the n translation directions

    @property
    def translations(self):
        return self.Q[self.P.shape[0]:]


def node_basis(M):
    """Orthonormal ``(M-1, M)`` basis of zero-sum vectors (Helmert rows)."""
    rows = []
    for k in range(1, M):
        r = torch.zeros(M, dtype=DTYPE)
        r[:k] = 1.0
        r[k] = -float(k)
        rows.append(r / math.sqrt(k * (k + 1)))
    return torch.stack(rows) if rows else torch.zeros(0, M, dtype=DTYPE)


def build_projection(M, n):
    """Projection onto subspace coordinates for node-major vectorised positions.

    A configuration ``x`` of shape ``(M, n)`` is vectorised as ``x.reshape(-1)``.
    """
    if M < 2:
        raise ValueError(f"build_projection: M={M} leaves an empty subspace (need M >= 2)")
    eye = torch.eye(n, dtype=DTYPE)
    P = torch.kron(node_basis(M), eye)
    T = torch.kron(torch.full((1, M), 1.0 / math.sqrt(M), dtype=DTYPE), eye)
    return SubspaceProjection(M, n, P, torch.cat([P, T], dim=0))


def subspace_dim(M, n):
    return (M - 1) * n


def base_log_density(z_x, z_h=None):
    """Standard normal on the centred subspace times standard normal features.

    Accepts batched ``z_x`` of shape ``(..., M, n)`` and ``z_h`` of shape
    ``(..., M, nf)``; returns one value per leading index.
    """
    M, n = z_x.shape[-2], z_x.shape[-1]
    offending = z_x.mean(dim=-2).norm(dim=-1) > CENTER_TOL
    if offending.any():
        raise ValueError(
            "base_log_density: positions are not centred "
            f"(max mean norm {z_x.mean(dim=-2).norm(dim=-1).max().item():.3e})")
    log_p = -0.5 * z_x.pow(2).sum(dim=(-2, -1)) - 0.5 * subspace_dim(M, n) * LOG_2PI
    if z_h is not None and z_h.shape[-1] > 0:
        log_p = log_p - 0.5 * z_h.pow(2).sum(dim=(-2, -1)) - 0.5 * M * z_h.shape[-1] * LOG_2PI
    return log_p


def sample_base(M, n, nf, generator, batch=None):
    lead = () if batch is None else (batch,)
    z_x = center(torch.randn(*lead, M, n, generator=generator, dtype=DTYPE))
    z_h = torch.randn(*lead, M, nf, generator=generator, dtype=DTYPE)
    return z_x, z_h


def random_rotation(n, generator):
    """Haar-distributed proper rotation (det +1)."""
    if n == 1:
        return torch.ones(1, 1, dtype=DTYPE)
    A = torch.randn(n, n, generator=generator, dtype=DTYPE)
    Q, R = torch.linalg.qr(A)
    Q = Q * torch.sign(torch.diagonal(R))
    if torch.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_orthogonal(n, generator, reflect=False):
    """Rotation, optionally composed with a reflection of the first axis."""
    R = random_rotation(n, generator)
    if reflect:
        R = R.clone()
        R[:, 0] = -R[:, 0]
    return R


def apply_rotation(x, R):
    """Rotate every node: row-vector convention, ``x_i -> R x_i``."""
    return x @ R.T
