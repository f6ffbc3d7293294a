"""Tensor primitives shared by every other module.

All arithmetic runs on float64 torch tensors; torch's reverse-mode autograd is
the tape. This module adds the MLP building block, seeded initialisation,
Jacobian / vector-Jacobian helpers and the checkpoint container.
"""
import json
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64

ACTIVATIONS = {
    "silu": F.silu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "softplus": F.softplus,
    "identity": lambda x: x,
}


def as_tensor(x):
    return torch.as_tensor(x, dtype=DTYPE)


def make_generator(seed):
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def init_linear_(linear, generator, zero=False):
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    with torch.no_grad():
        if zero:
            linear.weight.zero_()
            if linear.bias is not None:
                linear.bias.zero_()
            return linear
        bound = 1.0 / math.sqrt(max(linear.in_features, 1))
        linear.weight.copy_(
            (torch.rand(linear.weight.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
        if linear.bias is not None:
            linear.bias.copy_(
                (torch.rand(linear.bias.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
    return linear


def linear(in_features, out_features, generator, zero=False, bias=True):
    layer = nn.Linear(in_features, out_features, bias=bias, dtype=DTYPE)
    return init_linear_(layer, generator, zero=zero)


class Mlp(nn.Module):
    """Affine layers, each followed by a tagged activation.

    ``sizes`` lists the widths including input and output, so ``len(sizes) - 1``
    layers are built and ``activations`` needs one tag per layer.
    """

    def __init__(self, sizes, activations, generator, zero_last=False):
        super().__init__()
        if len(activations) != len(sizes) - 1:
            raise ValueError(f"Mlp: {len(sizes) - 1} layers but {len(activations)} activations")
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"Mlp: unknown activation {tag!r}")
        self.sizes = list(sizes)
        self.activations = list(activations)
        n = len(sizes) - 1
        self.layers = nn.ModuleList(
            linear(sizes[i], sizes[i + 1], generator, zero=(zero_last and i == n - 1))
            for i in range(n)
        )

    @property
    def in_features(self):
        return self.sizes[0]

    def forward(self, x):
        return mlp_apply(self, x)


def mlp_apply(mlp, x):
    if x.shape[-1] != mlp.in_features:
        raise ValueError(
            f"mlp_apply: input last dimension {x.shape[-1]} does not match "
            f"first layer width {mlp.in_features}")
    for layer, tag in zip(mlp.layers, mlp.activations):
        x = ACTIVATIONS[tag](layer(x))
    return x


def vjp(outputs, inputs, cotangent, create_graph=False):
    """Vector-Jacobian product ``cotangent^T d(outputs)/d(inputs)``."""
    grads = torch.autograd.grad(
        outputs, inputs, grad_outputs=cotangent, create_graph=create_graph,
        retain_graph=True, allow_unused=True)
    return [torch.zeros_like(i) if g is None else g for g, i in zip(grads, inputs)]


def jacobian(fn, x):
    """Dense Jacobian of ``fn: R^D -> R^K`` at a 1-D point, one backward pass per output."""
    x = x.detach().clone().requires_grad_(True)
    y = fn(x)
    if y.dim() != 1 or x.dim() != 1:
        raise ValueError("jacobian expects vector input and vector output")
    rows = []
    for k in range(y.shape[0]):
        (g,) = torch.autograd.grad(y[k], x, retain_graph=True, allow_unused=True)
        rows.append(torch.zeros_like(x) if g is None else g)
    return torch.stack(rows)


def finite_difference_jacobian(fn, x, step=1e-6):
    x = x.detach().clone()
    cols = []
    for i in range(x.shape[0]):
        e = torch.zeros_like(x)
        e[i] = step
        with torch.no_grad():
            cols.append((fn(x + e) - fn(x - e)) / (2 * step))
    return torch.stack(cols, dim=1)


def save_checkpoint(path, tensors, metadata=None):
    """Write named float64 tensors plus a JSON metadata blob to an ``.npz`` container."""
    arrays = {f"t:{k}": v.detach().cpu().numpy().astype(np.float64) for k, v in tensors.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(metadata or {}).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode()) if "__meta__" in data else {}
        tensors = {k[2:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("t:")}
    return tensors, meta
