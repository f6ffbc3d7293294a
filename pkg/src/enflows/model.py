"""Full generative model: node-count prior, feature lifting and the continuous flow."""
import numpy as np
import torch
import torch.nn as nn

from .cnf import Flow, TraceEstimator, build_dynamics
from .lifting import FeatureLayout, Lifter, NodeCountDistribution, discretize, vi_objective
from .numerics import DTYPE, load_checkpoint, make_generator, save_checkpoint
from .systems import Record

MODEL_KEYS = ("variant", "n", "n_ord", "cat_classes", "hidden", "n_layers", "edge_mode", "C",
              "lifter_hidden", "lifter_layers", "steps", "seed")


class GenerativeModel(nn.Module):
    """``log p(x, h, M) >= log p_M(M) + log p(x, lift(h)) - log q(lift(h) | h)``."""

    def __init__(self, flow, layout, lifter=None, node_counts=None, variant="enf", arch=None):
        super().__init__()
        self.flow = flow
        self.layout = layout
        self.lifter = lifter
        self.node_counts = node_counts
        self.variant = variant
        self.arch = dict(arch or {})

    @property
    def n(self):
        return self.flow.n

    def _discrete(self, x, h_ord, h_cat):
        lead = x.shape[:-1]
        if h_ord is None:
            h_ord = torch.zeros(*lead, 0, dtype=torch.long)
        if h_cat is None:
            h_cat = torch.zeros(*lead, 0, dtype=torch.long)
        return torch.as_tensor(h_ord), torch.as_tensor(h_cat)

    def log_prob(self, x, h_ord=None, h_cat=None, estimator=None, generator=None, steps=None,
                 differentiable=False):
        """Per-row lower bound on the log-likelihood of a batch with equal node counts."""
        x = torch.as_tensor(x, dtype=DTYPE)
        h_ord, h_cat = self._discrete(x, h_ord, h_cat)
        zero = torch.zeros(x.shape[:-2], dtype=DTYPE)
        if self.lifter is not None and self.layout.width:
            with torch.set_grad_enabled(differentiable):
                lifted = self.lifter(x, h_ord, h_cat, generator)
            h_cont, lq_ord, lq_cat = lifted.h_cont, lifted.log_q_ord, lifted.log_q_cat
            if not differentiable:
                h_cont, lq_ord, lq_cat = h_cont.detach(), lq_ord.detach(), lq_cat.detach()
        else:
            h_cont, lq_ord, lq_cat = x[..., :0], zero, zero
        log_p, _, _ = self.flow.log_likelihood(x, h_cont, estimator, generator, steps,
                                               differentiable=differentiable)
        bound = vi_objective(log_p, lq_ord, lq_cat)
        if self.node_counts is not None:
            bound = bound + self.node_counts.log_prob(x.shape[-2])
        return bound

    def forward(self, x, h_ord=None, h_cat=None, estimator=None, generator=None, steps=None):
        return self.log_prob(x, h_ord, h_cat, estimator, generator, steps, differentiable=True)

    def sample(self, num, generator, steps=None, M=None):
        """Draw ``num`` records; node counts come from ``p_M`` unless ``M`` is fixed."""
        if M is not None:
            sizes = [int(M)] * num
        elif self.node_counts is not None:
            sizes = self.node_counts.sample(generator, num)
        else:
            raise ValueError("sample: model has no node-count distribution; pass M")
        records = [None] * num
        by_size = {}
        for i, m in enumerate(sizes):
            by_size.setdefault(m, []).append(i)
        for m in sorted(by_size):
            idx = by_size[m]
            with torch.no_grad():
                x, h = self.flow.sample(m, generator, batch=len(idx), steps=steps)
            d = discretize(h, self.layout)
            for k, i in enumerate(idx):
                records[i] = Record(x[k].numpy().copy(),
                                    d.h_ord[k].numpy() if self.layout.n_ord else None,
                                    d.h_cat[k].numpy() if self.layout.cat_classes else None)
        return records


def build_model(variant="enf", n=3, n_ord=0, cat_classes=(), hidden=32, n_layers=3,
                edge_mode="inferred", C=1.0, lifter_hidden=32, lifter_layers=2, steps=20,
                seed=0, node_counts=None):
    """Construct a model with deterministic initialisation from ``seed``."""
    gen = make_generator(seed)
    layout = FeatureLayout(int(n_ord), tuple(int(k) for k in cat_classes))
    dynamics = build_dynamics(variant, n, layout.width, hidden, n_layers, gen,
                              edge_mode=edge_mode, C=C)
    lifter = None
    if layout.width:
        lifter = Lifter(layout, lifter_hidden, lifter_layers, gen)
    arch = dict(variant=variant, n=n, n_ord=layout.n_ord, cat_classes=list(layout.cat_classes),
                hidden=hidden, n_layers=n_layers, edge_mode=edge_mode, C=C,
                lifter_hidden=lifter_hidden, lifter_layers=lifter_layers, steps=steps, seed=seed)
    model = GenerativeModel(Flow(dynamics, steps), layout, lifter, node_counts, variant, arch)
    return model.to(DTYPE)


def save_model(model, path, extra=None):
    meta = {"model": model.arch, "extra": extra or {}}
    if model.node_counts is not None:
        meta["node_counts"] = model.node_counts.to_dict()
    save_checkpoint(path, dict(model.state_dict()), meta)


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, extra_metadata)``."""
    tensors, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ValueError(f"{path}: checkpoint has no model description")
    arch = meta["model"]
    counts = meta.get("node_counts")
    node_counts = NodeCountDistribution({int(k): v for k, v in counts.items()}) if counts else None
    model = build_model(**{k: arch[k] for k in MODEL_KEYS if k in arch}, node_counts=node_counts)
    model.load_state_dict(tensors)
    return model, meta.get("extra", {})


def default_estimator(mode="hutchinson", probes=1):
    return TraceEstimator(mode, probes)


def stack_records(records):
    """Batch tensors ``(x, h_ord, h_cat)`` for records sharing one node count."""
    x = torch.as_tensor(np.stack([r.x for r in records]), dtype=DTYPE)
    h_ord = h_cat = None
    if records[0].h_ord is not None:
        h_ord = torch.as_tensor(np.stack([r.h_ord for r in records]), dtype=torch.long)
    if records[0].h_cat is not None:
        h_cat = torch.as_tensor(np.stack([r.h_cat for r in records]), dtype=torch.long)
    return x, h_ord, h_cat
