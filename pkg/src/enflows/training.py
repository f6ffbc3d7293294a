"""Optimisation loop: Adam, node-count batching, validation-driven checkpointing."""
import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .cnf import TraceEstimator
from .geometry import random_rotation
from .model import load_model, save_model, stack_records
from .numerics import make_generator

LOG_FIELDS = ("epoch", "train_nll", "val_nll", "grad_norm", "skipped_steps", "wall_time")
PRESETS = ("dw4", "lj13", "qm9-positional", "molecule")
DEFAULT_LR = {"dw4": 5e-4, "lj13": 5e-4, "qm9-positional": 5e-4, "molecule": 2e-4}


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 100
    epochs: int = 10
    steps: int = 20
    trace: str = "hutchinson"
    probes: int = 1
    seed: int = 0
    preset: str = "dw4"
    weight_decay: float = 1e-12
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 100.0
    micro_batch: int = 0  # 0: whole batch in one pass
    val_every: int = 1
    val_trace: str = "hutchinson"
    val_steps: int = 0  # 0: same as steps
    augment_rotations: bool = False

    def __post_init__(self):
        for name in ("lr", "batch_size", "steps", "probes", "clip_norm", "val_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        for name in ("epochs", "weight_decay", "micro_batch", "val_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig.{name} must be non-negative")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        TraceEstimator(self.trace, self.probes)
        TraceEstimator(self.val_trace)


@dataclass
class Batch:
    x: torch.Tensor
    h_ord: torch.Tensor
    h_cat: torch.Tensor
    indices: list


def iterate_batches(dataset, batch_size, generator=None):
    """Yield batches whose records share a node count.

    With a generator, record order within each node count and the order of
    the resulting batches are shuffled; without one the order is fixed.
    """
    groups = {}
    for i, r in enumerate(dataset.records):
        groups.setdefault(r.M, []).append(i)
    chunks = []
    for m in sorted(groups):
        idx = groups[m]
        if generator is not None:
            idx = [idx[k] for k in torch.randperm(len(idx), generator=generator).tolist()]
        chunks.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    if generator is not None:
        chunks = [chunks[k] for k in torch.randperm(len(chunks), generator=generator).tolist()]
    for idx in chunks:
        x, h_ord, h_cat = stack_records([dataset.records[i] for i in idx])
        yield Batch(x, h_ord, h_cat, idx)


def make_optimizer(params, config):
    # torch's weight_decay adds lambda * theta to the gradient before the moment updates
    return torch.optim.Adam(params, lr=config.lr, betas=tuple(config.betas), eps=config.eps,
                            weight_decay=config.weight_decay)


def adam_step(optimizer, params, grads):
    """Apply one Adam update with ``grads``; returns False (and skips) if any is non-finite."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("adam_step: parameter and gradient counts differ")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
    if any(g is not None and not torch.isfinite(g).all() for g in grads):
        return False
    for p, g in zip(params, grads):
        p.grad = None if g is None else g.detach().clone()
    optimizer.step()
    return True


def optimizer_state(optimizer):
    """Snapshot of Adam's moments and step counts, keyed by parameter position."""
    group = optimizer.param_groups[0]
    out = {"lr": group["lr"], "betas": group["betas"], "eps": group["eps"],
           "weight_decay": group["weight_decay"], "params": []}
    for p in group["params"]:
        s = optimizer.state.get(p, {})
        out["params"].append({"step": int(s["step"]) if "step" in s else 0,
                              "exp_avg": s.get("exp_avg"), "exp_avg_sq": s.get("exp_avg_sq")})
    return out


def batch_objective(model, batch, estimator, generator, steps, micro_batch=0, backward=True):
    """Mean negative bound over the batch; gradients accumulate when ``backward``."""
    B = batch.x.shape[0]
    size = micro_batch or B
    total = 0.0
    for s in range(0, B, size):
        sl = slice(s, s + size)
        h_ord = None if batch.h_ord is None else batch.h_ord[sl]
        h_cat = None if batch.h_cat is None else batch.h_cat[sl]
        log_p = model.log_prob(batch.x[sl], h_ord, h_cat, estimator, generator, steps,
                               differentiable=backward)
        loss = -log_p.sum() / B
        if not torch.isfinite(loss):
            return math.nan
        if backward:
            loss.backward()
        total += float(loss.detach())
    return total


def mean_nll(model, dataset, estimator, seed, steps, batch_size=100):
    gen = make_generator(seed)
    total = 0.0
    for batch in iterate_batches(dataset, batch_size):
        log_p = model.log_prob(batch.x, batch.h_ord, batch.h_cat, estimator, gen, steps)
        total += float(-log_p.sum())
    return total / len(dataset)


def _rotate(batch, generator):
    n = batch.x.shape[-1]
    R = torch.stack([random_rotation(n, generator) for _ in range(batch.x.shape[0])])
    x = torch.einsum("bij,bmj->bmi", R, batch.x)
    return Batch(x, batch.h_ord, batch.h_cat, batch.indices)


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    halted: str = ""


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train(config, dataset, model, val=None, out_dir=None, progress=None):
    """Maximise the per-batch mean bound; keep the best-validation weights.

    Checkpoints ``best.npz`` and ``last.npz`` plus ``train_log.csv`` go to
    ``out_dir`` when given. On a non-finite loss training halts and the
    best checkpoint so far is restored.
    """
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    torch.manual_seed(config.seed)
    gen = make_generator(config.seed)
    val_gen_seed = config.seed + 7919
    estimator = TraceEstimator(config.trace, config.probes)
    val_estimator = TraceEstimator(config.val_trace)
    val_steps = config.val_steps or config.steps
    params = [p for p in model.parameters() if p.requires_grad]
    opt = make_optimizer(params, config)
    augment = config.augment_rotations or model.variant == "gnf-att-aug"
    result = TrainResult(model)
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    start = time.perf_counter()
    extra = {"config": {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in asdict(config).items()}}

    for epoch in range(1, config.epochs + 1):
        losses, norms, skipped = [], [], 0
        for batch in iterate_batches(dataset, config.batch_size, gen):
            if augment:
                batch = _rotate(batch, gen)
            opt.zero_grad(set_to_none=True)
            loss = batch_objective(model, batch, estimator, gen, config.steps, config.micro_batch)
            if not math.isfinite(loss):
                result.halted = f"non-finite training NLL at epoch {epoch}"
                break
            grads = [p.grad for p in params]
            norm = float(torch.nn.utils.clip_grad_norm_(params, config.clip_norm))
            if not adam_step(opt, params, grads):
                skipped += 1
            losses.append(loss * len(batch.indices))
            norms.append(norm)
        if result.halted:
            break
        train_nll = float(sum(losses) / len(dataset))
        val_nll = ""
        if val is not None and len(val) and epoch % config.val_every == 0:
            val_nll = mean_nll(model, val, val_estimator, val_gen_seed, val_steps,
                               config.batch_size)
            if not math.isfinite(val_nll):
                result.halted = f"non-finite validation NLL at epoch {epoch}"
                break
            if val_nll < result.best_val:
                result.best_val, result.best_epoch = val_nll, epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if out_dir:
                    save_model(model, os.path.join(out_dir, "best.npz"),
                               dict(extra, epoch=epoch, val_nll=val_nll))
        row = {"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll,
               "grad_norm": float(np.mean(norms)) if norms else 0.0,
               "skipped_steps": skipped, "wall_time": time.perf_counter() - start}
        result.log.append(row)
        if progress:
            progress(row)
        if out_dir:
            save_model(model, os.path.join(out_dir, "last.npz"), dict(extra, epoch=epoch))
            write_log(result.log, os.path.join(out_dir, "train_log.csv"))

    if val is None or not len(val):
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        result.best_epoch = len(result.log)
        if out_dir:
            save_model(model, os.path.join(out_dir, "best.npz"),
                       dict(extra, epoch=result.best_epoch))
    model.load_state_dict(best_state)
    if out_dir:
        write_log(result.log, os.path.join(out_dir, "train_log.csv"))
    return result


def load_best(out_dir):
    return load_model(os.path.join(out_dir, "best.npz"))

