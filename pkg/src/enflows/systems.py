"""Ground-truth particle systems, Metropolis-Hastings sampling and dataset files.

Energies take positions of shape ``(..., M, n)`` and return ``(...)``. Pair sums
run over unordered pairs ``i < j``.
"""
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import center
from .numerics import DTYPE

FORMAT_TAG = "enflows-dataset"
FORMAT_VERSION = 1

ATOM_TYPES = ("H", "C", "N", "O", "F")
ATOM_INDEX = {s: i for i, s in enumerate(ATOM_TYPES)}
PLACEHOLDER_SYMBOL = "X"


@dataclass(frozen=True)
class Dw4Params:
    a: float
    b: float
    c: float
    d0: float
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("Dw4Params: tau must be positive")


@dataclass(frozen=True)
class Lj13Params:
    eps: float
    r_m: float
    tau: float
    oscillator: float = 0.0  # harmonic confinement 0.5*k*|x - mean|^2; 0 disables it

    def __post_init__(self):
        if not (self.eps > 0 and self.r_m > 0 and self.tau > 0):
            raise ValueError("Lj13Params: eps, r_m and tau must be positive")


def pair_distances(x):
    M = x.shape[-2]
    i, j = torch.triu_indices(M, M, offset=1)
    return (x[..., i, :] - x[..., j, :]).norm(dim=-1)


def dw4_energy(x, params):
    x = torch.as_tensor(x, dtype=DTYPE)
    r = pair_distances(x) - params.d0
    u = params.a * r + params.b * r ** 2 + params.c * r ** 4
    return u.sum(-1) / (2 * params.tau)


def lj13_energy(x, params):
    x = torch.as_tensor(x, dtype=DTYPE)
    d = pair_distances(x)
    if d.numel() and d.min() < 1e-9:
        raise ValueError(f"lj13_energy: particles closer than 1e-9 (min distance {d.min():.3e})")
    s6 = (params.r_m / d) ** 6
    u = params.eps / (2 * params.tau) * (s6 ** 2 - 2 * s6).sum(-1)
    if params.oscillator:
        u = u + 0.5 * params.oscillator * center(x).pow(2).sum(dim=(-2, -1))
    return u


def quadratic_energy(x):
    return 0.5 * torch.as_tensor(x, dtype=DTYPE).pow(2).sum(dim=(-2, -1))


def energy_function(system, params):
    if system == "dw4":
        return lambda x: dw4_energy(x, params)
    if system == "lj13":
        return lambda x: lj13_energy(x, params)
    if system == "quadratic":
        return quadratic_energy
    raise ValueError(f"unknown system {system!r}")


def metropolis_hastings(energy, x0, propose, steps, generator, callback=None):
    """Vectorised MH over independent chains (leading dim of ``x0``).

    ``propose(x, generator)`` must be symmetric. Accepts with probability
    ``min(1, exp(u(x) - u(x')))``. ``callback(step, x)`` sees the state after
    every step. Returns the final state and the per-step acceptance rates.
    """
    x = x0.clone()
    u = energy(x)
    rates = []
    for step in range(steps):
        proposal = propose(x, generator)
        u_new = energy(proposal)
        log_u = torch.log(torch.rand(u.shape, generator=generator, dtype=DTYPE))
        accept = log_u < (u - u_new)
        shape = accept.shape + (1,) * (x.dim() - accept.dim())
        x = torch.where(accept.reshape(shape), proposal, x)
        u = torch.where(accept, u_new, u)
        rates.append(accept.to(DTYPE).mean().item())
        if callback is not None:
            callback(step, x)
    return x, rates


@dataclass
class Record:
    x: np.ndarray  # (M, n)
    h_ord: np.ndarray = None  # (M, n_ord) int
    h_cat: np.ndarray = None  # (M, n_cat) int

    @property
    def M(self):
        return self.x.shape[0]


@dataclass
class Dataset:
    records: list
    n: int
    n_ord: int = 0
    cat_classes: tuple = ()
    split: str = "train"
    system: str = "unknown"
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def positions(self):
        """Stack positions when every record has the same node count."""
        return np.stack([r.x for r in self.records])

    def node_counts(self):
        return [r.M for r in self.records]

    def checksum(self):
        digest = hashlib.sha256()
        for r in self.records:
            for a in (r.x, r.h_ord, r.h_cat):
                if a is not None:
                    digest.update(np.ascontiguousarray(a).tobytes())
        return digest.hexdigest()

    def subset(self, indices, split=None):
        return Dataset([self.records[i] for i in indices], self.n, self.n_ord,
                       tuple(self.cat_classes), split or self.split, self.system,
                       dict(self.metadata))


def mcmc_generate(energy, M, n, n_samples, chains, burn_in, thinning, proposal_std, generator,
                  x0=None, init_scale=1.0, system="unknown", split="train", metadata=None):
    """Sample ``n_samples`` centred configurations with Gaussian-proposal MH.

    Samples are collected from all chains after ``burn_in`` steps, every
    ``thinning`` steps, until ``n_samples`` records exist.
    """
    if not proposal_std > 0:
        raise ValueError("mcmc_generate: proposal_std must be positive")
    if burn_in < 0 or thinning < 1 or chains < 1:
        raise ValueError("mcmc_generate: need burn_in >= 0, thinning >= 1, chains >= 1")
    if x0 is None:
        x0 = init_scale * torch.randn(chains, M, n, generator=generator, dtype=DTYPE)

    def propose(x, gen):
        return x + proposal_std * torch.randn(x.shape, generator=gen, dtype=DTYPE)

    x, burn_rates = metropolis_hastings(energy, x0, propose, burn_in, generator)
    per_chain = math.ceil(n_samples / chains)
    collected = []

    def keep(step, state):
        if (step + 1) % thinning == 0:
            collected.append(center(state).clone())

    _, rates = metropolis_hastings(energy, x, propose, per_chain * thinning, generator, keep)
    samples = torch.stack(collected, dim=1).reshape(-1, M, n)[:n_samples]
    acceptance = float(np.mean(rates)) if rates else float("nan")
    meta = dict(metadata or {})
    meta.update(acceptance_rate=acceptance, chains=chains, burn_in=burn_in, thinning=thinning,
                proposal_std=proposal_std)
    if not 0.05 <= acceptance <= 0.95:
        meta["warning"] = f"acceptance rate {acceptance:.3f} outside [0.05, 0.95]"
    records = [Record(s.numpy()) for s in samples]
    return Dataset(records, n, split=split, system=system, metadata=meta)


def _fmt(v):
    return repr(float(v))


def dataset_write(dataset, path):
    lines = [
        f"format: {FORMAT_TAG} {FORMAT_VERSION}",
        f"system: {dataset.system}",
        f"split: {dataset.split}",
        f"n: {dataset.n}",
        f"n_ord: {dataset.n_ord}",
        f"cat_classes: {' '.join(str(k) for k in dataset.cat_classes)}",
        f"metadata: {json.dumps(dataset.metadata, sort_keys=True)}",
        f"records: {len(dataset)}",
        "---",
    ]
    n_cat = len(dataset.cat_classes)
    for r in dataset.records:
        lines.append(f"record {r.M}")
        for i in range(r.M):
            fields = [_fmt(v) for v in r.x[i]]
            if dataset.n_ord:
                fields += [str(int(v)) for v in r.h_ord[i]]
            if n_cat:
                fields += [str(int(v)) for v in r.h_cat[i]]
            lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def dataset_read(path):
    with open(path) as fh:
        lines = fh.read().splitlines()

    def fail(lineno, msg):
        raise ValueError(f"{path}: line {lineno + 1}: {msg}")

    header = {}
    pos = 0
    while pos < len(lines) and lines[pos] != "---":
        key, sep, value = lines[pos].partition(":")
        if not sep:
            fail(pos, f"malformed header line {lines[pos]!r}")
        header[key.strip()] = value.strip()
        pos += 1
    if pos == len(lines):
        fail(pos - 1, "missing '---' header terminator")
    try:
        tag, version = header["format"].split()
        if tag != FORMAT_TAG or int(version) != FORMAT_VERSION:
            fail(0, f"unsupported format {header['format']!r}")
        n, n_ord = int(header["n"]), int(header["n_ord"])
        cat_classes = tuple(int(k) for k in header.get("cat_classes", "").split())
        expected = int(header["records"])
        metadata = json.loads(header.get("metadata", "{}"))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ValueError) and str(exc).startswith(str(path)):
            raise
        fail(0, f"bad header: {exc}")
    width = n + n_ord + len(cat_classes)
    records = []
    pos += 1
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0] != "record":
            fail(pos, f"expected 'record <M>' for record {len(records)}")
        M = int(parts[1])
        rows = []
        for k in range(M):
            lineno = pos + 1 + k
            if lineno >= len(lines):
                fail(lineno, f"record {len(records)} truncated")
            fields = lines[lineno].split()
            if len(fields) != width:
                fail(lineno, f"record {len(records)}: expected {width} fields, got {len(fields)}")
            rows.append(fields)
        x = np.array([[float(v) for v in r[:n]] for r in rows], dtype=np.float64).reshape(M, n)
        h_ord = (np.array([[int(v) for v in r[n:n + n_ord]] for r in rows], dtype=np.int64)
                 if n_ord else None)
        h_cat = (np.array([[int(v) for v in r[n + n_ord:]] for r in rows], dtype=np.int64)
                 if cat_classes else None)
        records.append(Record(x, h_ord, h_cat))
        pos += 1 + M
    if len(records) != expected:
        fail(len(lines) - 1, f"header declares {expected} records, found {len(records)}")
    return Dataset(records, n, n_ord, cat_classes, header.get("split", "train"),
                   header.get("system", "unknown"), metadata)


def molecule_dataset_load(path, center_positions=True):
    """Read per-atom lines ``SYMBOL x y z charge``; blank lines separate molecules."""
    molecules, current = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                if current:
                    molecules.append(current)
                    current = []
                continue
            fields = line.split()
            if len(fields) < 3:
                raise ValueError(f"{path}: line {lineno}: expected 'SYMBOL coords... charge'")
            symbol = fields[0]
            if symbol not in ATOM_INDEX:
                raise ValueError(f"{path}: line {lineno}: unknown atom symbol {symbol!r}")
            coords = [float(v) for v in fields[1:-1]]
            current.append((ATOM_INDEX[symbol], coords, int(fields[-1]), lineno))
    if current:
        molecules.append(current)
    if not molecules:
        raise ValueError(f"{path}: no molecules found")
    n = len(molecules[0][0][1])
    records = []
    for mol in molecules:
        for _, coords, _, lineno in mol:
            if len(coords) != n:
                raise ValueError(f"{path}: line {lineno}: expected {n} coordinates")
        x = np.array([a[1] for a in mol], dtype=np.float64)
        if center_positions:
            x = x - x.mean(axis=0)
        records.append(Record(x, np.array([[a[2]] for a in mol], dtype=np.int64),
                              np.array([[a[0]] for a in mol], dtype=np.int64)))
    return Dataset(records, n, 1, (len(ATOM_TYPES),), system="molecule",
                   metadata={"source": str(path)})


def molecule_write(path, positions, types=None, charges=None):
    """Write molecules in the loader's format. ``types`` index ATOM_TYPES; None writes 'X'."""
    blocks = []
    for k, x in enumerate(positions):
        lines = []
        for i, row in enumerate(np.asarray(x)):
            symbol = ATOM_TYPES[int(types[k][i])] if types is not None else PLACEHOLDER_SYMBOL
            charge = int(charges[k][i]) if charges is not None else 0
            lines.append(" ".join([symbol] + [_fmt(v) for v in row] + [str(charge)]))
        blocks.append("\n".join(lines))
    with open(path, "w") as fh:
        fh.write("\n\n".join(blocks) + "\n")
