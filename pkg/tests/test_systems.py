import math

import numpy as np
import pytest
import torch

from enflows.geometry import random_orthogonal
from enflows.numerics import DTYPE, make_generator
from enflows.systems import (Dataset, Dw4Params, Lj13Params, Record, dataset_read,
                             dataset_write, dw4_energy, energy_function, lj13_energy,
                             mcmc_generate, metropolis_hastings, molecule_dataset_load,
                             molecule_write, quadratic_energy)

DW4 = Dw4Params(0.0, -4.0, 0.9, 4.0, 0.5)
LJ = Lj13Params(1.0, 1.0, 0.5)


def fd_grad(fn, x, step=1e-6):
    g = torch.zeros_like(x)
    flat = g.view(-1)
    for k in range(x.numel()):
        e = torch.zeros_like(x).view(-1)
        e[k] = step
        e = e.view_as(x)
        flat[k] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g


def test_dw4_examples():
    # square with all pairs at d0 is impossible, so use two particles
    x = torch.tensor([[0.0, 0.0], [4.0, 0.0]], dtype=DTYPE)
    assert dw4_energy(x, DW4).item() == 0.0
    x = torch.tensor([[0.0, 0.0], [5.0, 0.0]], dtype=DTYPE)
    assert dw4_energy(x, Dw4Params(1, 1, 1, 4, 0.5)).item() == 3.0
    with pytest.raises(ValueError):
        Dw4Params(1, 1, 1, 4, 0.0)


def test_lj_examples():
    x = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=DTYPE)
    assert lj13_energy(x, LJ).item() == -1.0
    tri = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]], dtype=DTYPE)
    assert abs(lj13_energy(tri, Lj13Params(2.0, 1.0, 0.5)).item() + 6.0) <= 1e-12
    far = torch.tensor([[0.0, 0.0, 0.0], [50.0, 0.0, 0.0]], dtype=DTYPE)
    e = lj13_energy(far, LJ).item()
    assert -1e-8 < e < 0
    with pytest.raises(ValueError, match="closer"):
        lj13_energy(torch.zeros(2, 3, dtype=DTYPE), LJ)
    with pytest.raises(ValueError):
        Lj13Params(1.0, -1.0, 0.5)


@pytest.mark.parametrize("system,params,M,n,scale", [("dw4", DW4, 4, 2, 2.0),
                                                      ("lj13", LJ, 13, 3, 1.5)])
def test_energy_gradients_and_invariance(system, params, M, n, scale, gen):
    fn = energy_function(system, params)
    x = scale * torch.randn(M, n, generator=gen, dtype=DTYPE)
    if system == "lj13":
        x = torch.stack(torch.meshgrid(*[torch.arange(3.0, dtype=DTYPE)] * 3,
                                       indexing="ij"), -1).reshape(-1, 3)[:13] * 1.1
        x = x + 0.05 * torch.randn(13, 3, generator=gen, dtype=DTYPE)
    xg = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(xg), xg)
    fd = fd_grad(fn, x)
    assert ((g - fd).abs().max() / fd.abs().max()) <= 1e-6
    for reflect in (False, True):
        R = random_orthogonal(n, gen, reflect=reflect)
        t = torch.randn(n, generator=gen, dtype=DTYPE)
        assert abs(fn(x @ R.T + t) - fn(x)) <= 1e-10 * max(1.0, abs(fn(x).item()))
    perm = torch.randperm(M, generator=gen)
    assert abs(fn(x[perm]) - fn(x)) <= 1e-10 * max(1.0, abs(fn(x).item()))


def test_lj_oscillator_term(gen):
    x = torch.randn(5, 3, generator=gen, dtype=DTYPE) * 2
    base = lj13_energy(x, LJ)
    with_osc = lj13_energy(x + 7.0, Lj13Params(1.0, 1.0, 0.5, oscillator=2.0))
    expected = base + (x - x.mean(0)).pow(2).sum()
    assert torch.allclose(with_osc, expected, atol=1e-10)


def test_tiny_proposal_keeps_chain_constant(gen):
    x0 = torch.randn(4, 3, 2, generator=gen, dtype=DTYPE)
    propose = lambda x, g: x + 1e-12 * torch.randn(x.shape, generator=g, dtype=DTYPE)
    x, _ = metropolis_hastings(quadratic_energy, x0, propose, 50, gen)
    assert torch.allclose(x, x0, atol=1e-9)


def test_downhill_moves_always_accepted(gen):
    x0 = torch.full((100, 1, 1), 5.0, dtype=DTYPE)
    propose = lambda x, g: x * 0.5
    _, rates = metropolis_hastings(quadratic_energy, x0, propose, 5, gen)
    assert rates == [1.0] * 5


def test_quadratic_target_covariance():
    gen = make_generator(2)
    x0 = torch.randn(2000, 3, 1, generator=gen, dtype=DTYPE)
    samples = []
    propose = lambda x, g: x + 1.0 * torch.randn(x.shape, generator=g, dtype=DTYPE)
    x, _ = metropolis_hastings(quadratic_energy, x0, propose, 300, gen)

    def keep(step, state):
        if (step + 1) % 10 == 0:
            samples.append(state.reshape(-1, 3).clone())

    metropolis_hastings(quadratic_energy, x, propose, 500, gen, keep)
    s = torch.cat(samples)
    assert s.shape[0] == 100_000
    cov = torch.cov(s.T)
    assert (cov - torch.eye(3, dtype=DTYPE)).abs().max() <= 0.03


def test_three_state_detailed_balance():
    gen = make_generator(9)
    target = torch.tensor([0.2, 0.5, 0.3], dtype=DTYPE)
    energy = lambda s: -torch.log(target[s.long().reshape(s.shape[0])])

    def propose(s, g):
        step = torch.where(torch.rand(s.shape, generator=g) < 0.5, -1.0, 1.0).to(DTYPE)
        return torch.remainder(s + step, 3)  # symmetric random walk on a ring

    counts = torch.zeros(3, dtype=DTYPE)

    def tally(step, s):
        counts.add_(torch.bincount(s.long().reshape(-1), minlength=3).to(DTYPE))

    x0 = torch.zeros(1000, 1, 1, dtype=DTYPE)
    x, _ = metropolis_hastings(energy, x0, propose, 100, gen)
    metropolis_hastings(energy, x, propose, 1000, gen, tally)
    freq = counts / counts.sum()
    assert (freq - target).abs().max() <= 0.01


def test_mcmc_generate_centres_and_reports():
    gen = make_generator(0)
    ds = mcmc_generate(energy_function("dw4", DW4), 4, 2, 50, 10, 100, 5, 0.2, gen,
                       init_scale=2.0, system="dw4")
    assert len(ds) == 50 and ds.positions().shape == (50, 4, 2)
    assert np.abs(ds.positions().mean(1)).max() <= 1e-12
    assert 0.05 <= ds.metadata["acceptance_rate"] <= 0.95
    bad = mcmc_generate(quadratic_energy, 3, 2, 10, 5, 10, 1, 50.0, make_generator(0))
    assert "warning" in bad.metadata
    with pytest.raises(ValueError):
        mcmc_generate(quadratic_energy, 3, 2, 10, 5, 10, 1, 0.0, gen)


def test_dataset_round_trip(tmp_path, gen):
    recs = [Record(torch.randn(4, 2, generator=gen, dtype=DTYPE).numpy() * 1e-7 + math.pi)
            for _ in range(10_000)]
    ds = Dataset(recs, 2, split="test", system="dw4", metadata={"seed": 3})
    dataset_write(ds, tmp_path / "d.txt")
    back = dataset_read(tmp_path / "d.txt")
    assert back.checksum() == ds.checksum()
    assert back.metadata == {"seed": 3} and back.split == "test" and back.system == "dw4"


def test_dataset_round_trip_with_features_and_empty(tmp_path):
    recs = [Record(np.random.default_rng(k).normal(size=(k + 1, 3)),
                   np.arange(k + 1).reshape(-1, 1), (np.arange(k + 1) % 5).reshape(-1, 1))
            for k in range(4)]
    ds = Dataset(recs, 3, 1, (5,), system="molecule")
    dataset_write(ds, tmp_path / "m.txt")
    back = dataset_read(tmp_path / "m.txt")
    assert back.checksum() == ds.checksum() and back.node_counts() == [1, 2, 3, 4]
    dataset_write(Dataset([], 2), tmp_path / "e.txt")
    assert len(dataset_read(tmp_path / "e.txt")) == 0


def test_dataset_read_errors(tmp_path):
    ds = Dataset([Record(np.zeros((2, 2)))], 2)
    dataset_write(ds, tmp_path / "d.txt")
    lines = (tmp_path / "d.txt").read_text().splitlines()
    lines[-1] = "0.0"
    (tmp_path / "bad.txt").write_text("\n".join(lines))
    with pytest.raises(ValueError, match="line 12"):
        dataset_read(tmp_path / "bad.txt")
    (tmp_path / "bad2.txt").write_text("format: other 1\n---\n")
    with pytest.raises(ValueError, match="line 1"):
        dataset_read(tmp_path / "bad2.txt")


WATER = """O 0.0 0.0 0.117 0
H 0.0 0.757 -0.469 0
H 0.0 -0.757 -0.469 0

F 1.0 2.0 3.0 -1
"""


def test_molecule_loader(tmp_path):
    (tmp_path / "w.txt").write_text(WATER)
    ds = molecule_dataset_load(tmp_path / "w.txt")
    assert ds.node_counts() == [3, 1]
    water = ds.records[0]
    assert water.h_cat[:, 0].tolist() == [3, 0, 0] and water.h_ord[:, 0].tolist() == [0, 0, 0]
    assert np.allclose(water.x.mean(0), 0)
    assert np.allclose(water.x[1] - water.x[2], [0, 1.514, 0])
    assert ds.records[1].h_ord[0, 0] == -1 and np.allclose(ds.records[1].x, 0)
    molecule_write(tmp_path / "w2.txt", [r.x for r in ds.records],
                   [r.h_cat[:, 0] for r in ds.records], [r.h_ord[:, 0] for r in ds.records])
    again = molecule_dataset_load(tmp_path / "w2.txt")
    for a, b in zip(again.records, ds.records):
        assert np.allclose(a.x, b.x, atol=1e-15)
        assert (a.h_cat == b.h_cat).all() and (a.h_ord == b.h_ord).all()
    dataset_write(ds, tmp_path / "w3.txt")
    assert dataset_read(tmp_path / "w3.txt").checksum() == ds.checksum()


def test_molecule_loader_unknown_symbol(tmp_path):
    (tmp_path / "x.txt").write_text("Cl 0 0 0 0\n")
    with pytest.raises(ValueError, match="'Cl'"):
        molecule_dataset_load(tmp_path / "x.txt")
