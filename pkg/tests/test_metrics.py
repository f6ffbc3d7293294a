import math

import numpy as np
import pytest
import torch

from enflows.cnf import TraceEstimator
from enflows.geometry import random_orthogonal
from enflows.metrics import (PUBLISHED_REFERENCE, BondTable, distance_histogram,
                             gaussian_subspace_nll, js_divergence, pairwise_distances,
                             read_report, stability, write_report, evaluate)
from enflows.model import build_model
from enflows.numerics import DTYPE, make_generator
from enflows.systems import Dataset, Record


def test_single_pair_histogram():
    x = np.array([[0.0, 0.0], [1.5, 0.0]])
    hist = distance_histogram([x], bins=4, d_max=2.0)
    assert hist.mass.tolist() == [0, 0, 0, 1.0]
    assert np.allclose(hist.edges, [0, 0.5, 1, 1.5, 2])
    far = distance_histogram([np.array([[0.0], [9.0]])], bins=3, d_max=2.0)
    assert far.mass.tolist() == [0, 0, 1.0]


def test_histogram_matches_independent_oracle():
    rng = np.random.default_rng(0)
    samples = [rng.normal(size=(5, 3)) for _ in range(50)]
    hist = distance_histogram(samples, bins=20, d_max=4.0)
    d = [math.dist(s[i], s[j]) for s in samples for i in range(5) for j in range(i + 1, 5)]
    counts, _ = np.histogram(np.minimum(d, 4.0 - 1e-12), bins=20, range=(0, 4.0))
    assert np.allclose(hist.mass, counts / counts.sum())
    assert abs(hist.mass.sum() - 1) <= 1e-12
    assert len(pairwise_distances(samples[0])) == 10


def test_histogram_rotation_invariant(gen):
    rng = np.random.default_rng(1)
    samples = [rng.normal(size=(6, 3)) for _ in range(20)]
    R = random_orthogonal(3, gen, reflect=True).numpy()
    rotated = [s @ R.T + 3.0 for s in samples]
    a = distance_histogram(samples, bins=30, d_max=5.0)
    b = distance_histogram(rotated, bins=30, d_max=5.0)
    assert np.array_equal(a.mass, b.mass)


def test_histogram_errors():
    with pytest.raises(ValueError):
        distance_histogram([], bins=3)
    with pytest.raises(ValueError):
        distance_histogram([np.zeros((2, 2))], bins=0)


def test_js_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert js_divergence(p, p) == 0.0
    assert abs(js_divergence([1.0, 0.0], [0.0, 1.0]) - math.log(2)) <= 1e-15
    q = np.array([0.6, 0.1, 0.3])
    assert js_divergence(p, q) == pytest.approx(js_divergence(q, p), abs=1e-15)
    m = (p + q) / 2
    direct = 0.5 * sum(p * np.log(p / m)) + 0.5 * sum(q * np.log(q / m))
    assert abs(js_divergence(p, q) - direct) <= 1e-12
    with pytest.raises(ValueError, match="binning"):
        js_divergence(p, [0.5, 0.5])
    a = distance_histogram([np.eye(2)], bins=3, d_max=2.0)
    b = distance_histogram([np.eye(2)], bins=3, d_max=3.0)
    with pytest.raises(ValueError, match="binning"):
        js_divergence(a, b)


def tetrahedral_methane(bond=1.09):
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)
    return np.vstack([np.zeros(3), bond * v]), ["C", "H", "H", "H", "H"]


def test_stability_examples(gen):
    atoms, mol, bonds = stability(np.array([[0, 0, 0], [0.74, 0, 0]]), ["H", "H"])
    assert mol and atoms.tolist() == [True, True] and bonds == [(0, 1, 1)]
    atoms, mol, _ = stability(np.zeros((1, 3)), [0])
    assert not mol and atoms.tolist() == [False]
    x, types = tetrahedral_methane()
    atoms, mol, bonds = stability(x, types)
    assert mol and len(bonds) == 4
    R = random_orthogonal(3, gen, reflect=True).numpy()
    assert stability(x @ R.T + 5, types)[1]
    stretched = x.copy()
    stretched[1] *= 1.5
    atoms, mol, _ = stability(stretched, types)
    assert not mol and atoms.sum() == 3
    with pytest.raises(ValueError, match="'Xe'"):
        stability(x, ["Xe", "H", "H", "H", "H"])


def test_double_bond_classification():
    table = BondTable.load()
    # ethylene-like CO distance inside the double margin
    assert table.bond_order("C", "O", 120.0) == 2
    assert table.bond_order("O", "C", 140.0) == 1
    assert table.bond_order("H", "H", 200.0) == 0


def test_bond_table_file_errors(tmp_path):
    (tmp_path / "t.txt").write_text("C C 1 154\nC C 2 160\n")
    with pytest.raises(ValueError, match="shrink"):
        BondTable.load(tmp_path / "t.txt")
    (tmp_path / "u.txt").write_text("C C 1\n")
    with pytest.raises(ValueError, match="line 1"):
        BondTable.load(tmp_path / "u.txt")


def _gaussian_dataset(n_records=40, M=4, n=2, seed=0):
    rng = np.random.default_rng(seed)
    recs = [Record(x - x.mean(0)) for x in rng.normal(size=(n_records, M, n))]
    return Dataset(recs, n, split="test", system="dw4")


def test_evaluate_zero_dynamics_matches_gaussian():
    ds = _gaussian_dataset()
    model = build_model("zero", n=2, steps=5)
    report = evaluate(model, ds, TraceEstimator("exact"), passes=2, seed=3, steps=5)
    x = np.stack([r.x for r in ds.records])
    dims = (4 - 1) * 2
    oracle = np.mean(0.5 * (x ** 2).sum((1, 2)) + 0.5 * dims * math.log(2 * math.pi))
    assert abs(float(report["summary"]["nll_mean"]) - oracle) <= 1e-10
    helper = gaussian_subspace_nll(torch.as_tensor(x)).mean().item()
    assert abs(helper - oracle) <= 1e-10


def test_evaluate_is_deterministic_and_stores_reference():
    ds = _gaussian_dataset(12)
    model = build_model("enf", n=2, hidden=8, n_layers=1, steps=4, seed=5)
    a = evaluate(model, ds, TraceEstimator("hutchinson"), 2, 0, 4, n_samples=5, reference=ds,
                 bins=10)
    b = evaluate(model, ds, TraceEstimator("hutchinson"), 2, 0, 4, n_samples=5, reference=ds,
                 bins=10)
    assert write_report(a) == write_report(b)
    back = read_report(write_report(a))
    assert float(back["summary"]["nll_mean"]) == float(a["summary"]["nll_mean"])
    keys = {row["key"] for row in back["tables"]["reference"]}
    assert keys == set(PUBLISHED_REFERENCE)
    assert 0 <= float(back["summary"]["js_divergence"]) <= math.log(2)
    assert len(back["tables"]["distance_histogram"]) == 10
    with pytest.raises(ValueError):
        evaluate(model, Dataset([], 2), TraceEstimator())


def test_evaluate_reports_stability_for_typed_models():
    recs = [Record(np.zeros((2, 3)), None, np.array([[0], [0]]))]
    ds = Dataset(recs, 3, 0, (5,), system="molecule")
    model = build_model("enf", n=3, cat_classes=(5,), hidden=8, n_layers=1, steps=3,
                        lifter_hidden=8, lifter_layers=1)
    from enflows.lifting import NodeCountDistribution
    model.node_counts = NodeCountDistribution.fit([2, 3])
    report = evaluate(model, ds, TraceEstimator("exact"), 1, 0, 3, n_samples=4, bins=5)
    assert 0 <= float(report["summary"]["atom_stability"]) <= 1
    assert 0 <= float(report["summary"]["mol_stability"]) <= 1
