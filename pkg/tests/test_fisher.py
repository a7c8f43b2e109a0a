import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mansu.attribution import Circuit, StructuralError
from mansu.fisher import (FisherDiag, TradeoffInputs, build_mask, estimate_fisher, interlace_holds, mask_vs_exact,
                          project, theory_probes, tradeoff_bound)
from mansu.net import loss_and_grads


def naive_fisher(ckpt, data, idx, circuit):
    mask = circuit.parameter_mask(ckpt.dims)
    ref = ckpt.copy(params=ckpt.reference)
    acc = np.zeros(int(mask.sum()))
    for i in idx:
        _, g = loss_and_grads(ref, data, [i], "cross-entropy")
        acc += g[mask] ** 2
    return acc / len(idx)


def test_fisher_matches_naive_loop(base, data):
    c = Circuit((1, 2), base.dims.depth)
    f = estimate_fisher(base, data.retain_indices, c, data=data)
    ref = naive_fisher(base, data, data.retain_indices, c)
    assert f.values.shape == ref.shape
    assert np.max(np.abs(f.values - ref)) <= 1e-12
    assert np.all(f.values >= 0) and f.n_samples == len(data.retain_indices)


def test_fisher_uses_reference_weights(base, data):
    c = Circuit((0,), base.dims.depth)
    moved = base.copy(params=base.params + 0.1)
    a = estimate_fisher(base, data.retain_indices, c, data=data)
    b = estimate_fisher(moved, data.retain_indices, c, data=data)
    assert np.array_equal(a.values, b.values)


def test_single_example_fisher_is_squared_gradient(base, data):
    c = Circuit((2,), base.dims.depth)
    i = data.retain_indices[:1]
    f = estimate_fisher(base, i, c, data=data)
    assert np.allclose(f.values, naive_fisher(base, data, i, c), atol=1e-15, rtol=0)


def test_fisher_argument_errors(base, data):
    c = Circuit((0,), base.dims.depth)
    with pytest.raises(ValueError):
        estimate_fisher(base, [], c, data=data)
    with pytest.raises(ValueError):
        estimate_fisher(base, data.retain_indices[:3], c, n_samples=4, data=data)
    with pytest.raises(StructuralError):
        estimate_fisher(base, data.retain_indices, Circuit((0,), 2), data=data)


def fd(values):
    return FisherDiag(np.asarray(values, dtype=float), 1)


def test_mask_examples():
    v = [0.0, 1.0, 2.0, 3.0]
    assert build_mask(fd(v), "percentile", 100).mask.all()
    assert list(build_mask(fd(v), "percentile", 0).mask) == [True, False, False, False]
    m = build_mask(fd(v), "mean-fraction", 0.1)
    assert m.tau == pytest.approx(0.15)
    assert list(m.mask) == [True, False, False, False]
    # nearest rank: ceil(0.5 * 4) = 2nd smallest
    assert build_mask(fd(v), "percentile", 50).tau == 1.0
    with pytest.raises(ValueError):
        build_mask(fd(v), "percentile", 101)
    with pytest.raises(ValueError):
        build_mask(fd(v), "median")


def test_percentile99_keeps_most(base, data):
    f = build_mask(estimate_fisher(base, data.retain_indices, Circuit((1,), base.dims.depth), data=data))
    assert 0.98 <= f.mask.mean() < 1.0 and f.policy == "percentile(99)"


def test_project_examples():
    g = np.array([1.0, -2.0, 3.0, 4.0])
    assert np.array_equal(project(g, build_mask(fd([0, 1, 2, 3]), "percentile", 100)), g)
    none = FisherDiag(np.ones(4), 1, tau=0.5)
    assert not project(g, none).any()
    mixed = FisherDiag(np.array([0.0, 5.0, 0.1, 5.0]), 1, tau=1.0)
    assert np.array_equal(project(g, mixed), [1.0, 0.0, 3.0, 0.0])
    with pytest.raises(StructuralError):
        project(np.ones(3), mixed)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.floats(0, 100), st.integers(0, 2**32 - 1))
def test_projector_properties(values, pct, seed):
    f = build_mask(fd(values), "percentile", pct)
    g = np.random.default_rng(seed).normal(size=len(values))
    p = project(g, f)
    assert np.array_equal(project(p, f), p)
    assert np.array_equal(p != 0, f.mask & (g != 0))
    # diagonal quadratic with Hessian = Fisher: curvature along p is at most tau
    assert p @ (f.values * p) <= f.tau * (p @ p) * (1 + 1e-12) + 1e-300


def test_tradeoff_values():
    out = tradeoff_bound(TradeoffInputs(0.02, 8.03e9, 8.03e9, 1.0), floor=8.4e-4)
    assert out["per_param_bound"] == pytest.approx(2.23e-6, rel=0.02)
    assert out["floor_crossing_fraction"] == pytest.approx(7e-6, rel=0.15)
    assert tradeoff_bound(TradeoffInputs(0.0, 10, 10, 1.0))["per_param_bound"] == 0.0
    with pytest.raises(ValueError):
        tradeoff_bound(TradeoffInputs(0.02, 0, 10, 1.0))


@given(st.floats(1e-4, 1), st.floats(1, 1e10), st.floats(1e-3, 1e3), st.floats(1.01, 10))
def test_tradeoff_monotone(eps, size, fbar, k):
    b = lambda e, c, f: tradeoff_bound(TradeoffInputs(e, c, 1e10, f))["per_param_bound"]
    base = b(eps, size, fbar)
    assert b(eps, size * k, fbar) < base
    assert b(eps, size, fbar * k) < base
    assert b(eps * k, size, fbar) > base


def test_crossing_fraction_reproduces_floor():
    out = tradeoff_bound(TradeoffInputs(0.02, 1.0, 8.03e9, 1.0), floor=8.4e-4)
    size = out["floor_crossing_fraction"] * 8.03e9
    again = tradeoff_bound(TradeoffInputs(0.02, size, 8.03e9, 1.0))
    assert again["per_param_bound"] == pytest.approx(8.4e-4, rel=1e-12)


def test_probes_zero_violations():
    r = theory_probes(seed=7, trials=100, dim=16)
    assert r["passed"]
    assert r["violations"] == {"interlace": 0, "subvector": 0, "null_quadratic": 0, "mask_approx": 0}
    assert r["max_null_quadratic"] <= 1e-10


def test_probe_full_circuit_and_diagonal():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(6, 6))
    H = B @ B.T
    assert interlace_holds(H, np.arange(6))
    F = np.diag([0.0, 0.3, 2.0, 0.0, 4.0])
    gap, bound = mask_vs_exact(F, rng.normal(size=5), tau=1.0, eta=0.1)
    assert gap == 0.0 and bound == 0.0


def test_probes_validate_arguments():
    with pytest.raises(ValueError):
        theory_probes(dim=3)
    with pytest.raises(ValueError):
        theory_probes(trials=0)
