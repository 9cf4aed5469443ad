import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse.linalg import LinearOperator, cg

from bayesqsm.dipole import NoiseModel, _apply, build_dipole_kernel, forward_field
from bayesqsm.map_solver import (RegConfig, SolveOptions, div3, edge_mask_from_magnitude, grad3,
                                 solve_medi, tv_value_grad)
from bayesqsm.metrics import rmse_pct
from bayesqsm.simulate import (EchoConfig, PhantomSpec, Primitive, build_phantom, fit_field,
                               synthesize_echoes, synthesize_field)
from bayesqsm.volume import BinaryMask, SeededRng, Volume


def _noise(dims, sd=1.0, support=None):
    sup = np.ones(dims, bool) if support is None else support
    return NoiseModel(Volume(np.full(dims, sd)), BinaryMask(sup))


@given(st.tuples(*(st.integers(1, 6),) * 3), st.integers(0, 2**31))
def test_grad_div_adjoint(dims, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal(dims)
    p = r.standard_normal((3,) + dims)
    assert np.sum(grad3(x) * p) == pytest.approx(np.sum(x * div3(p)), abs=1e-10)


def test_grad_neumann_last_slice():
    x = np.arange(24.0).reshape(2, 3, 4)
    g = grad3(x)
    assert not g[0, -1].any() and not g[1, :, -1].any() and not g[2, :, :, -1].any()
    assert (g[0, 0] == 12).all() and (g[1, :, 0] == 4).all() and (g[2, :, :, 0] == 1).all()


def test_tv_constant_volume():
    rng = np.random.default_rng(0)
    mask = rng.random((3, 5, 5, 5)) > 0.3
    reg = RegConfig(lam=2.5, tv_epsilon=1e-3, edge_mask=mask)
    v, g = tv_value_grad(Volume(np.full((5, 5, 5), 0.7)), reg)
    assert v == pytest.approx(2.5 * 1e-3 * mask.sum(), rel=1e-12)
    assert not g.data.any()


def test_tv_gradient_fd_including_mask_edges():
    rng = np.random.default_rng(1)
    dims = (6, 5, 4)
    mask = rng.random((3,) + dims) > 0.4
    reg = RegConfig(lam=3.0, tv_epsilon=1e-2, edge_mask=mask)
    x = rng.standard_normal(dims)
    _, g = tv_value_grad(Volume(x), reg)
    h = 1e-5
    # faces and corners first, then random voxels
    picks = [(0, 0, 0), (5, 4, 3), (0, 4, 2)] + [tuple(rng.integers(0, d) for d in dims)
                                                for _ in range(10)]
    for i in picks:
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (tv_value_grad(Volume(xp), reg)[0] - tv_value_grad(Volume(xm), reg)[0]) / (2 * h)
        assert fd == pytest.approx(g.data[i], rel=1e-5, abs=1e-8)


def test_tv_homogeneous_away_from_smoothing():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 6, 6))
    reg = RegConfig(lam=1.0, tv_epsilon=1e-6)
    v1 = tv_value_grad(Volume(x), reg)[0]
    v2 = tv_value_grad(Volume(7.0 * x), reg)[0]
    assert v2 / v1 == pytest.approx(7.0, rel=0.01)


def test_reg_config_validation():
    with pytest.raises(ValueError):
        RegConfig(lam=-1)
    with pytest.raises(ValueError):
        RegConfig(tv_epsilon=0)
    with pytest.raises(ValueError):
        RegConfig(edge_mask=np.ones((2, 4, 4, 4)))
    with pytest.raises(ValueError):
        tv_value_grad(Volume(np.zeros((3, 3, 3))), RegConfig(edge_mask=np.ones((3, 4, 4, 4))))
    with pytest.raises(ValueError):
        SolveOptions(max_iters=0)


def test_edge_mask_constant_warns():
    with pytest.warns(RuntimeWarning):
        m = edge_mask_from_magnitude(Volume(np.ones((4, 4, 4))))
    assert m.all()


def test_edge_mask_step_face():
    m0 = np.zeros((8, 8, 8))
    m0[4:] = 1.0
    m = edge_mask_from_magnitude(Volume(m0), keep_fraction=0.3)
    expect = np.ones((3, 8, 8, 8), bool)
    expect[0, 3] = False  # forward difference between x=3 and x=4
    np.testing.assert_array_equal(m, expect)


def test_edge_mask_small_fraction_keeps_fewer_edges():
    rng = np.random.default_rng(3)
    m0 = Volume(rng.random((8, 8, 8)))
    few = edge_mask_from_magnitude(m0, keep_fraction=1e-4)
    many = edge_mask_from_magnitude(m0, keep_fraction=0.5)
    assert (~few).sum() <= 2 and (~many).sum() > (~few).sum()
    with pytest.raises(ValueError):
        edge_mask_from_magnitude(m0, keep_fraction=1.0)


def test_medi_zero_data_gives_zero():
    k = build_dipole_kernel((8, 8, 8))
    chi, rep = solve_medi(Volume(np.zeros((8, 8, 8))), _noise((8, 8, 8)), k, RegConfig())
    assert np.abs(chi.data).max() <= 1e-12
    assert rep.converged


def _range_data(dims, seed=0):
    k = build_dipole_kernel(dims)
    chi = np.random.default_rng(seed).standard_normal(dims) * 0.1
    return k, forward_field(Volume(chi), k)


@pytest.mark.parametrize("method", ["gn-cg", "gd"])
def test_medi_noiseless_range_data(method):
    k, b = _range_data((8, 8, 8))
    chi, rep = solve_medi(b, _noise(b.dims), k, RegConfig(lam=0.0),
                          SolveOptions(max_iters=200, method=method))
    fid = rep.terms["fidelity"]
    assert rep.objective[-1] <= rep.objective[0]
    assert fid[-1] <= 0.01 * fid[0]
    assert np.all(np.diff(rep.objective) <= 1e-12)


def test_medi_least_squares_oracle():
    dims = (8, 8, 8)
    k, b = _range_data(dims, seed=4)
    b = b.like(b.data + 0.05 * np.random.default_rng(5).standard_normal(dims))
    chi, _ = solve_medi(b, _noise(dims), k, RegConfig(lam=0.0), SolveOptions(max_iters=100))
    n = b.data.size
    op = LinearOperator((n, n), matvec=lambda v: _apply(_apply(v.reshape(dims), k), k).ravel())
    x, info = cg(op, _apply(b.data, k).ravel(), rtol=1e-12, maxiter=2000)
    assert info == 0
    res_oracle = np.linalg.norm(_apply(x.reshape(dims), k) - b.data)
    res = np.linalg.norm(_apply(chi.data, k) - b.data)
    assert res <= 1.01 * res_oracle


def test_medi_deterministic_and_support_restricted():
    dims = (8, 8, 8)
    k, b = _range_data(dims, seed=6)
    sup = np.zeros(dims, bool)
    sup[1:7, 1:7, 1:7] = True
    noise = _noise(dims, 0.5, sup)
    a, ra = solve_medi(b, noise, k, RegConfig(lam=0.01))
    c, rc = solve_medi(b, noise, k, RegConfig(lam=0.01))
    np.testing.assert_array_equal(a.data, c.data)
    assert ra.objective == rc.objective
    assert not a.data[~sup].any()


def test_medi_sphere_phantom_beats_zero_fill():
    dims = (32, 32, 32)
    maps = build_phantom(PhantomSpec(dims, primitives=[
        Primitive("sphere", (0, 0, 0), (6,), 0.2), Primitive("sphere", (-7, 5, 2), (3,), -0.1)]))
    k = build_dipole_kernel(dims)
    cfg = EchoConfig()
    fe, sd = fit_field(synthesize_echoes(maps, synthesize_field(maps, k), cfg, SeededRng(8)), cfg)
    noise = NoiseModel(sd, maps.support)
    reg = RegConfig(lam=20.0, edge_mask=edge_mask_from_magnitude(maps.m0, support=maps.support))
    chi, rep = solve_medi(fe.like(fe.data * maps.support.data), noise, k, reg)
    zero = rmse_pct(Volume(np.zeros(dims)), maps.chi, maps.support)
    assert rmse_pct(chi, maps.chi, maps.support) <= 0.5 * zero
    assert np.all(np.diff(rep.objective) <= 1e-12 * np.abs(rep.objective[:-1]))


def test_report_json(tmp_path):
    k, b = _range_data((4, 4, 4))
    _, rep = solve_medi(b, _noise(b.dims), k, RegConfig(lam=0.1), SolveOptions(max_iters=3))
    rep.to_json(tmp_path / "r.json")
    import json
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["method"] == "medi" and len(d["provenance"]["config_hash"]) == 16
    assert len(d["objective"]) == len(d["terms"]["fidelity"])
