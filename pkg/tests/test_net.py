import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesqsm.dipole import NoiseModel, build_dipole_kernel, forward_field
from bayesqsm.experiments import _net_fd, check_degenerate_density, toy_net
from bayesqsm.map_solver import RegConfig
from bayesqsm.net import (MissingForwardCacheError, NetConfig, PatchDataset, WeightFileError,
                          adapt_vi, build_net, extract_patches, load_weights, net_backward,
                          net_forward, nll_loss, predict, save_weights, train_pdi)
from bayesqsm.volume import BinaryMask, Volume


def _toy(levels=1, seed=0):
    return toy_net(levels, seed)


@pytest.mark.parametrize("dims", [(16, 16, 16), (16, 16, 8)])
def test_output_shapes(dims):
    mu, lv = net_forward(build_net(), Volume(np.zeros(dims)))
    assert mu.dims == lv.dims == dims


def test_indivisible_dims_rejected():
    with pytest.raises(ValueError, match="divisible"):
        net_forward(build_net(NetConfig(levels=3)), Volume(np.zeros((8, 8, 6))))


def test_affine_collapse_to_biases():
    net = build_net(NetConfig(levels=2, base_filters=2))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("weight"):
                p.zero_()
        net.dec_mu.head.bias.fill_(0.25)
        net.dec_var.head.bias.fill_(-2.0)
    mu, lv = net_forward(net, Volume(np.random.default_rng(0).standard_normal((8, 8, 8))))
    np.testing.assert_allclose(mu.data, 0.25, rtol=1e-7)
    np.testing.assert_allclose(lv.data, -2.0, rtol=1e-7)


def test_log_var_init_and_floor():
    net = build_net(NetConfig(levels=1, base_filters=2, log_var_init=-20.0, log_var_floor=-12.0))
    _, lv = net_forward(net, Volume(np.zeros((4, 4, 4))))
    np.testing.assert_array_equal(lv.data, -12.0)
    with pytest.raises(ValueError):
        NetConfig(log_var_floor=-40.0)
    with pytest.raises(ValueError):
        NetConfig(levels=0)


def test_shift_covariance_interior():
    net = _toy(levels=2, seed=3)
    b = np.random.default_rng(1).standard_normal((32, 8, 8))
    mu, lv = net_forward(net, Volume(b))
    mu_s, lv_s = net_forward(net, Volume(np.roll(b, 2, axis=0)))
    # even shift keeps the pooling grid aligned; the receptive field spans about
    # 11 voxels, so compare x-slabs that see neither face nor wrap seam
    inner = slice(14, 20)
    np.testing.assert_allclose(np.roll(mu.data, 2, axis=0)[inner], mu_s.data[inner], atol=1e-4)
    np.testing.assert_allclose(np.roll(lv.data, 2, axis=0)[inner], lv_s.data[inner], atol=1e-4)


@pytest.mark.parametrize("levels", [1, 2])
def test_weight_gradients_fd(levels):
    r = np.random.default_rng(levels)
    net = _toy(levels, seed=levels)
    err = _net_fd(net, r.standard_normal((4, 4, 4)), r.standard_normal((4, 4, 4)),
                  r.standard_normal((4, 4, 4)))
    assert err <= 1e-4


def test_zero_upstream_and_missing_cache():
    net = _toy()
    b = Volume(np.ones((4, 4, 4)))
    with pytest.raises(MissingForwardCacheError):
        net_backward(net, np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))
    net_forward(net, b, record=True)
    g = net_backward(net, np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))
    assert all(not v.any() for v in g.values())
    with pytest.raises(MissingForwardCacheError):  # the tape is consumed
        net_backward(net, np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))


def test_gradient_linear_over_patches():
    r = np.random.default_rng(5)
    net = _toy(levels=2, seed=5)
    b1, b2 = r.standard_normal((2, 4, 4, 4))
    u = r.standard_normal((4, 4, 4, 4))

    def grads(b, a, c):
        net_forward(net, Volume(b), record=True)
        return net_backward(net, a, c)

    g1, g2 = grads(b1, u[0], u[1]), grads(b2, u[2], u[3])
    # both patches in a single graph
    x = torch.as_tensor(np.stack([b1, b2]))
    mu, lv = net(x)
    s = (mu * torch.as_tensor(u[[0, 2]])).sum() + (lv * torch.as_tensor(u[[1, 3]])).sum()
    net.zero_grad()
    s.backward()
    for name, p in net.named_parameters():
        np.testing.assert_allclose(p.grad.numpy(), g1[name] + g2[name], rtol=1e-10, atol=1e-12)


def test_nll_examples():
    chi = np.array([0.3, -0.1, 0.0])
    assert nll_loss(chi, np.zeros(3), chi)[0] == 0.0
    mu = np.array([0.1, 0.2, -0.4])
    opt = np.log((chi - mu) ** 2)
    v0 = nll_loss(mu, opt, chi)[0]
    _, (_, gl) = nll_loss(mu, opt, chi)
    np.testing.assert_allclose(gl, 0.0, atol=1e-12)
    for d in (-0.1, 0.1):
        assert nll_loss(mu, opt + d, chi)[0] > v0
    with pytest.raises(ValueError):
        nll_loss(mu, opt[:2], chi)


@settings(max_examples=15)
@given(st.integers(0, 2**31))
def test_nll_gradient_fd(seed):
    r = np.random.default_rng(seed)
    mu, lv, chi, v = r.standard_normal((4, 2, 3, 2))
    _, (gm, gl) = nll_loss(mu, lv, chi)
    h = 1e-6
    for g, which in ((gm, 0), (gl, 1)):
        args_p = [mu, lv, chi]
        args_m = [mu, lv, chi]
        args_p[which] = args_p[which] + h * v
        args_m[which] = args_m[which] - h * v
        fd = (nll_loss(*args_p)[0] - nll_loss(*args_m)[0]) / (2 * h)
        assert fd == pytest.approx(np.sum(g * v), rel=1e-6, abs=1e-9)


def test_degenerate_model_recovers_sample_statistics():
    res = check_degenerate_density()
    assert res["passed"], res


def _pairs(n=6, seed=0, dims=(8, 8, 8)):
    r = np.random.default_rng(seed)
    k = build_dipole_kernel(dims)
    chis = 0.1 * r.standard_normal((n,) + dims)
    fields = np.stack([forward_field(Volume(c), k).data for c in chis])
    return fields, chis


def test_overfit_single_pair():
    f, c = _pairs(1)
    ds = PatchDataset(f, c)
    net = build_net(NetConfig(levels=1, base_filters=8, log_var_init=0.0, log_var_floor=-8.0))
    _, curves = train_pdi(net, ds, epochs=400, lr=1e-2, seed=0, batch_size=1, clip=None)
    tr = curves["train_nll"]
    # best reachable: mu = chi exactly with the variance at the log_var floor
    floor = 0.5 * net.config.log_var_floor
    assert tr[0] - min(tr) >= 0.9 * (tr[0] - floor)


def test_training_is_deterministic():
    f, c = _pairs(6, seed=1)
    split = np.array(["train"] * 4 + ["val"] * 2)
    ds = PatchDataset(f, c, split)
    runs = [train_pdi(build_net(NetConfig(levels=1, base_filters=2)), ds, epochs=3)[1]
            for _ in range(2)]
    assert runs[0] == runs[1]
    assert len(runs[0]["val_rmse_pct"]) == 3


def test_patch_dataset_contract():
    vol = np.arange(8 * 8 * 8, dtype=float).reshape(8, 8, 8)
    patches = extract_patches(vol, (4, 4, 4), (4, 4, 4))
    assert len(patches) == 8 and np.array_equal(patches[1], vol[0:4, 0:4, 4:8])
    mask = vol > 100
    ds = PatchDataset.from_volumes([(vol, vol, mask)], patch=(4, 4, 4), step=(2, 2, 2))
    assert len(ds) == 27 and ds.masks.shape == ds.fields.shape
    with pytest.raises(ValueError):
        PatchDataset(np.zeros((2, 4, 4, 4)), np.zeros((2, 4, 4, 2)))
    with pytest.raises(ValueError):
        PatchDataset(np.full((1, 2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        train_pdi(build_net(), PatchDataset(np.zeros((1, 4, 4, 4))), epochs=1)


def test_weights_roundtrip(tmp_path):
    net = build_net(NetConfig(levels=2, base_filters=2, seed=4))
    save_weights(net, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin", expected_config=net.config)
    for (n1, a), (n2, b) in zip(net.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)
    x = np.random.default_rng(0).standard_normal((3, 8, 8, 8))
    for u, v in zip(predict(net, x), predict(back, x)):
        np.testing.assert_array_equal(u, v)


def test_weights_errors(tmp_path):
    net = build_net(NetConfig(levels=1, base_filters=2))
    p = tmp_path / "w.bin"
    save_weights(net, p)
    with pytest.raises(WeightFileError, match="config"):
        load_weights(p, expected_config=NetConfig(levels=2, base_filters=2))
    raw = p.read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-4])
    with pytest.raises(WeightFileError, match="truncated"):
        load_weights(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(raw.replace(b'"version": 1', b'"version": 9'))
    with pytest.raises(WeightFileError, match="unsupported"):
        load_weights(tmp_path / "x.bin")


def _smoothed(x, w=10):
    return np.convolve(x, np.ones(w) / w, mode="valid")


def test_adapt_vi_trace_stable_and_summed():
    dims = (8, 8, 8)
    f, _ = _pairs(3, seed=2, dims=dims)
    k = build_dipole_kernel(dims)
    sup = np.zeros(dims, bool)
    sup[1:7, 1:7, 1:7] = True
    fields = [Volume(x * sup) for x in f]
    noises = [NoiseModel(Volume(np.full(dims, 0.05)), BinaryMask(sup))] * 3
    net = build_net(NetConfig(levels=2, base_filters=2))
    _, tr = adapt_vi(net, fields, noises, k, RegConfig(lam=1.0), K=2, epochs=40, lr=1e-3)
    s = _smoothed(np.array(tr.total))
    assert np.all(np.diff(s) <= 0.01 * np.abs(s[:-1]))
    for e, p, fi, t in tr.rows():
        assert t == e + p + fi
    with pytest.raises(ValueError):
        adapt_vi(net, fields, noises[:2], k, RegConfig())
    assert math.isfinite(tr.total[-1])
